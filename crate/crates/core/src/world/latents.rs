//! The synthetic world: frozen latent directions, sample rendering, and the
//! frozen text encoder stand-in.
//!
//! Each attribute and object owns a fixed unit direction. An image of a
//! composition is a class feature near the normalized sum of its two
//! directions plus patch tokens that blend them with per-patch mixing
//! weights. The text encoder is a frozen two-layer map that is differentiable
//! with respect to its prompt input and never trains.

use rand_chacha::ChaCha8Rng;

use crate::numcore::{NumError, Tape, Tensor, Var};
use crate::rng::{chacha, mix, normal_vec};

use super::{Comp, CompositionSpace, WorldError};

const TAG_ATTR_DIRS: u64 = 0x41545452;
const TAG_OBJ_DIRS: u64 = 0x4f424a44;
const TAG_ENCODER: u64 = 0x454e4344;
const TAG_RENDER: u64 = 0x524e4452;

/// Frozen world parameters: concept directions, noise level, and the frozen
/// text encoder weights. Nothing here ever receives a gradient.
#[derive(Debug, Clone)]
pub struct WorldLatents {
    pub d: usize,
    pub n_patches: usize,
    pub sigma: f64,
    pub seed: u64,
    attr_dirs: Tensor,
    obj_dirs: Tensor,
    w1: Tensor,
    w2: Tensor,
}

/// One rendered image: a class feature and `n_patches` patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub attr: usize,
    pub obj: usize,
    /// Length `d`.
    pub cls: Vec<f64>,
    /// Row-major `n_patches x d`.
    pub patches: Vec<f64>,
}

/// Frozen encoder weights placed on a tape as constants.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w1: Var,
    pub w2: Var,
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if r > 0.0 {
        v.iter_mut().for_each(|x| *x /= r);
    }
    v
}

/// Draws the frozen world for a space: unit-norm concept directions and the
/// frozen encoder, all seeded.
pub fn spawn_world(
    space: &CompositionSpace,
    d: usize,
    n_patches: usize,
    sigma: f64,
    seed: u64,
) -> Result<WorldLatents, WorldError> {
    if d == 0 || n_patches == 0 {
        return Err(WorldError::Num(NumError::Domain {
            op: "spawn_world",
            detail: format!("d and n_patches must be positive, got d={d}, L={n_patches}"),
        }));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(WorldError::Num(NumError::Domain {
            op: "spawn_world",
            detail: format!("sigma must be finite and non-negative, got {sigma}"),
        }));
    }
    let unit_rows = |tag: u64, n: usize| -> Vec<f64> {
        let mut rng = chacha(mix(seed, &[tag]));
        let mut rows = Vec::with_capacity(n * d);
        for _ in 0..n {
            rows.extend(normalized(normal_vec(&mut rng, d)));
        }
        rows
    };
    let attr_dirs = Tensor::new(vec![space.n_attrs(), d], unit_rows(TAG_ATTR_DIRS, space.n_attrs()))?;
    let obj_dirs = Tensor::new(vec![space.n_objs(), d], unit_rows(TAG_OBJ_DIRS, space.n_objs()))?;

    let mut enc_rng = chacha(mix(seed, &[TAG_ENCODER]));
    let scale = 1.0 / (d as f64).sqrt();
    let weights = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        normal_vec(rng, d * d).into_iter().map(|v| v * scale).collect()
    };
    let w1 = Tensor::new(vec![d, d], weights(&mut enc_rng))?;
    let w2 = Tensor::new(vec![d, d], weights(&mut enc_rng))?;

    Ok(WorldLatents { d, n_patches, sigma, seed, attr_dirs, obj_dirs, w1, w2 })
}

impl WorldLatents {
    pub fn n_attrs(&self) -> usize {
        self.attr_dirs.shape()[0]
    }

    pub fn n_objs(&self) -> usize {
        self.obj_dirs.shape()[0]
    }

    pub fn attr_dir(&self, i: usize) -> Result<&[f64], NumError> {
        self.attr_dirs.row(i)
    }

    pub fn obj_dir(&self, i: usize) -> Result<&[f64], NumError> {
        self.obj_dirs.row(i)
    }

    /// Places the frozen encoder weights on a tape. They are constants, so
    /// downstream operations through them still reach prompt inputs.
    pub fn encoder_vars(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars { w1: tape.leaf(&self.w1), w2: tape.leaf(&self.w2) }
    }
}

fn cls_feature(u: &[f64], w: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = normal_vec(rng, u.len());
    let v: Vec<f64> = (0..u.len()).map(|j| u[j] + w[j] + sigma * noise[j]).collect();
    normalized(v)
}

pub(crate) fn patch_feature(
    u: &[f64],
    w: &[f64],
    alpha: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let noise = normal_vec(rng, u.len());
    let v: Vec<f64> =
        (0..u.len()).map(|j| alpha * u[j] + (1.0 - alpha) * w[j] + sigma * noise[j]).collect();
    normalized(v)
}

/// Renders one image of a composition. Deterministic in the world, the
/// composition, and `per_sample_seed`.
pub fn render_sample(
    latents: &WorldLatents,
    comp: Comp,
    per_sample_seed: u64,
) -> Result<Sample, WorldError> {
    let (a, o) = comp;
    if a >= latents.n_attrs() || o >= latents.n_objs() {
        return Err(WorldError::BadComposition {
            comp,
            n_attrs: latents.n_attrs(),
            n_objs: latents.n_objs(),
        });
    }
    let u = latents.attr_dirs.row(a)?;
    let w = latents.obj_dirs.row(o)?;
    let mut rng = chacha(mix(latents.seed, &[TAG_RENDER, a as u64, o as u64, per_sample_seed]));

    let cls = cls_feature(u, w, latents.sigma, &mut rng);
    let mut patches = Vec::with_capacity(latents.n_patches * latents.d);
    for _ in 0..latents.n_patches {
        let alpha: f64 = rand::Rng::gen(&mut rng);
        patches.extend(patch_feature(u, w, alpha, latents.sigma, &mut rng));
    }
    Ok(Sample { attr: a, obj: o, cls, patches })
}

/// Renders `per_comp` images for every composition in `comps`, seeded per
/// composition and draw index.
pub fn render_many(
    latents: &WorldLatents,
    comps: &[Comp],
    per_comp: usize,
    base_seed: u64,
) -> Result<Vec<Sample>, WorldError> {
    let mut out = Vec::with_capacity(comps.len() * per_comp);
    for &comp in comps {
        for k in 0..per_comp {
            out.push(render_sample(latents, comp, mix(base_seed, &[k as u64]))?);
        }
    }
    Ok(out)
}

/// The frozen text encoder: mean-pools a prompt sequence, applies two frozen
/// linear maps around a tanh, and L2-normalizes. Differentiable with respect
/// to the sequence; the weights never receive gradients.
pub fn frozen_text_encode(tape: &mut Tape, enc: &EncoderVars, seq: Var) -> Result<Var, NumError> {
    let pooled = tape.mean_rows(seq)?;
    let h = tape.matvec(enc.w1, pooled)?;
    let h = tape.tanh(h)?;
    let e = tape.matvec(enc.w2, h)?;
    tape.normalize_rows(e)
}
