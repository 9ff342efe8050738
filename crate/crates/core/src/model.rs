//! Forward computation: visual decomposition heads, cross-attention fusion,
//! and temperature-scaled cosine logits.
//!
//! One forward pass stitches three strands together. The text strand encodes
//! every known attribute, object, and composition prompt through the frozen
//! encoder; these embeddings are shared by the whole batch, so they are
//! computed once per step. The visual strand factorizes each image: patch
//! tokens run through a dense + batchnorm + ReLU head per primitive branch
//! (with dropout while training) and are mean-pooled, while the class token
//! passes through untouched as the composition factor. The fusion strand then
//! conditions the text embeddings on each image: a session-agnostic module
//! refines all attribute and object embeddings via single-head cross
//! attention over the patches, and a session-aware module refines composition
//! embeddings according to `saw_mode`:
//!
//! - `TailOnly`: compositions from the current session cross-attend to the
//!   patches; earlier (head) compositions only pass through the module's MLP.
//!   Head MLP outputs are image-independent and are computed once per step.
//! - `UpdateBoth`: every composition takes the cross-attention path.
//! - `FreezeHead`: head embeddings are detached (no refinement, no gradient
//!   through the composition branch); the tail behaves as in `TailOnly`.
//! - `Off`: the module is skipped entirely.
//!
//! Logits are `exp(beta) * cos(v, e)` per candidate with a learnable `beta`;
//! branch probabilities use a temperature softmax. Zero vectors on either
//! side of the cosine are a hard error rather than a silent zero score.
//!
//! Batch-norm runs over all patch rows of the batch; a single-row batch falls
//! back to the running statistics, which are updated only by training-mode
//! passes and never enter gradient flow.

use std::error::Error;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numcore::{NumError, Tape, Tensor, Var};
use crate::prompts::{
    assemble_comp, assemble_primitive, BankVars, HeadTailPartition, PromptBank, PromptError,
};
use crate::rng::{chacha, mix, normal_vec};
use crate::world::{frozen_text_encode, Sample, WorldLatents};

const TAG_HEAD_ATTR: u64 = 0x4d48_4541;
const TAG_HEAD_OBJ: u64 = 0x4d48_454f;
const TAG_SAG: u64 = 0x4d46_5347;
const TAG_SAW: u64 = 0x4d46_5357;
const TAG_DROP_ATTR: u64 = 0x4d44_5241;
const TAG_DROP_OBJ: u64 = 0x4d44_524f;

/// CLIP-style logit scale at initialization.
const BETA_INIT_INV_TEMP: f64 = 1.0 / 0.07;

#[derive(Debug)]
pub enum ModelError {
    Num(NumError),
    Prompt(PromptError),
    BadConfig { what: &'static str, detail: String },
    PartitionMismatch { detail: String },
    ZeroVector { what: &'static str },
    BadSample { index: usize, detail: String },
    EmptyBatch,
    EmptyBank { what: &'static str },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Num(e) => write!(f, "numeric failure: {e}"),
            ModelError::Prompt(e) => write!(f, "prompt failure: {e}"),
            ModelError::BadConfig { what, detail } => write!(f, "bad {what}: {detail}"),
            ModelError::PartitionMismatch { detail } => {
                write!(f, "partition inconsistent with bank: {detail}")
            }
            ModelError::ZeroVector { what } => {
                write!(f, "degenerate zero vector in {what}")
            }
            ModelError::BadSample { index, detail } => {
                write!(f, "sample {index} malformed: {detail}")
            }
            ModelError::EmptyBatch => write!(f, "forward pass needs at least one sample"),
            ModelError::EmptyBank { what } => write!(f, "bank has no {what}"),
        }
    }
}

impl Error for ModelError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            ModelError::Num(e) => Some(e),
            ModelError::Prompt(e) => Some(e),
            _ => None,
        }
    }
}

impl From<NumError> for ModelError {
    fn from(e: NumError) -> Self {
        ModelError::Num(e)
    }
}

impl From<PromptError> for ModelError {
    fn from(e: PromptError) -> Self {
        ModelError::Prompt(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How the session-aware fusion treats the composition head/tail split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SawMode {
    /// No session-aware fusion; raw text embeddings score compositions.
    Off,
    /// Tail cross-attends, head passes through the MLP only. The method.
    TailOnly,
    /// Head and tail both cross-attend.
    UpdateBoth,
    /// Head embeddings detached from training; tail cross-attends.
    FreezeHead,
}

/// One primitive branch of the visual decomposition: dense layer, batch norm
/// (learnable scale/shift plus running statistics), shared dropout rate.
#[derive(Debug, Clone)]
pub struct BranchHead {
    pub w: Tensor,
    pub b: Tensor,
    pub bn_scale: Tensor,
    pub bn_shift: Tensor,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
}

impl BranchHead {
    pub fn new(d: usize, seed: u64) -> Result<Self, NumError> {
        let mut rng = chacha(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let w: Vec<f64> = normal_vec(&mut rng, d * d).into_iter().map(|v| v * scale).collect();
        Ok(BranchHead {
            w: Tensor::param(vec![d, d], w)?,
            b: Tensor::param(vec![d], vec![0.0; d])?,
            bn_scale: Tensor::param(vec![d], vec![1.0; d])?,
            bn_shift: Tensor::param(vec![d], vec![0.0; d])?,
            bn_mean: vec![0.0; d],
            bn_var: vec![1.0; d],
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecompositionHeads {
    pub attr: BranchHead,
    pub obj: BranchHead,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl DecompositionHeads {
    pub fn new(d: usize, dropout: f64, seed: u64) -> Result<Self, ModelError> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(ModelError::BadConfig {
                what: "dropout",
                detail: format!("rate must lie in [0, 1), got {dropout}"),
            });
        }
        Ok(DecompositionHeads {
            attr: BranchHead::new(d, mix(seed, &[TAG_HEAD_ATTR]))?,
            obj: BranchHead::new(d, mix(seed, &[TAG_HEAD_OBJ]))?,
            dropout,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        })
    }

    fn absorb(&mut self, stats: &BnBatchStats) {
        let m = self.bn_momentum;
        let blend = |run: &mut Vec<f64>, batch: &[f64]| {
            for (r, &b) in run.iter_mut().zip(batch) {
                *r = (1.0 - m) * *r + m * b;
            }
        };
        blend(&mut self.attr.bn_mean, &stats.attr_mean);
        blend(&mut self.attr.bn_var, &stats.attr_var);
        blend(&mut self.obj.bn_mean, &stats.obj_mean);
        blend(&mut self.obj.bn_var, &stats.obj_var);
    }
}

/// One cross-attention fusion module: query/key/value projections and the
/// output MLP (dense, ReLU, dense).
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl FusionParams {
    pub fn new(d: usize, seed: u64) -> Result<Self, NumError> {
        let mut rng = chacha(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut mat = || -> Vec<f64> {
            normal_vec(&mut rng, d * d).into_iter().map(|v| v * scale).collect()
        };
        let w_q = Tensor::param(vec![d, d], mat())?;
        let w_k = Tensor::param(vec![d, d], mat())?;
        let w_v = Tensor::param(vec![d, d], mat())?;
        let mlp_w1 = Tensor::param(vec![d, d], mat())?;
        let mlp_w2 = Tensor::param(vec![d, d], mat())?;
        Ok(FusionParams {
            w_q,
            w_k,
            w_v,
            mlp_w1,
            mlp_b1: Tensor::param(vec![d], vec![0.0; d])?,
            mlp_w2,
            mlp_b2: Tensor::param(vec![d], vec![0.0; d])?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
    pub scale: Var,
    pub shift: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

/// Every learnable tensor of the model on one tape.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub bank: BankVars,
    pub attr_head: HeadVars,
    pub obj_head: HeadVars,
    pub sag: FusionVars,
    pub saw: FusionVars,
    pub beta: Var,
}

/// The full student/teacher model: prompt bank plus all fusion-side
/// parameters and the logit scale.
#[derive(Debug, Clone)]
pub struct Model {
    pub bank: PromptBank,
    pub heads: DecompositionHeads,
    pub sag: FusionParams,
    pub saw: FusionParams,
    pub beta: Tensor,
    /// Branch softmax temperature.
    pub tau: f64,
    pub saw_mode: SawMode,
}

impl Model {
    pub fn new(
        bank: PromptBank,
        tau: f64,
        dropout: f64,
        saw_mode: SawMode,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(ModelError::BadConfig {
                what: "tau",
                detail: format!("temperature must be positive and finite, got {tau}"),
            });
        }
        let d = bank.d();
        Ok(Model {
            bank,
            heads: DecompositionHeads::new(d, dropout, seed)?,
            sag: FusionParams::new(d, mix(seed, &[TAG_SAG]))?,
            saw: FusionParams::new(d, mix(seed, &[TAG_SAW]))?,
            beta: Tensor::param(vec![], vec![BETA_INIT_INV_TEMP.ln()])?,
            tau,
            saw_mode,
        })
    }

    /// Stable walk over every learnable tensor, bank first. Running batch
    /// norm statistics are not parameters and are not visited.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor)) {
        self.bank.visit_params_mut(&mut f);
        f("head.attr.w", &mut self.heads.attr.w);
        f("head.attr.b", &mut self.heads.attr.b);
        f("head.attr.bn_scale", &mut self.heads.attr.bn_scale);
        f("head.attr.bn_shift", &mut self.heads.attr.bn_shift);
        f("head.obj.w", &mut self.heads.obj.w);
        f("head.obj.b", &mut self.heads.obj.b);
        f("head.obj.bn_scale", &mut self.heads.obj.bn_scale);
        f("head.obj.bn_shift", &mut self.heads.obj.bn_shift);
        visit_fusion(&mut self.sag, "fusion.sag", &mut f);
        visit_fusion(&mut self.saw, "fusion.saw", &mut f);
        f("beta", &mut self.beta);
    }

    /// Read-only walk in the same order as [`Self::visit_params_mut`].
    pub fn visit_params(&self, mut f: impl FnMut(&'static str, &Tensor)) {
        self.bank.visit_params(&mut f);
        f("head.attr.w", &self.heads.attr.w);
        f("head.attr.b", &self.heads.attr.b);
        f("head.attr.bn_scale", &self.heads.attr.bn_scale);
        f("head.attr.bn_shift", &self.heads.attr.bn_shift);
        f("head.obj.w", &self.heads.obj.w);
        f("head.obj.b", &self.heads.obj.b);
        f("head.obj.bn_scale", &self.heads.obj.bn_scale);
        f("head.obj.bn_shift", &self.heads.obj.bn_shift);
        visit_fusion_ref(&self.sag, "fusion.sag", &mut f);
        visit_fusion_ref(&self.saw, "fusion.saw", &mut f);
        f("beta", &self.beta);
    }

    /// Running statistics, for checkpoints.
    pub fn visit_running_stats_mut(&mut self, mut f: impl FnMut(&'static str, &mut Vec<f64>)) {
        f("head.attr.bn_mean", &mut self.heads.attr.bn_mean);
        f("head.attr.bn_var", &mut self.heads.attr.bn_var);
        f("head.obj.bn_mean", &mut self.heads.obj.bn_mean);
        f("head.obj.bn_var", &mut self.heads.obj.bn_var);
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.visit_params_mut(|_, t| t.set_requires_grad(on));
    }

    /// Copies all parameters onto a tape, keeping trainability.
    pub fn vars(&self, tape: &mut Tape) -> ModelVars {
        self.vars_with(tape, Tape::leaf)
    }

    /// Copies all parameters onto a tape as constants. Frozen passes record
    /// no backward nodes.
    pub fn frozen_vars(&self, tape: &mut Tape) -> ModelVars {
        self.vars_with(tape, Tape::frozen_leaf)
    }

    fn vars_with(&self, tape: &mut Tape, mut put: impl FnMut(&mut Tape, &Tensor) -> Var) -> ModelVars {
        let bank = BankVars {
            attr_rows: put(tape, self.bank.attr_rows()),
            obj_rows: put(tape, self.bank.obj_rows()),
            prefix_a: put(tape, self.bank.prefixes()[0]),
            prefix_o: put(tape, self.bank.prefixes()[1]),
            prefix_c: put(tape, self.bank.prefixes()[2]),
        };
        let head = |tape: &mut Tape, h: &BranchHead, put: &mut dyn FnMut(&mut Tape, &Tensor) -> Var| HeadVars {
            w: put(tape, &h.w),
            b: put(tape, &h.b),
            scale: put(tape, &h.bn_scale),
            shift: put(tape, &h.bn_shift),
        };
        let fusion = |tape: &mut Tape, p: &FusionParams, put: &mut dyn FnMut(&mut Tape, &Tensor) -> Var| FusionVars {
            w_q: put(tape, &p.w_q),
            w_k: put(tape, &p.w_k),
            w_v: put(tape, &p.w_v),
            mlp_w1: put(tape, &p.mlp_w1),
            mlp_b1: put(tape, &p.mlp_b1),
            mlp_w2: put(tape, &p.mlp_w2),
            mlp_b2: put(tape, &p.mlp_b2),
        };
        ModelVars {
            bank,
            attr_head: head(tape, &self.heads.attr, &mut put),
            obj_head: head(tape, &self.heads.obj, &mut put),
            sag: fusion(tape, &self.sag, &mut put),
            saw: fusion(tape, &self.saw, &mut put),
            beta: put(tape, &self.beta),
        }
    }

    /// Training forward: dropout active, batch statistics drive the batch
    /// norm and update the running statistics. Returns the tape handles so
    /// the caller can attach losses.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        latents: &WorldLatents,
        samples: &[Sample],
        partition: &HeadTailPartition,
        step_seed: u64,
    ) -> Result<(ModelVars, BatchForward), ModelError> {
        let mv = self.vars(tape);
        let (out, stats) = forward_with_vars(
            tape,
            &mv,
            &self.bank,
            &self.heads,
            self.tau,
            self.saw_mode,
            latents,
            samples,
            partition,
            Mode::Train,
            step_seed,
        )?;
        if let Some(st) = stats {
            self.heads.absorb(&st.0);
        }
        Ok((mv, out))
    }

    /// Evaluation forward: deterministic, records no backward nodes, leaves
    /// the model untouched.
    pub fn forward_eval(
        &self,
        tape: &mut Tape,
        latents: &WorldLatents,
        samples: &[Sample],
        partition: &HeadTailPartition,
    ) -> Result<BatchForward, ModelError> {
        let mv = self.frozen_vars(tape);
        let (out, _) = forward_with_vars(
            tape,
            &mv,
            &self.bank,
            &self.heads,
            self.tau,
            self.saw_mode,
            latents,
            samples,
            partition,
            Mode::Eval,
            0,
        )?;
        Ok(out)
    }
}

fn visit_fusion_ref(
    p: &FusionParams,
    prefix: &'static str,
    f: &mut impl FnMut(&'static str, &Tensor),
) {
    let names: [(&'static str, &Tensor); 7] = match prefix {
        "fusion.sag" => [
            ("fusion.sag.w_q", &p.w_q),
            ("fusion.sag.w_k", &p.w_k),
            ("fusion.sag.w_v", &p.w_v),
            ("fusion.sag.mlp_w1", &p.mlp_w1),
            ("fusion.sag.mlp_b1", &p.mlp_b1),
            ("fusion.sag.mlp_w2", &p.mlp_w2),
            ("fusion.sag.mlp_b2", &p.mlp_b2),
        ],
        _ => [
            ("fusion.saw.w_q", &p.w_q),
            ("fusion.saw.w_k", &p.w_k),
            ("fusion.saw.w_v", &p.w_v),
            ("fusion.saw.mlp_w1", &p.mlp_w1),
            ("fusion.saw.mlp_b1", &p.mlp_b1),
            ("fusion.saw.mlp_w2", &p.mlp_w2),
            ("fusion.saw.mlp_b2", &p.mlp_b2),
        ],
    };
    for (name, t) in names {
        f(name, t);
    }
}

fn visit_fusion(
    p: &mut FusionParams,
    prefix: &'static str,
    f: &mut impl FnMut(&'static str, &mut Tensor),
) {
    // Names must be stable across versions; they key checkpoint blobs.
    let names: [(&'static str, &mut Tensor); 7] = match prefix {
        "fusion.sag" => [
            ("fusion.sag.w_q", &mut p.w_q),
            ("fusion.sag.w_k", &mut p.w_k),
            ("fusion.sag.w_v", &mut p.w_v),
            ("fusion.sag.mlp_w1", &mut p.mlp_w1),
            ("fusion.sag.mlp_b1", &mut p.mlp_b1),
            ("fusion.sag.mlp_w2", &mut p.mlp_w2),
            ("fusion.sag.mlp_b2", &mut p.mlp_b2),
        ],
        _ => [
            ("fusion.saw.w_q", &mut p.w_q),
            ("fusion.saw.w_k", &mut p.w_k),
            ("fusion.saw.w_v", &mut p.w_v),
            ("fusion.saw.mlp_w1", &mut p.mlp_w1),
            ("fusion.saw.mlp_b1", &mut p.mlp_b1),
            ("fusion.saw.mlp_w2", &mut p.mlp_w2),
            ("fusion.saw.mlp_b2", &mut p.mlp_b2),
        ],
    };
    for (name, t) in names {
        f(name, t);
    }
}

/// Per-sample logits and branch probabilities.
#[derive(Debug, Clone, Copy)]
pub struct SampleLogits {
    pub z_a: Var,
    pub z_o: Var,
    pub z_c: Var,
    pub p_a: Var,
    pub p_o: Var,
    pub p_c: Var,
}

/// Everything a forward pass produces for one batch.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub per_sample: Vec<SampleLogits>,
    /// Pooled visual primitive factors, one row per sample.
    pub v_attr: Var,
    pub v_obj: Var,
    /// Class tokens, one row per sample (inputs, never trained).
    pub v_cls: Var,
    /// Unrefined text embeddings shared by the batch.
    pub e_attrs: Var,
    pub e_objs: Var,
    pub e_comps: Var,
}

struct BnBatchStats {
    attr_mean: Vec<f64>,
    attr_var: Vec<f64>,
    obj_mean: Vec<f64>,
    obj_var: Vec<f64>,
}

/// Key/value projections for one fusion module over one patch grid.
fn project_kv(tape: &mut Tape, f: &FusionVars, patches: Var) -> Result<(Var, Var), NumError> {
    Ok((tape.matmul(patches, f.w_k)?, tape.matmul(patches, f.w_v)?))
}

fn attend(tape: &mut Tape, f: &FusionVars, queries: Var, k: Var, v: Var) -> Result<Var, NumError> {
    let d = tape.shape_of(queries)?[1];
    let q = tape.matmul(queries, f.w_q)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.affine_scalar(scores, 1.0 / (d as f64).sqrt(), 0.0)?;
    let weights = tape.softmax_rows(scaled, 1.0)?;
    tape.matmul(weights, v)
}

/// Single-head scaled dot-product cross attention: queries attend over the
/// patch tokens, all through the module's learned projections.
pub fn cross_attend(
    tape: &mut Tape,
    f: &FusionVars,
    queries: Var,
    patches: Var,
) -> Result<Var, NumError> {
    let (k, v) = project_kv(tape, f, patches)?;
    attend(tape, f, queries, k, v)
}

/// The fusion output MLP, applied row-wise.
pub fn fusion_mlp(tape: &mut Tape, f: &FusionVars, x: Var) -> Result<Var, NumError> {
    let h = tape.affine(x, f.mlp_w1, f.mlp_b1)?;
    let h = tape.relu(h)?;
    tape.affine(h, f.mlp_w2, f.mlp_b2)
}

/// Session-agnostic fusion: refines every known attribute and object
/// embedding against one image's patches. One parameter set serves both
/// branches.
pub fn sagm2f(
    tape: &mut Tape,
    f: &FusionVars,
    e_attrs: Var,
    e_objs: Var,
    patches: Var,
) -> Result<(Var, Var), NumError> {
    let (k, v) = project_kv(tape, f, patches)?;
    let ra = attend(tape, f, e_attrs, k, v)?;
    let ro = attend(tape, f, e_objs, k, v)?;
    Ok((fusion_mlp(tape, f, ra)?, fusion_mlp(tape, f, ro)?))
}

/// Session-aware fusion over composition embeddings; see the module doc for
/// the per-mode behavior. Output rows stay in composition-index order.
pub fn sawm2f(
    tape: &mut Tape,
    f: &FusionVars,
    e_comps: Var,
    partition: &HeadTailPartition,
    patches: Var,
    mode: SawMode,
) -> Result<Var, ModelError> {
    let n = tape.shape_of(e_comps)?[0];
    check_partition(partition, n)?;
    let plan = SawPlan::prepare(tape, f, e_comps, partition, mode)?;
    plan.apply(tape, f, patches)
}

/// The per-step precomputation for session-aware fusion: whatever does not
/// depend on the image is resolved once and reused across the batch.
struct SawPlan {
    mode: SawMode,
    e_comps: Var,
    /// Sample-independent refined (or detached) head rows.
    head_part: Option<Var>,
    e_tail: Option<Var>,
    /// Gather order restoring comp-index order from [head, tail] stacking.
    restore: Vec<usize>,
}

impl SawPlan {
    fn prepare(
        tape: &mut Tape,
        f: &FusionVars,
        e_comps: Var,
        partition: &HeadTailPartition,
        mode: SawMode,
    ) -> Result<Self, ModelError> {
        let n = tape.shape_of(e_comps)?[0];
        let mut restore = vec![0usize; n];
        for (pos, &slot) in partition.head.iter().chain(partition.tail.iter()).enumerate() {
            restore[slot] = pos;
        }
        let e_head = if partition.head.is_empty() {
            None
        } else {
            Some(tape.gather_rows(e_comps, &partition.head)?)
        };
        let e_tail = if partition.tail.is_empty() {
            None
        } else {
            Some(tape.gather_rows(e_comps, &partition.tail)?)
        };
        let head_part = match (mode, e_head) {
            (SawMode::Off, _) | (SawMode::UpdateBoth, _) | (_, None) => None,
            (SawMode::TailOnly, Some(eh)) => Some(fusion_mlp(tape, f, eh)?),
            (SawMode::FreezeHead, Some(eh)) => {
                let shape = tape.shape_of(eh)?.to_vec();
                let data = tape.value(eh)?.to_vec();
                Some(tape.constant(shape, data)?)
            }
        };
        Ok(SawPlan { mode, e_comps, head_part, e_tail, restore })
    }

    fn apply(&self, tape: &mut Tape, f: &FusionVars, patches: Var) -> Result<Var, ModelError> {
        match self.mode {
            SawMode::Off => Ok(self.e_comps),
            SawMode::UpdateBoth => {
                let refined = cross_attend(tape, f, self.e_comps, patches)?;
                Ok(fusion_mlp(tape, f, refined)?)
            }
            SawMode::TailOnly | SawMode::FreezeHead => {
                let tail_part = match self.e_tail {
                    Some(et) => {
                        let refined = cross_attend(tape, f, et, patches)?;
                        Some(fusion_mlp(tape, f, refined)?)
                    }
                    None => None,
                };
                let parts: Vec<Var> =
                    self.head_part.iter().chain(tail_part.iter()).copied().collect();
                if parts.is_empty() {
                    return Err(ModelError::PartitionMismatch {
                        detail: "partition covers no compositions".into(),
                    });
                }
                let stacked =
                    if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
                Ok(tape.gather_rows(stacked, &self.restore)?)
            }
        }
    }
}

fn check_partition(partition: &HeadTailPartition, n_comps: usize) -> Result<(), ModelError> {
    let mut hit = vec![false; n_comps];
    for &slot in partition.head.iter().chain(partition.tail.iter()) {
        if slot >= n_comps {
            return Err(ModelError::PartitionMismatch {
                detail: format!("slot {slot} outside {n_comps} known compositions"),
            });
        }
        if hit[slot] {
            return Err(ModelError::PartitionMismatch {
                detail: format!("slot {slot} listed twice"),
            });
        }
        hit[slot] = true;
    }
    if partition.len() != n_comps {
        return Err(ModelError::PartitionMismatch {
            detail: format!(
                "partition covers {} of {n_comps} known compositions",
                partition.len()
            ),
        });
    }
    Ok(())
}

fn ensure_rows_nonzero(tape: &Tape, v: Var, what: &'static str) -> Result<(), ModelError> {
    let shape = tape.shape_of(v)?;
    let data = tape.value(v)?;
    let cols = *shape.last().ok_or(ModelError::ZeroVector { what })?;
    if cols == 0 || data.is_empty() {
        return Err(ModelError::ZeroVector { what });
    }
    for (r, row) in data.chunks(cols).enumerate() {
        if row.iter().all(|&x| x == 0.0) {
            let _ = r;
            return Err(ModelError::ZeroVector { what });
        }
    }
    Ok(())
}

/// Temperature-scaled cosine logits of one embedding against candidate rows:
/// `z[i] = exp(beta) * cos(v, e[i])`. Zero vectors are rejected.
pub fn cosine_logits(
    tape: &mut Tape,
    v: Var,
    e: Var,
    exp_beta: Var,
    what: &'static str,
) -> Result<Var, ModelError> {
    ensure_rows_nonzero(tape, v, what)?;
    ensure_rows_nonzero(tape, e, what)?;
    let en = tape.normalize_rows(e)?;
    let vn = tape.normalize_rows(v)?;
    let cos = tape.matvec(en, vn)?;
    Ok(tape.scale_by(cos, exp_beta)?)
}

/// Encodes every known concept prompt through the frozen text encoder.
/// Shared by the whole batch: one call per step.
pub fn encode_bank(
    tape: &mut Tape,
    mv: &ModelVars,
    bank: &PromptBank,
    latents: &WorldLatents,
) -> Result<(Var, Var, Var), ModelError> {
    let enc = latents.encoder_vars(tape);
    let mut attr_rows = Vec::with_capacity(bank.n_attrs());
    for slot in 0..bank.n_attrs() {
        let seq = assemble_primitive(tape, mv.bank.prefix_a, mv.bank.attr_rows, slot)?;
        attr_rows.push(frozen_text_encode(tape, &enc, seq)?);
    }
    let mut obj_rows = Vec::with_capacity(bank.n_objs());
    for slot in 0..bank.n_objs() {
        let seq = assemble_primitive(tape, mv.bank.prefix_o, mv.bank.obj_rows, slot)?;
        obj_rows.push(frozen_text_encode(tape, &enc, seq)?);
    }
    let mut comp_rows = Vec::with_capacity(bank.comp_index().len());
    for &(a, o) in bank.comp_index() {
        let sa = bank
            .attr_slot(a)
            .ok_or(PromptError::UnknownPrimitive { kind: "attribute", id: a })?;
        let so = bank
            .obj_slot(o)
            .ok_or(PromptError::UnknownPrimitive { kind: "object", id: o })?;
        let seq = assemble_comp(tape, mv.bank.prefix_c, mv.bank.attr_rows, mv.bank.obj_rows, sa, so)?;
        comp_rows.push(frozen_text_encode(tape, &enc, seq)?);
    }
    Ok((
        tape.concat_rows(&attr_rows)?,
        tape.concat_rows(&obj_rows)?,
        tape.concat_rows(&comp_rows)?,
    ))
}

/// One decomposition branch over the stacked batch patches, pooled back to
/// one row per sample. Returns the batch statistics when they were used.
#[allow(clippy::too_many_arguments)]
fn decompose_branch(
    tape: &mut Tape,
    hv: &HeadVars,
    head: &BranchHead,
    eps: f64,
    dropout: f64,
    patches_all: Var,
    b: usize,
    l: usize,
    mode: Mode,
    drop_seed: u64,
) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>), ModelError> {
    let h = tape.affine(patches_all, hv.w, hv.b)?;
    let (h, stats) = match mode {
        Mode::Train if b * l >= 2 => {
            let (y, mean, var) = tape.batchnorm_train(h, hv.scale, hv.shift, eps)?;
            (y, Some((mean, var)))
        }
        // A single row has no batch variance; fall back to running stats.
        _ => (
            tape.batchnorm_eval(h, hv.scale, hv.shift, &head.bn_mean, &head.bn_var, eps)?,
            None,
        ),
    };
    let h = tape.relu(h)?;
    let h = match mode {
        Mode::Train => tape.dropout(h, dropout, &mut chacha(drop_seed))?,
        Mode::Eval => h,
    };
    let mut pooled = Vec::with_capacity(b);
    for i in 0..b {
        let idx: Vec<usize> = (i * l..(i + 1) * l).collect();
        let rows = tape.gather_rows(h, &idx)?;
        pooled.push(tape.mean_rows(rows)?);
    }
    Ok((tape.concat_rows(&pooled)?, stats))
}

/// Splits each image into attribute/object factors (dense, batch norm, ReLU,
/// dropout, mean pool) and passes the class token through as the composition
/// factor. Rows are per-sample.
pub fn decompose_batch(
    tape: &mut Tape,
    mv: &ModelVars,
    heads: &DecompositionHeads,
    samples: &[Sample],
    d: usize,
    mode: Mode,
    step_seed: u64,
) -> Result<(Var, Var, Var, Option<BnBatchStatsOpaque>), ModelError> {
    let b = samples.len();
    if b == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let l = samples[0].patches.len() / d;
    for (i, s) in samples.iter().enumerate() {
        if s.cls.len() != d {
            return Err(ModelError::BadSample {
                index: i,
                detail: format!("cls length {} but d={d}", s.cls.len()),
            });
        }
        if l == 0 || s.patches.len() != l * d {
            return Err(ModelError::BadSample {
                index: i,
                detail: format!("patch buffer {} not a nonempty multiple of d={d}", s.patches.len()),
            });
        }
    }
    let mut flat = Vec::with_capacity(b * l * d);
    let mut cls = Vec::with_capacity(b * d);
    for s in samples {
        flat.extend_from_slice(&s.patches);
        cls.extend_from_slice(&s.cls);
    }
    let patches_all = tape.constant(vec![b * l, d], flat)?;
    let v_cls = tape.constant(vec![b, d], cls)?;
    let (v_attr, attr_stats) = decompose_branch(
        tape,
        &mv.attr_head,
        &heads.attr,
        heads.bn_eps,
        heads.dropout,
        patches_all,
        b,
        l,
        mode,
        mix(step_seed, &[TAG_DROP_ATTR]),
    )?;
    let (v_obj, obj_stats) = decompose_branch(
        tape,
        &mv.obj_head,
        &heads.obj,
        heads.bn_eps,
        heads.dropout,
        patches_all,
        b,
        l,
        mode,
        mix(step_seed, &[TAG_DROP_OBJ]),
    )?;
    let stats = match (attr_stats, obj_stats) {
        (Some((am, av)), Some((om, ov))) => Some(BnBatchStatsOpaque(BnBatchStats {
            attr_mean: am,
            attr_var: av,
            obj_mean: om,
            obj_var: ov,
        })),
        _ => None,
    };
    Ok((v_attr, v_obj, v_cls, stats))
}

/// Batch statistics carried from a training decomposition back to the model.
pub struct BnBatchStatsOpaque(BnBatchStats);

/// The full forward pass against externally supplied parameter handles.
/// Gradient checks and the training loop share this exact code path.
#[allow(clippy::too_many_arguments)]
pub fn forward_with_vars(
    tape: &mut Tape,
    mv: &ModelVars,
    bank: &PromptBank,
    heads: &DecompositionHeads,
    tau: f64,
    saw_mode: SawMode,
    latents: &WorldLatents,
    samples: &[Sample],
    partition: &HeadTailPartition,
    mode: Mode,
    step_seed: u64,
) -> Result<(BatchForward, Option<BnBatchStatsOpaque>), ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if bank.n_attrs() == 0 {
        return Err(ModelError::EmptyBank { what: "attribute rows" });
    }
    if bank.n_objs() == 0 {
        return Err(ModelError::EmptyBank { what: "object rows" });
    }
    if bank.comp_index().is_empty() {
        return Err(ModelError::EmptyBank { what: "compositions" });
    }
    check_partition(partition, bank.comp_index().len())?;

    let d = bank.d();
    let (e_attrs, e_objs, e_comps) = encode_bank(tape, mv, bank, latents)?;
    let exp_beta = tape.exp(mv.beta)?;
    let (v_attr, v_obj, v_cls, stats) =
        decompose_batch(tape, mv, heads, samples, d, mode, step_seed)?;
    let saw_plan = SawPlan::prepare(tape, &mv.saw, e_comps, partition, saw_mode)?;

    let b = samples.len();
    let l = samples[0].patches.len() / d;
    let mut per_sample = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        let patches = tape.constant(vec![l, d], s.patches.clone())?;
        let (k, v) = project_kv(tape, &mv.sag, patches)?;
        let ra = attend(tape, &mv.sag, e_attrs, k, v)?;
        let ea = fusion_mlp(tape, &mv.sag, ra)?;
        let ro = attend(tape, &mv.sag, e_objs, k, v)?;
        let eo = fusion_mlp(tape, &mv.sag, ro)?;
        let ec = saw_plan.apply(tape, &mv.saw, patches)?;

        let va = tape.row(v_attr, i)?;
        let vo = tape.row(v_obj, i)?;
        let vc = tape.row(v_cls, i)?;
        let z_a = cosine_logits(tape, va, ea, exp_beta, "attribute logits")?;
        let z_o = cosine_logits(tape, vo, eo, exp_beta, "object logits")?;
        let z_c = cosine_logits(tape, vc, ec, exp_beta, "composition logits")?;
        let p_a = tape.softmax_t(z_a, tau)?;
        let p_o = tape.softmax_t(z_o, tau)?;
        let p_c = tape.softmax_t(z_c, tau)?;
        per_sample.push(SampleLogits { z_a, z_o, z_c, p_a, p_o, p_c });
    }
    Ok((
        BatchForward { per_sample, v_attr, v_obj, v_cls, e_attrs, e_objs, e_comps },
        stats,
    ))
}

impl DecompositionHeads {
    /// Folds training batch statistics into the running estimates.
    pub fn absorb_opaque(&mut self, stats: &BnBatchStatsOpaque) {
        self.absorb(&stats.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use crate::prompts::init_bank;
    use crate::rng::chacha;
    use crate::world::{build_space, render_sample, spawn_world, split_constrained, SessionSpec};

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    struct Fix {
        sessions: Vec<SessionSpec>,
        latents: WorldLatents,
        model: Model,
        partition: HeadTailPartition,
    }

    fn fixture(d: usize, l: usize, saw_mode: SawMode, dropout: f64) -> Fix {
        let space = build_space(names("a", 4), names("o", 3), None).unwrap();
        let sessions = split_constrained(&space, 2, 3, 0.5).unwrap();
        let latents = spawn_world(&space, d, l, 0.05, 77).unwrap();
        let mut bank = init_bank(&space, &sessions[0], d, 2, 5).unwrap();
        let p0 = bank.expand(&space, &sessions[1]).unwrap();
        let model = Model::new(bank, 1.0, dropout, saw_mode, 13).unwrap();
        Fix { sessions, latents, model, partition: p0 }
    }

    fn batch(fix: &Fix, n: u64) -> Vec<Sample> {
        let comp = fix.sessions[0].seen[0];
        (0..n).map(|k| render_sample(&fix.latents, comp, k).unwrap()).collect()
    }

    #[test]
    fn read_and_write_visitors_agree_on_names_and_data() {
        let mut fix = fixture(6, 2, SawMode::TailOnly, 0.0);
        let mut ro: Vec<(&'static str, Vec<f64>)> = Vec::new();
        fix.model.visit_params(|name, t| ro.push((name, t.data().to_vec())));
        let mut rw: Vec<(&'static str, Vec<f64>)> = Vec::new();
        fix.model.visit_params_mut(|name, t| rw.push((name, t.data().to_vec())));
        assert_eq!(ro, rw, "checkpoint keying depends on identical walks");
        assert_eq!(ro.len(), 28);
    }

    #[test]
    fn single_patch_attention_returns_its_value_projection() {
        let d = 6;
        let f = FusionParams::new(d, 3).unwrap();
        let mut tape = Tape::new();
        let fv = {
            let mut m = Model::new(
                init_bank(
                    &build_space(names("a", 1), names("o", 1), None).unwrap(),
                    &SessionSpec {
                        index: 0,
                        attrs: vec![0],
                        objs: vec![0],
                        seen: vec![(0, 0)],
                        unseen: vec![],
                        val: vec![],
                    },
                    d,
                    1,
                    1,
                )
                .unwrap(),
                1.0,
                0.0,
                SawMode::TailOnly,
                4,
            )
            .unwrap();
            m.sag = f.clone();
            m.vars(&mut tape).sag
        };
        let queries = tape
            .constant(vec![2, d], normal_vec(&mut chacha(8), 2 * d))
            .unwrap();
        let patch = tape.constant(vec![1, d], normal_vec(&mut chacha(9), d)).unwrap();
        let out = cross_attend(&mut tape, &fv, queries, patch).unwrap();
        let expect = tape.matmul(patch, fv.w_v).unwrap();
        let (got, want) = (tape.value(out).unwrap(), tape.value(expect).unwrap());
        for q in 0..2 {
            for j in 0..d {
                assert!((got[q * d + j] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_patches_collapse_to_common_value_projection() {
        let d = 5;
        let fix = fixture(d, 1, SawMode::TailOnly, 0.0);
        let mut tape = Tape::new();
        let fv = fix.model.vars(&mut tape).sag;
        let one = normal_vec(&mut chacha(2), d);
        let mut three = one.clone();
        three.extend_from_slice(&one);
        three.extend_from_slice(&one);
        let patches = tape.constant(vec![3, d], three).unwrap();
        let single = tape.constant(vec![1, d], one).unwrap();
        let queries = tape.constant(vec![2, d], normal_vec(&mut chacha(4), 2 * d)).unwrap();
        let out = cross_attend(&mut tape, &fv, queries, patches).unwrap();
        let want = tape.matmul(single, fv.w_v).unwrap();
        let (got, want) = (tape.value(out).unwrap(), tape.value(want).unwrap());
        for q in 0..2 {
            for j in 0..d {
                assert!((got[q * d + j] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_hand_rolled_oracle() {
        let d = 4;
        let (nq, np) = (2usize, 3usize);
        let mut rng = chacha(31);
        let q_in = normal_vec(&mut rng, nq * d);
        let p_in = normal_vec(&mut rng, np * d);
        let wq = normal_vec(&mut rng, d * d);
        let wk = normal_vec(&mut rng, d * d);
        let wv = normal_vec(&mut rng, d * d);

        // Oracle: plain loops, direct softmax.
        let matp = |x: &[f64], w: &[f64], rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * d];
            for i in 0..rows {
                for j in 0..d {
                    for k in 0..d {
                        out[i * d + j] += x[i * d + k] * w[k * d + j];
                    }
                }
            }
            out
        };
        let q = matp(&q_in, &wq, nq);
        let k = matp(&p_in, &wk, np);
        let v = matp(&p_in, &wv, np);
        let mut want = vec![0.0; nq * d];
        for i in 0..nq {
            let mut scores = vec![0.0; np];
            for (jp, s) in scores.iter_mut().enumerate() {
                for t in 0..d {
                    *s += q[i * d + t] * k[jp * d + t];
                }
                *s /= (d as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for jp in 0..np {
                let w = exps[jp] / z;
                for t in 0..d {
                    want[i * d + t] += w * v[jp * d + t];
                }
            }
        }

        let mut tape = Tape::new();
        let fv = FusionVars {
            w_q: tape.constant(vec![d, d], wq).unwrap(),
            w_k: tape.constant(vec![d, d], wk).unwrap(),
            w_v: tape.constant(vec![d, d], wv).unwrap(),
            mlp_w1: tape.constant(vec![d, d], vec![0.0; d * d]).unwrap(),
            mlp_b1: tape.constant(vec![d], vec![0.0; d]).unwrap(),
            mlp_w2: tape.constant(vec![d, d], vec![0.0; d * d]).unwrap(),
            mlp_b2: tape.constant(vec![d], vec![0.0; d]).unwrap(),
        };
        let queries = tape.constant(vec![nq, d], q_in).unwrap();
        let patches = tape.constant(vec![np, d], p_in).unwrap();
        let out = cross_attend(&mut tape, &fv, queries, patches).unwrap();
        let got = tape.value(out).unwrap();
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-10, "got {g}, want {w}");
        }
    }

    #[test]
    fn decompose_identity_path_is_mean_relu_pool() {
        let d = 4;
        let l = 3;
        let mut fix = fixture(d, l, SawMode::TailOnly, 0.0);
        // Identity dense, unit loose batch norm, eval mode.
        let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        fix.model.heads.attr.w = Tensor::param(vec![d, d], eye).unwrap();
        fix.model.heads.attr.b = Tensor::param(vec![d], vec![0.0; d]).unwrap();
        fix.model.heads.bn_eps = 0.0;
        let s = batch(&fix, 1).remove(0);
        let mut tape = Tape::new();
        let mv = fix.model.vars(&mut tape);
        let (v_attr, _, v_cls, _) =
            decompose_batch(&mut tape, &mv, &fix.model.heads, &[s.clone()], d, Mode::Eval, 0)
                .unwrap();
        let mut want = vec![0.0; d];
        for t in 0..l {
            for j in 0..d {
                want[j] += s.patches[t * d + j].max(0.0) / l as f64;
            }
        }
        let got = tape.value(v_attr).unwrap();
        for j in 0..d {
            assert!((got[j] - want[j]).abs() < 1e-12);
        }
        // The class token flows through unchanged.
        assert_eq!(tape.value(v_cls).unwrap(), &s.cls[..]);
    }

    #[test]
    fn train_and_eval_modes_differ_under_dropout_and_eval_is_deterministic() {
        let fix = fixture(8, 4, SawMode::TailOnly, 0.4);
        let samples = batch(&fix, 2);
        let mut m1 = fix.model.clone();
        let mut t_train = Tape::new();
        let (_, out_train) = m1
            .forward_train(&mut t_train, &fix.latents, &samples, &fix.partition, 99)
            .unwrap();
        let run_eval = |model: &Model| {
            let mut t = Tape::new();
            let out = model.forward_eval(&mut t, &fix.latents, &samples, &fix.partition).unwrap();
            let z = out.per_sample[0].z_a;
            t.value(z).unwrap().to_vec()
        };
        let e1 = run_eval(&fix.model);
        let e2 = run_eval(&fix.model);
        assert_eq!(e1, e2, "eval must be bitwise deterministic");
        // The primitive branches see dropout and batch statistics; the class
        // token path does not.
        let z_train = t_train.value(out_train.per_sample[0].z_a).unwrap().to_vec();
        assert_ne!(z_train, e1, "dropout and batch statistics must alter training logits");
    }

    #[test]
    fn zero_mlp_weights_reduce_fusion_to_bias_rows() {
        let d = 6;
        let mut fix = fixture(d, 2, SawMode::TailOnly, 0.0);
        fix.model.sag.mlp_w2 = Tensor::param(vec![d, d], vec![0.0; d * d]).unwrap();
        fix.model.sag.mlp_b2 = Tensor::param(vec![d], (0..d).map(|i| i as f64 + 0.5).collect()).unwrap();
        let s = batch(&fix, 1).remove(0);
        let mut tape = Tape::new();
        let mv = fix.model.vars(&mut tape);
        let e_attrs = tape.constant(vec![3, d], normal_vec(&mut chacha(6), 3 * d)).unwrap();
        let e_objs = tape.constant(vec![2, d], normal_vec(&mut chacha(7), 2 * d)).unwrap();
        let patches = tape.constant(vec![2, d], s.patches[..2 * d].to_vec()).unwrap();
        let (ra, ro) = sagm2f(&mut tape, &mv.sag, e_attrs, e_objs, patches).unwrap();
        for out in [ra, ro] {
            let rows = tape.value(out).unwrap();
            for row in rows.chunks(d) {
                for (j, x) in row.iter().enumerate() {
                    assert!((x - (j as f64 + 0.5)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fusion_preserves_row_counts() {
        let d = 5;
        let fix = fixture(d, 3, SawMode::TailOnly, 0.0);
        let s = batch(&fix, 1).remove(0);
        for rows in [1usize, 7] {
            let mut tape = Tape::new();
            let mv = fix.model.vars(&mut tape);
            let e = tape.constant(vec![rows, d], normal_vec(&mut chacha(rows as u64), rows * d)).unwrap();
            let patches = tape.constant(vec![3, d], s.patches.clone()).unwrap();
            let out = cross_attend(&mut tape, &mv.sag, e, patches).unwrap();
            let out = fusion_mlp(&mut tape, &mv.sag, out).unwrap();
            assert_eq!(tape.shape_of(out).unwrap(), &[rows, d]);
        }
    }

    #[test]
    fn prompt_rows_reach_refined_embeddings_with_correct_gradients() {
        let d = 8;
        let fix = fixture(d, 2, SawMode::TailOnly, 0.0);
        let s = batch(&fix, 1).remove(0);
        let bank = &fix.model.bank;
        let params = [
            bank.attr_rows().clone(),
            bank.prefixes()[0].clone(),
            fix.model.sag.w_q.clone(),
            fix.model.sag.mlp_w1.clone(),
        ];
        let latents = fix.latents.clone();
        let n_attr = bank.n_attrs();
        let patches_data = s.patches.clone();
        let err = grad_check(&params, 1e-5, move |tape, vars| {
            let enc = latents.encoder_vars(tape);
            let mut rows = Vec::new();
            for slot in 0..n_attr {
                let seq = assemble_primitive(tape, vars[1], vars[0], slot)?;
                rows.push(frozen_text_encode(tape, &enc, seq)?);
            }
            let e_attrs = tape.concat_rows(&rows)?;
            let patches = tape.constant(vec![2, d], patches_data.clone())?;
            let fv = FusionVars {
                w_q: vars[2],
                w_k: tape.constant(vec![d, d], vec![0.1; d * d])?,
                w_v: tape.constant(vec![d, d], vec![0.2; d * d])?,
                mlp_w1: vars[3],
                mlp_b1: tape.constant(vec![d], vec![0.05; d])?,
                mlp_w2: tape.constant(vec![d, d], vec![0.3; d * d])?,
                mlp_b2: tape.constant(vec![d], vec![0.0; d])?,
            };
            let refined = cross_attend(tape, &fv, e_attrs, patches)?;
            let refined = fusion_mlp(tape, &fv, refined)?;
            tape.sum_all(refined)
        })
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn empty_head_routes_every_row_through_attention() {
        let d = 6;
        let fix = fixture(d, 2, SawMode::TailOnly, 0.0);
        let s = batch(&fix, 1).remove(0);
        let n = 4usize;
        let mut tape = Tape::new();
        let mv = fix.model.vars(&mut tape);
        let e = tape.constant(vec![n, d], normal_vec(&mut chacha(3), n * d)).unwrap();
        let patches = tape.constant(vec![2, d], s.patches.clone()).unwrap();
        let all_tail = HeadTailPartition { head: vec![], tail: (0..n).collect() };
        let got = sawm2f(&mut tape, &mv.saw, e, &all_tail, patches, SawMode::TailOnly).unwrap();
        let want = sawm2f(&mut tape, &mv.saw, e, &all_tail, patches, SawMode::UpdateBoth).unwrap();
        assert_eq!(tape.value(got).unwrap(), tape.value(want).unwrap());
    }

    #[test]
    fn empty_tail_is_a_pure_mlp_pass() {
        let d = 6;
        let fix = fixture(d, 2, SawMode::TailOnly, 0.0);
        let s = batch(&fix, 1).remove(0);
        let n = 3usize;
        let mut tape = Tape::new();
        let mv = fix.model.vars(&mut tape);
        let e = tape.constant(vec![n, d], normal_vec(&mut chacha(5), n * d)).unwrap();
        let patches = tape.constant(vec![2, d], s.patches.clone()).unwrap();
        let all_head = HeadTailPartition { head: (0..n).collect(), tail: vec![] };
        let got = sawm2f(&mut tape, &mv.saw, e, &all_head, patches, SawMode::TailOnly).unwrap();
        let want = fusion_mlp(&mut tape, &mv.saw, e).unwrap();
        assert_eq!(tape.value(got).unwrap(), tape.value(want).unwrap());
    }

    #[test]
    fn head_rows_ignore_the_image_and_tail_rows_track_it() {
        let d = 8;
        let fix = fixture(d, 3, SawMode::TailOnly, 0.0);
        let comp = fix.sessions[0].seen[0];
        let s1 = render_sample(&fix.latents, comp, 1).unwrap();
        let s2 = render_sample(&fix.latents, comp, 2).unwrap();
        let n = 5usize;
        let part = HeadTailPartition { head: vec![0, 1], tail: vec![2, 3, 4] };
        let mut tape = Tape::new();
        let mv = fix.model.vars(&mut tape);
        let e = tape.constant(vec![n, d], normal_vec(&mut chacha(10), n * d)).unwrap();
        let p1 = tape.constant(vec![3, d], s1.patches.clone()).unwrap();
        let p2 = tape.constant(vec![3, d], s2.patches.clone()).unwrap();
        let o1 = sawm2f(&mut tape, &mv.saw, e, &part, p1, SawMode::TailOnly).unwrap();
        let o2 = sawm2f(&mut tape, &mv.saw, e, &part, p2, SawMode::TailOnly).unwrap();
        let (r1, r2) = (tape.value(o1).unwrap(), tape.value(o2).unwrap());
        for slot in 0..2 {
            assert_eq!(&r1[slot * d..(slot + 1) * d], &r2[slot * d..(slot + 1) * d]);
        }
        for slot in 2..5 {
            assert_ne!(&r1[slot * d..(slot + 1) * d], &r2[slot * d..(slot + 1) * d]);
        }
    }

    #[test]
    fn logit_identities() {
        let d = 4;
        let mut tape = Tape::new();
        let v_data = vec![0.5, -1.0, 2.0, 0.25];
        let norm = v_data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let e0: Vec<f64> = v_data.iter().map(|x| x / norm).collect();
        let mut e_data = e0.clone();
        e_data.extend(normal_vec(&mut chacha(3), d));
        let v = tape.constant_vec(&v_data).unwrap();
        let e = tape.constant(vec![2, d], e_data).unwrap();
        let beta0 = tape.constant_scalar(0.0).unwrap();
        let exp_b0 = tape.exp(beta0).unwrap();
        let z0 = cosine_logits(&mut tape, v, e, exp_b0, "test").unwrap();
        let z0v = tape.value(z0).unwrap().to_vec();
        assert!((z0v[0] - 1.0).abs() < 1e-12, "aligned candidate scores 1");

        let beta_ln100 = tape.constant_scalar(100f64.ln()).unwrap();
        let exp_b = tape.exp(beta_ln100).unwrap();
        let z1 = cosine_logits(&mut tape, v, e, exp_b, "test").unwrap();
        let z1v = tape.value(z1).unwrap();
        for (a, b) in z0v.iter().zip(z1v.iter()) {
            assert!((b - 100.0 * a).abs() < 1e-9, "logit scale law");
        }
        let argmax = |z: &[f64]| {
            z.iter().enumerate().fold((0usize, f64::NEG_INFINITY), |best, (i, &x)| {
                if x > best.1 { (i, x) } else { best }
            }).0
        };
        assert_eq!(argmax(&z0v), argmax(z1v));
    }

    #[test]
    fn zero_vectors_are_rejected_in_logits() {
        let d = 3;
        let mut tape = Tape::new();
        let v = tape.constant_vec(&[0.0, 0.0, 0.0]).unwrap();
        let e = tape.constant(vec![1, d], vec![1.0, 0.0, 0.0]).unwrap();
        let b = tape.constant_scalar(0.0).unwrap();
        let eb = tape.exp(b).unwrap();
        let err = cosine_logits(&mut tape, v, e, eb, "test").unwrap_err();
        assert!(matches!(err, ModelError::ZeroVector { .. }));
    }

    #[test]
    fn branch_probabilities_sum_to_one() {
        let fix = fixture(8, 4, SawMode::TailOnly, 0.0);
        let samples = batch(&fix, 3);
        let mut tape = Tape::new();
        let out = fix
            .model
            .forward_eval(&mut tape, &fix.latents, &samples, &fix.partition)
            .unwrap();
        for sl in &out.per_sample {
            for p in [sl.p_a, sl.p_o, sl.p_c] {
                let total: f64 = tape.value(p).unwrap().iter().sum();
                assert!((total - 1.0).abs() < 1e-10, "probabilities sum to {total}");
            }
        }
        assert_eq!(
            tape.value(out.per_sample[0].p_c).unwrap().len(),
            fix.model.bank.comp_index().len()
        );
    }

    #[test]
    fn eval_forward_records_no_backward_nodes() {
        let fix = fixture(8, 4, SawMode::TailOnly, 0.0);
        let samples = batch(&fix, 2);
        let mut tape = Tape::new();
        fix.model
            .forward_eval(&mut tape, &fix.latents, &samples, &fix.partition)
            .unwrap();
        assert_eq!(tape.node_count(), 0, "frozen pass must not record nodes");
    }

    #[test]
    fn partition_mismatch_is_an_error() {
        let fix = fixture(8, 2, SawMode::TailOnly, 0.0);
        let samples = batch(&fix, 1);
        let mut short = fix.partition.clone();
        short.tail.pop();
        let mut tape = Tape::new();
        let err = fix
            .model
            .forward_eval(&mut tape, &fix.latents, &samples, &short)
            .unwrap_err();
        assert!(matches!(err, ModelError::PartitionMismatch { .. }));
    }

    #[test]
    fn freeze_head_detaches_head_rows() {
        let d = 6;
        let fix = fixture(d, 2, SawMode::FreezeHead, 0.0);
        let s = batch(&fix, 1).remove(0);
        let n = 4usize;
        let part = HeadTailPartition { head: vec![0, 1], tail: vec![2, 3] };

        let mut tape = Tape::new();
        let mv = fix.model.vars(&mut tape);
        let e_rows = Tensor::param(vec![n, d], normal_vec(&mut chacha(12), n * d)).unwrap();
        let e = tape.leaf(&e_rows);
        let patches = tape.constant(vec![2, d], s.patches.clone()).unwrap();
        let out = sawm2f(&mut tape, &mv.saw, e, &part, patches, SawMode::FreezeHead).unwrap();
        // Head rows pass through by value.
        let (ov, ev) = (tape.value(out).unwrap(), e_rows.data());
        assert_eq!(&ov[..2 * d], &ev[..2 * d]);
        // And receive no gradient.
        let root = tape.sum_all(out).unwrap();
        let grads = tape.backward(root).unwrap();
        let g = grads.of(e).unwrap();
        assert!(g[..2 * d].iter().all(|&x| x == 0.0), "head rows must be gradient-free");
        assert!(g[2 * d..].iter().any(|&x| x != 0.0), "tail rows keep gradients");
    }
}
