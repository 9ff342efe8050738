//! Session orchestration: student initialization from the previous teacher,
//! bank expansion, the optimization loop, teacher freezing, checkpointing,
//! and the multi-session protocol driver.
//!
//! A run proceeds session by session. Session 0 trains a fresh model with
//! the cross-entropy objective alone. Every later session starts from a
//! copy of the newest frozen teacher, grows the prompt bank by the
//! session's new primitives and compositions, and minimizes the full
//! objective: cross entropy plus distillation against all frozen teachers,
//! cosine anchoring of recurring rows, orthogonality between old and new
//! rows, and intra-session diversity. After the fixed epoch budget the
//! student is frozen and joins the teacher registry.
//!
//! Teachers never change after freezing; their parameter hashes are
//! recorded and re-checked on every use. Teacher logits over a session's
//! training set are computed once per session and reused across epochs,
//! which is exact because both the teachers and the rendered training set
//! are fixed.
//!
//! Determinism: all randomness (rendering, shuffling, dropout) derives
//! from the run seed through tagged mixing, and every reduction has a
//! fixed order. Two runs with the same config produce bitwise identical
//! reports, checkpoints, and manifests.

use std::error::Error;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::{
    self, czs_accumulate, EvalError, EvalScope, ForgettingMatrix, InferenceWeights,
    MetricsReport, OriginUniverse, PredictionRecord,
};
use crate::losses::{
    cal_total, ce_total, cskd_total, idl, opl, recency_weights, total, LossComponents,
    LossError, LossWeights, PrimitiveSplit, TeacherSampleLogits, TeacherSnapshot,
    TeacherTargets,
};
use crate::model::{Model, ModelError, ModelVars, SawMode};
use crate::numcore::{NumError, Tape, Tensor, Var};
use crate::prompts::{HeadTailPartition, PromptBank, PromptError};
use crate::rng::{chacha, fnv64, mix};
use crate::world::{
    render_sample, spawn_world, validate_splits, CompositionSpace, Sample, SessionSpec,
    WorldError, WorldLatents,
};
use rand::seq::SliceRandom;

const TAG_TRAIN: u64 = 0x5452_4149;
const TAG_EVAL: u64 = 0x4556_414c;
const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_STEP: u64 = 0x5354_4550;
const TAG_BANK: u64 = 0x4241_4e4b;
const TAG_MODEL: u64 = 0x4d4f_444c;

const CKPT_MAGIC: &[u8; 8] = b"CCZSLCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum ContinualError {
    Num(NumError),
    Model(ModelError),
    Loss(LossError),
    Eval(EvalError),
    World(WorldError),
    Prompt(PromptError),
    Io(std::io::Error),
    BadConfig { what: &'static str, detail: String },
    /// A checkpoint file failed an integrity check; nothing was loaded.
    Corrupt { what: String },
    VersionMismatch { found: u32, expected: u32 },
}

impl fmt::Display for ContinualError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContinualError::Num(e) => write!(f, "{e}"),
            ContinualError::Model(e) => write!(f, "{e}"),
            ContinualError::Loss(e) => write!(f, "{e}"),
            ContinualError::Eval(e) => write!(f, "{e}"),
            ContinualError::World(e) => write!(f, "{e}"),
            ContinualError::Prompt(e) => write!(f, "{e}"),
            ContinualError::Io(e) => write!(f, "{e}"),
            ContinualError::BadConfig { what, detail } => write!(f, "config {what}: {detail}"),
            ContinualError::Corrupt { what } => write!(f, "corrupt checkpoint: {what}"),
            ContinualError::VersionMismatch { found, expected } => {
                write!(f, "checkpoint version {found}, this build reads {expected}")
            }
        }
    }
}

impl Error for ContinualError {}

macro_rules! from_err {
    ($src:ty, $variant:ident) => {
        impl From<$src> for ContinualError {
            fn from(e: $src) -> Self {
                ContinualError::$variant(e)
            }
        }
    };
}

from_err!(NumError, Num);
from_err!(ModelError, Model);
from_err!(LossError, Loss);
from_err!(EvalError, Eval);
from_err!(WorldError, World);
from_err!(PromptError, Prompt);
from_err!(std::io::Error, Io);

/// Optimizer choice. Coefficients live on the variant so a config file
/// spells out exactly what runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Optimizer {
    fn validate(&self) -> Result<(), ContinualError> {
        if let Optimizer::Adam { beta1, beta2, eps } = self {
            for (what, v) in [("beta1", *beta1), ("beta2", *beta2)] {
                if !(0.0..1.0).contains(&v) {
                    return Err(ContinualError::BadConfig {
                        what: "optimizer",
                        detail: format!("{what} must lie in [0, 1), got {v}"),
                    });
                }
            }
            if !(*eps > 0.0 && eps.is_finite()) {
                return Err(ContinualError::BadConfig {
                    what: "optimizer",
                    detail: format!("eps must be positive, got {eps}"),
                });
            }
        }
        Ok(())
    }
}

/// Full training configuration for a run. Serializes with defaults so a
/// config file only spells out deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub loss: LossWeights,
    /// Rendered training samples per seen composition per session.
    pub train_samples_per_comp: usize,
    /// Rendered test samples per composition per session's eval slice.
    pub eval_samples_per_comp: usize,
    pub d: usize,
    pub patches: usize,
    pub prefix_len: usize,
    pub sigma: f64,
    pub tau: f64,
    pub dropout: f64,
    pub saw_mode: SawMode,
    /// Cap on how many most-recent teachers distill; None keeps all.
    pub max_teachers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            batch: 32,
            seed: 7,
            optimizer: Optimizer::default(),
            loss: LossWeights::default(),
            train_samples_per_comp: 50,
            eval_samples_per_comp: 6,
            d: 64,
            patches: 8,
            prefix_len: 4,
            sigma: 0.1,
            tau: 1.0,
            dropout: 0.0,
            saw_mode: SawMode::TailOnly,
            max_teachers: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ContinualError> {
        let bad = |what: &'static str, detail: String| {
            Err(ContinualError::BadConfig { what, detail })
        };
        if self.epochs < 1 {
            return bad("epochs", "at least one epoch per session".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch < 1 {
            return bad("batch", "batch size must be at least 1".into());
        }
        if self.train_samples_per_comp < 1 || self.eval_samples_per_comp < 1 {
            return bad("samples", "need at least one sample per composition".into());
        }
        if self.d < 1 || self.patches < 1 || self.prefix_len < 1 {
            return bad("dims", "d, patches, and prefix_len must be at least 1".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma", format!("render noise must be nonnegative, got {}", self.sigma));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", format!("temperature must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("rate must lie in [0, 1), got {}", self.dropout));
        }
        if self.max_teachers == Some(0) {
            return bad("max_teachers", "cap of zero would disable distillation; use weights".into());
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Renders the training set for one session: `train_samples_per_comp`
/// samples for each seen composition, composition-major order, seeds
/// derived from the run seed and tagged distinctly from evaluation.
pub fn render_train_set(
    latents: &WorldLatents,
    session: &SessionSpec,
    config: &TrainConfig,
) -> Result<Vec<Sample>, ContinualError> {
    let mut out = Vec::with_capacity(session.seen.len() * config.train_samples_per_comp);
    for &(a, o) in &session.seen {
        for k in 0..config.train_samples_per_comp {
            let seed = mix(
                config.seed,
                &[TAG_TRAIN, session.index as u64, a as u64, o as u64, k as u64],
            );
            out.push(render_sample(latents, (a, o), seed)?);
        }
    }
    Ok(out)
}

/// One session's evaluation slice: rendered test samples for its seen and
/// unseen compositions with stable ids. Slice i is identical no matter
/// which later model evaluates it.
#[derive(Debug, Clone)]
pub struct EvalSlice {
    pub origin: usize,
    pub ids: Vec<u64>,
    pub samples: Vec<Sample>,
}

pub fn render_eval_slice(
    latents: &WorldLatents,
    session: &SessionSpec,
    config: &TrainConfig,
) -> Result<EvalSlice, ContinualError> {
    let comps: Vec<(usize, usize)> =
        session.seen.iter().chain(&session.unseen).copied().collect();
    let mut ids = Vec::new();
    let mut samples = Vec::new();
    for &(a, o) in &comps {
        for k in 0..config.eval_samples_per_comp {
            let seed = mix(
                config.seed,
                &[TAG_EVAL, session.index as u64, a as u64, o as u64, k as u64],
            );
            ids.push(((session.index as u64) << 32) | samples.len() as u64);
            samples.push(render_sample(latents, (a, o), seed)?);
        }
    }
    Ok(EvalSlice { origin: session.index, ids, samples })
}

/// Tape handles of every learnable tensor in the same order as
/// `Model::visit_params_mut`; keeps optimizer bookkeeping positional.
fn flat_vars(mv: &ModelVars) -> Vec<Var> {
    let mut v = vec![
        mv.bank.attr_rows,
        mv.bank.obj_rows,
        mv.bank.prefix_a,
        mv.bank.prefix_o,
        mv.bank.prefix_c,
    ];
    for h in [&mv.attr_head, &mv.obj_head] {
        v.extend([h.w, h.b, h.scale, h.shift]);
    }
    for f in [&mv.sag, &mv.saw] {
        v.extend([f.w_q, f.w_k, f.w_v, f.mlp_w1, f.mlp_b1, f.mlp_w2, f.mlp_b2]);
    }
    v.push(mv.beta);
    v
}

/// Per-parameter first and second moment buffers; fresh each session since
/// the parameter set grows when the bank expands.
struct OptState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptState {
    fn new() -> Self {
        OptState { step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update from positional gradients (None means the root
    /// did not depend on that parameter).
    fn apply(
        &mut self,
        model: &mut Model,
        grads: &[Option<Vec<f64>>],
        lr: f64,
        opt: Optimizer,
    ) -> Result<(), ContinualError> {
        self.step += 1;
        let mut failure: Option<ContinualError> = None;
        let mut k = 0usize;
        let step = self.step;
        let (moments_m, moments_v) = (&mut self.m, &mut self.v);
        model.visit_params_mut(|name, tensor| {
            if failure.is_some() {
                return;
            }
            let idx = k;
            k += 1;
            let n = tensor.data().len();
            if moments_m.len() <= idx {
                moments_m.push(vec![0.0; n]);
                moments_v.push(vec![0.0; n]);
            }
            let g = match grads.get(idx) {
                Some(Some(g)) => g,
                Some(None) => return,
                None => {
                    failure = Some(ContinualError::BadConfig {
                        what: "optimizer",
                        detail: format!("no gradient slot for parameter {name}"),
                    });
                    return;
                }
            };
            if g.len() != n {
                failure = Some(ContinualError::BadConfig {
                    what: "optimizer",
                    detail: format!("gradient shape mismatch on {name}"),
                });
                return;
            }
            let mut next = tensor.data().to_vec();
            match opt {
                Optimizer::Sgd => {
                    for (p, &gi) in next.iter_mut().zip(g) {
                        *p -= lr * gi;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut moments_m[idx], &mut moments_v[idx]);
                    let bc1 = 1.0 - beta1.powi(step as i32);
                    let bc2 = 1.0 - beta2.powi(step as i32);
                    for i in 0..n {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        next[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            if let Err(e) = tensor.set_data(&next) {
                failure = Some(ContinualError::Num(e));
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// FNV-1a over every parameter's name, shape, and exact bit pattern plus
/// the batch-norm running statistics and the composition index. Teacher
/// immutability is checked against this.
pub fn model_param_hash(model: &Model) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    model.visit_params(|name, t| {
        eat(name.as_bytes());
        for &d in t.shape() {
            eat(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            eat(&x.to_bits().to_le_bytes());
        }
    });
    for v in [
        &model.heads.attr.bn_mean,
        &model.heads.attr.bn_var,
        &model.heads.obj.bn_mean,
        &model.heads.obj.bn_var,
    ] {
        for &x in v.iter() {
            eat(&x.to_bits().to_le_bytes());
        }
    }
    for &(a, o) in model.bank.comp_index() {
        eat(&(a as u64).to_le_bytes());
        eat(&(o as u64).to_le_bytes());
    }
    h
}

/// Per-step total-loss values for one session, in step order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub session: usize,
    pub step_losses: Vec<f64>,
}

/// Trains one session and freezes the result. The student starts as a
/// fresh model at session 0 and as a copy of the newest teacher afterward;
/// the prior state is never touched, so any validation error aborts before
/// mutation. Session 0 minimizes cross entropy alone; later sessions add
/// distillation, anchoring, orthogonality, and diversity terms against the
/// (possibly capped) teacher registry.
pub fn train_session(
    space: &CompositionSpace,
    latents: &WorldLatents,
    teachers: &[TeacherSnapshot],
    session: &SessionSpec,
    train_set: &[Sample],
    config: &TrainConfig,
) -> Result<(TeacherSnapshot, TrainTrace), ContinualError> {
    config.validate()?;
    if session.index != teachers.len() {
        return Err(ContinualError::BadConfig {
            what: "session order",
            detail: format!(
                "session {} arrived with {} teachers; sessions must run in order",
                session.index,
                teachers.len()
            ),
        });
    }
    if train_set.is_empty() {
        return Err(ContinualError::BadConfig {
            what: "train set",
            detail: "no rendered samples".into(),
        });
    }

    // Build the student on a scratch copy; expand validates the session
    // against the bank before mutating anything.
    let (mut model, partition) = if let Some(prev) = teachers.last() {
        // Snapshots freeze their parameters; the student must learn again.
        let mut m = prev.model().clone();
        m.set_trainable(true);
        let p = m.bank.expand(space, session)?;
        (m, p)
    } else {
        let mut bank =
            PromptBank::empty(config.d, config.prefix_len, mix(config.seed, &[TAG_BANK]))?;
        let p = bank.expand(space, session)?;
        let m = Model::new(
            bank,
            config.tau,
            config.dropout,
            config.saw_mode,
            mix(config.seed, &[TAG_MODEL]),
        )?;
        (m, p)
    };

    // Teachers participating in distillation and anchoring: the most
    // recent `max_teachers`, oldest first so recency weights line up.
    let cap = config.max_teachers.unwrap_or(teachers.len());
    let active: Vec<&TeacherSnapshot> =
        teachers.iter().skip(teachers.len().saturating_sub(cap)).collect();
    let w = &config.loss;
    let first_session = session.index == 0;
    let want_kd = !first_session && w.lambda_kd > 0.0 && !active.is_empty();
    let want_cal = !first_session && w.lambda_cal > 0.0 && !active.is_empty();
    let want_opl = !first_session && w.lambda_opl > 0.0;
    let want_idl = !first_session && w.lambda_idl > 0.0;

    // Frozen teachers and a fixed rendered set make teacher logits loop
    // invariants; compute them once per session.
    let mut kd_cache: Vec<Vec<TeacherSampleLogits>> = Vec::new();
    if want_kd {
        for t in &active {
            kd_cache.push(t.eval_logits(latents, train_set)?);
        }
    }
    let pi = if want_kd || want_cal {
        recency_weights(active.len(), w.recency_gamma)?
    } else {
        Vec::new()
    };
    let teacher_banks: Vec<&PromptBank> = active.iter().map(|t| t.bank()).collect();
    let split = PrimitiveSplit::from_session(&model.bank, session)?;
    let labels: Vec<(usize, usize)> = train_set.iter().map(|s| (s.attr, s.obj)).collect();

    let mut opt = OptState::new();
    let mut trace = TrainTrace { session: session.index, step_losses: Vec::new() };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = chacha(mix(config.seed, &[TAG_SHUFFLE, session.index as u64, epoch as u64]));
        order.shuffle(&mut rng);
        for (step_idx, chunk) in order.chunks(config.batch).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let batch_labels: Vec<(usize, usize)> =
                chunk.iter().map(|&i| labels[i]).collect();
            let step_seed = mix(
                config.seed,
                &[TAG_STEP, session.index as u64, epoch as u64, step_idx as u64],
            );
            let mut tape = Tape::new();
            let (mv, out) = model.forward_train(&mut tape, latents, &batch, &partition, step_seed)?;

            let zero = |tape: &mut Tape| tape.constant(vec![], vec![0.0]);
            let ce = ce_total(&mut tape, &out.per_sample, &batch_labels, &model.bank, w)?;
            let cskd = if want_kd {
                let gathered: Vec<Vec<TeacherSampleLogits>> = kd_cache
                    .iter()
                    .map(|cache| chunk.iter().map(|&i| cache[i].clone()).collect())
                    .collect();
                let targets: Vec<TeacherTargets<'_>> = active
                    .iter()
                    .zip(&gathered)
                    .map(|(snap, logits)| TeacherTargets { snapshot: snap, logits })
                    .collect();
                cskd_total(&mut tape, &model.bank, &out.per_sample, &targets, &pi, w)?
            } else {
                zero(&mut tape)?
            };
            let cal = if want_cal {
                cal_total(
                    &mut tape,
                    mv.bank.attr_rows,
                    mv.bank.obj_rows,
                    &model.bank,
                    &teacher_banks,
                    &pi,
                )?
            } else {
                zero(&mut tape)?
            };
            let opl_term = if want_opl {
                opl(&mut tape, mv.bank.attr_rows, mv.bank.obj_rows, &split)?
            } else {
                zero(&mut tape)?
            };
            let idl_term = if want_idl {
                idl(&mut tape, mv.bank.attr_rows, mv.bank.obj_rows, &split)?
            } else {
                zero(&mut tape)?
            };
            let objective = total(
                &mut tape,
                &LossComponents { ce, cskd, cal, opl: opl_term, idl: idl_term },
                w,
            )?;
            trace.step_losses.push(tape.value(objective)?[0]);

            let gmap = tape.backward(objective)?;
            let grads: Vec<Option<Vec<f64>>> =
                flat_vars(&mv).iter().map(|v| gmap.of(*v).map(<[f64]>::to_vec)).collect();
            opt.apply(&mut model, &grads, config.lr, config.optimizer)?;
        }
    }

    let snapshot = TeacherSnapshot::freeze(session.index, &model, &partition);
    Ok((snapshot, trace))
}

/// Everything produced for one completed session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub session: usize,
    /// Accumulated continual evaluation over every slice introduced so far.
    pub czs: MetricsReport,
    /// Per-origin slice reports under this session's model, origin 0..=t.
    pub slices: Vec<MetricsReport>,
    /// Accumulated prediction records backing `czs`, dump-ready.
    pub records: Vec<PredictionRecord>,
    pub trace: TrainTrace,
}

/// Output of a full protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub outcomes: Vec<SessionOutcome>,
    pub forgetting: ForgettingMatrix,
    /// Freeze-time parameter hash per teacher, session order.
    pub teacher_hashes: Vec<u64>,
    pub manifest: String,
}

/// Structured text echo of everything that determines a run.
pub fn run_manifest(
    space: &CompositionSpace,
    splits: &[SessionSpec],
    config: &TrainConfig,
) -> Result<String, ContinualError> {
    let mut s = String::new();
    s.push_str("czsl-run v1\n");
    s.push_str(&format!("code-version\t{}\n", env!("CARGO_PKG_VERSION")));
    s.push_str(&format!("seed\t{}\n", config.seed));
    s.push_str(&format!(
        "space\t{} attributes x {} objects\n",
        space.n_attrs(),
        space.n_objs()
    ));
    s.push_str(&format!("sessions\t{}\n", splits.len()));
    for sp in splits {
        s.push_str(&format!(
            "session {}\tattrs {} objs {} seen {} unseen {} val {}\n",
            sp.index,
            sp.attrs.len(),
            sp.objs.len(),
            sp.seen.len(),
            sp.unseen.len(),
            sp.val.len()
        ));
    }
    let config_json = serde_json::to_string(config)
        .map_err(|e| ContinualError::Corrupt { what: format!("config echo: {e}") })?;
    s.push_str(&format!("config\t{config_json}\n"));
    Ok(s)
}

/// Runs the full continual protocol: trains sessions in order; after each
/// session evaluates the accumulated test set and every origin slice for
/// the forgetting matrix; optionally writes one checkpoint per session.
pub fn run_protocol(
    space: &CompositionSpace,
    splits: &[SessionSpec],
    config: &TrainConfig,
    infer: &InferenceWeights,
    checkpoint_dir: Option<&Path>,
) -> Result<RunOutput, ContinualError> {
    config.validate()?;
    infer.validate().map_err(ContinualError::from)?;
    if splits.is_empty() {
        return Err(ContinualError::BadConfig {
            what: "splits",
            detail: "protocol needs at least one session".into(),
        });
    }
    let violations = validate_splits(space, splits);
    if !violations.is_empty() {
        let detail: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(ContinualError::BadConfig { what: "splits", detail: detail.join("; ") });
    }

    let latents = spawn_world(space, config.d, config.patches, config.sigma, config.seed)?;
    let mut teachers: Vec<TeacherSnapshot> = Vec::new();
    let mut teacher_hashes: Vec<u64> = Vec::new();
    let mut eval_slices: Vec<EvalSlice> = Vec::new();
    let mut universes: Vec<OriginUniverse> = Vec::new();
    let mut origin_seen: Vec<std::collections::BTreeSet<(usize, usize)>> = Vec::new();
    let mut auc_rows: Vec<Vec<f64>> = Vec::new();
    let mut outcomes: Vec<SessionOutcome> = Vec::new();
    let mut seen_marking: std::collections::BTreeSet<(usize, usize)> =
        std::collections::BTreeSet::new();
    let mut known_attrs = 0usize;
    let mut known_objs = 0usize;

    for (t, session) in splits.iter().enumerate() {
        // Teachers must still hash to their freeze-time values.
        for (snap, &expect) in teachers.iter().zip(&teacher_hashes) {
            let got = model_param_hash(snap.model());
            if got != expect {
                return Err(ContinualError::Corrupt {
                    what: format!("teacher {} mutated after freezing", snap.session()),
                });
            }
        }
        let train_set = render_train_set(&latents, session, config)?;
        let (snapshot, trace) =
            train_session(space, &latents, &teachers, session, &train_set, config)?;
        teacher_hashes.push(model_param_hash(snapshot.model()));
        teachers.push(snapshot);
        let current = teachers.last().expect("just pushed");
        eval_slices.push(render_eval_slice(&latents, session, config)?);
        known_attrs += session.attrs.len();
        known_objs += session.objs.len();
        universes.push(OriginUniverse {
            comps: session.seen.iter().chain(session.unseen.iter()).copied().collect(),
            attrs: known_attrs,
            objs: known_objs,
        });
        origin_seen.push(session.seen.iter().copied().collect());
        seen_marking.extend(session.seen.iter().copied());
        auc_rows.push(Vec::new());

        let history = EvalHistory {
            slices: &eval_slices,
            universes: &universes,
            origin_seen: &origin_seen,
            seen_marking: &seen_marking,
        };
        let scored =
            score_history(current.model(), current.partition(), &latents, &history, t, infer)?;
        let ScoredHistory { czs, slices: slice_reports, records: merged, slice_aucs } = scored;
        for (origin, auc) in slice_aucs.into_iter().enumerate() {
            auc_rows[origin].push(auc);
        }

        if let Some(dir) = checkpoint_dir {
            let ck = Checkpoint {
                session: t,
                world_seed: config.seed,
                config: config.clone(),
                space: space.clone(),
                splits: splits[..=t].to_vec(),
                partition: current.partition().clone(),
                reports: std::iter::once(czs.clone()).chain(slice_reports.iter().cloned()).collect(),
                model: current.model().clone(),
            };
            fs::create_dir_all(dir)?;
            save_checkpoint(&ck, &dir.join(format!("session_{t}.ckpt")))?;
        }

        outcomes.push(SessionOutcome {
            session: t,
            czs,
            slices: slice_reports,
            records: merged,
            trace,
        });
    }

    // Final immutability audit over the whole registry.
    for (snap, &expect) in teachers.iter().zip(&teacher_hashes) {
        if model_param_hash(snap.model()) != expect {
            return Err(ContinualError::Corrupt {
                what: format!("teacher {} mutated after freezing", snap.session()),
            });
        }
    }
    let forgetting = eval::forgetting(&auc_rows)?;
    let manifest = run_manifest(space, splits, config)?;
    Ok(RunOutput { outcomes, forgetting, teacher_hashes, manifest })
}

/// A self-contained snapshot of one completed session: enough to resume
/// evaluation (or later sessions) without the original process.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub session: usize,
    pub world_seed: u64,
    pub config: TrainConfig,
    pub space: CompositionSpace,
    pub splits: Vec<SessionSpec>,
    pub partition: HeadTailPartition,
    pub reports: Vec<MetricsReport>,
    pub model: Model,
}

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    world_seed: u64,
    config: TrainConfig,
    space: CompositionSpace,
    splits: Vec<SessionSpec>,
    partition_head: Vec<usize>,
    partition_tail: Vec<usize>,
    reports: Vec<MetricsReport>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(buf: &mut Vec<u8>, blob: &[u8]) {
    put_u64(buf, blob.len() as u64);
    buf.extend_from_slice(blob);
}

fn put_f64s(buf: &mut Vec<u8>, data: &[f64]) {
    put_u64(buf, data.len() as u64);
    for &x in data {
        put_u64(buf, x.to_bits());
    }
}

fn put_usizes(buf: &mut Vec<u8>, data: &[usize]) {
    put_u64(buf, data.len() as u64);
    for &x in data {
        put_u64(buf, x as u64);
    }
}

/// Serializes a checkpoint: magic, version, JSON metadata, the prompt bank
/// structure, every parameter tensor bit-exactly, batch-norm running
/// statistics, and a trailing FNV-64 of everything before it.
pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>, ContinualError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    put_u64(&mut buf, ck.session as u64);
    let meta = CkptMeta {
        world_seed: ck.world_seed,
        config: ck.config.clone(),
        space: ck.space.clone(),
        splits: ck.splits.clone(),
        partition_head: ck.partition.head.clone(),
        partition_tail: ck.partition.tail.clone(),
        reports: ck.reports.clone(),
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| ContinualError::Corrupt { what: format!("metadata encode: {e}") })?;
    put_blob(&mut buf, &meta_json);

    let bank = &ck.model.bank;
    put_u64(&mut buf, bank.seed());
    put_u64(&mut buf, bank.d() as u64);
    put_u64(&mut buf, bank.context_length() as u64);
    put_usizes(&mut buf, bank.attr_ids());
    put_usizes(&mut buf, bank.obj_ids());
    put_u64(&mut buf, bank.comp_index().len() as u64);
    for &(a, o) in bank.comp_index() {
        put_u64(&mut buf, a as u64);
        put_u64(&mut buf, o as u64);
    }

    let mut count = 0u32;
    ck.model.visit_params(|_, _| count += 1);
    put_u32(&mut buf, count);
    ck.model.visit_params(|name, t| {
        put_blob(&mut buf, name.as_bytes());
        put_u64(&mut buf, t.shape().len() as u64);
        for &d in t.shape() {
            put_u64(&mut buf, d as u64);
        }
        put_f64s(&mut buf, t.data());
    });
    for v in [
        &ck.model.heads.attr.bn_mean,
        &ck.model.heads.attr.bn_var,
        &ck.model.heads.obj.bn_mean,
        &ck.model.heads.obj.bn_var,
    ] {
        put_f64s(&mut buf, v);
    }
    let digest = fnv64(&buf);
    put_u64(&mut buf, digest);
    Ok(buf)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), ContinualError> {
    let bytes = checkpoint_bytes(ck)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContinualError> {
        if self.pos + n > self.buf.len() {
            return Err(ContinualError::Corrupt { what: format!("truncated at {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContinualError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("length checked")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContinualError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("length checked")))
    }

    fn blob(&mut self, what: &str) -> Result<&'a [u8], ContinualError> {
        let n = self.u64(what)? as usize;
        self.take(n, what)
    }

    fn f64s(&mut self, what: &str) -> Result<Vec<f64>, ContinualError> {
        let n = self.u64(what)? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_bits(self.u64(what)?));
        }
        Ok(out)
    }

    fn usizes(&mut self, what: &str) -> Result<Vec<usize>, ContinualError> {
        let n = self.u64(what)? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.u64(what)? as usize);
        }
        Ok(out)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, ContinualError> {
    if bytes.len() < CKPT_MAGIC.len() + 4 + 8 + 8 {
        return Err(ContinualError::Corrupt { what: "file shorter than any checkpoint".into() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("split at 8"));
    if fnv64(body) != stored {
        return Err(ContinualError::Corrupt { what: "checksum mismatch".into() });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8, "magic")? != CKPT_MAGIC {
        return Err(ContinualError::Corrupt { what: "bad magic".into() });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(ContinualError::VersionMismatch { found: version, expected: CKPT_VERSION });
    }
    let session = r.u64("session")? as usize;
    let meta: CkptMeta = serde_json::from_slice(r.blob("metadata")?)
        .map_err(|e| ContinualError::Corrupt { what: format!("metadata decode: {e}") })?;

    let bank_seed = r.u64("bank seed")?;
    let d = r.u64("bank d")? as usize;
    let m = r.u64("bank m")? as usize;
    let attr_ids = r.usizes("attribute ids")?;
    let obj_ids = r.usizes("object ids")?;
    let n_comb = r.u64("composition count")? as usize;
    let mut comp_index = Vec::with_capacity(n_comb);
    for _ in 0..n_comb {
        let a = r.u64("composition")? as usize;
        let o = r.u64("composition")? as usize;
        comp_index.push((a, o));
    }

    let count = r.u32("parameter count")? as usize;
    let mut params: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.blob("parameter name")?.to_vec())
            .map_err(|_| ContinualError::Corrupt { what: "parameter name not utf-8".into() })?;
        let rank = r.u64("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("parameter shape")? as usize);
        }
        let data = r.f64s("parameter data")?;
        params.push((name, shape, data));
    }
    let bn_attr_mean = r.f64s("bn stats")?;
    let bn_attr_var = r.f64s("bn stats")?;
    let bn_obj_mean = r.f64s("bn stats")?;
    let bn_obj_var = r.f64s("bn stats")?;
    if r.pos != body.len() {
        return Err(ContinualError::Corrupt { what: "trailing bytes after payload".into() });
    }

    let find = |name: &str| -> Result<&(String, Vec<usize>, Vec<f64>), ContinualError> {
        params
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| ContinualError::Corrupt { what: format!("missing parameter {name}") })
    };
    let tensor_of = |name: &str| -> Result<Tensor, ContinualError> {
        let (_, shape, data) = find(name)?;
        Tensor::param(shape.clone(), data.clone()).map_err(ContinualError::Num)
    };
    let bank = PromptBank::from_parts(
        d,
        m,
        bank_seed,
        attr_ids,
        obj_ids,
        comp_index,
        tensor_of("prompt.attr_rows")?,
        tensor_of("prompt.obj_rows")?,
        [
            tensor_of("prompt.prefix_a")?,
            tensor_of("prompt.prefix_o")?,
            tensor_of("prompt.prefix_c")?,
        ],
    )?;
    let mut model = Model::new(
        bank,
        meta.config.tau,
        meta.config.dropout,
        meta.config.saw_mode,
        mix(meta.config.seed, &[TAG_MODEL]),
    )?;
    let mut failure: Option<ContinualError> = None;
    model.visit_params_mut(|name, t| {
        if failure.is_some() || name.starts_with("prompt.") {
            return;
        }
        let stored = match find(name) {
            Ok(p) => p,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        if stored.1 != t.shape() {
            failure = Some(ContinualError::Corrupt {
                what: format!("parameter {name} has shape {:?}, expected {:?}", stored.1, t.shape()),
            });
            return;
        }
        if let Err(e) = t.set_data(&stored.2) {
            failure = Some(ContinualError::Num(e));
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    for (name, stored) in [
        ("head.attr.bn_mean", bn_attr_mean),
        ("head.attr.bn_var", bn_attr_var),
        ("head.obj.bn_mean", bn_obj_mean),
        ("head.obj.bn_var", bn_obj_var),
    ] {
        let mut placed = false;
        model.visit_running_stats_mut(|n, v| {
            if n == name {
                *v = stored.clone();
                placed = true;
            }
        });
        if !placed {
            return Err(ContinualError::Corrupt { what: format!("missing statistic {name}") });
        }
    }
    Ok(Checkpoint {
        session,
        world_seed: meta.world_seed,
        config: meta.config,
        space: meta.space,
        splits: meta.splits,
        partition: HeadTailPartition { head: meta.partition_head, tail: meta.partition_tail },
        reports: meta.reports,
        model,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ContinualError> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

/// Mean directional drift, 1 - cos, over prompt rows present in both
/// banks (matched by primitive id). None when the banks share nothing.
pub fn mean_row_drift(old: &PromptBank, new: &PromptBank) -> Option<f64> {
    let d = old.d();
    let mut total = 0.0;
    let mut n = 0usize;
    let mut side = |old_ids: &[usize],
                    old_rows: &Tensor,
                    new_slot: &dyn Fn(usize) -> Option<usize>,
                    new_rows: &Tensor| {
        for (old_slot, &id) in old_ids.iter().enumerate() {
            if let Some(slot) = new_slot(id) {
                let a = &old_rows.data()[old_slot * d..(old_slot + 1) * d];
                let b = &new_rows.data()[slot * d..(slot + 1) * d];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    total += 1.0 - dot / (na * nb);
                    n += 1;
                }
            }
        }
    };
    side(old.attr_ids(), old.attr_rows(), &|id| new.attr_slot(id), new.attr_rows());
    side(old.obj_ids(), old.obj_rows(), &|id| new.obj_slot(id), new.obj_rows());
    if n == 0 {
        None
    } else {
        Some(total / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{build_space, split_constrained};

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            lr: 5e-3,
            batch: 8,
            seed: 11,
            train_samples_per_comp: 4,
            eval_samples_per_comp: 2,
            d: 8,
            patches: 2,
            prefix_len: 2,
            sigma: 0.05,
            ..TrainConfig::default()
        }
    }

    fn tiny_world() -> (CompositionSpace, Vec<SessionSpec>) {
        let space = build_space(names("a", 4), names("o", 3), None).unwrap();
        let splits = split_constrained(&space, 2, 3, 0.5).unwrap();
        (space, splits)
    }

    #[test]
    fn config_defaults_hold_and_validation_rejects_nonsense() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.epochs, 30);
        assert_eq!(c.batch, 32);
        assert_eq!(c.train_samples_per_comp, 50);
        assert!(matches!(c.optimizer, Optimizer::Adam { .. }));

        for broken in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { lr: f64::NAN, ..TrainConfig::default() },
            TrainConfig { batch: 0, ..TrainConfig::default() },
            TrainConfig { train_samples_per_comp: 0, ..TrainConfig::default() },
            TrainConfig { d: 0, ..TrainConfig::default() },
            TrainConfig { dropout: 1.0, ..TrainConfig::default() },
            TrainConfig { tau: 0.0, ..TrainConfig::default() },
            TrainConfig { max_teachers: Some(0), ..TrainConfig::default() },
            TrainConfig {
                optimizer: Optimizer::Adam { beta1: 1.0, beta2: 0.999, eps: 1e-8 },
                ..TrainConfig::default()
            },
        ] {
            assert!(broken.validate().is_err(), "accepted {broken:?}");
        }
    }

    #[test]
    fn training_reduces_the_objective() {
        let (space, splits) = tiny_world();
        let config = TrainConfig { epochs: 30, ..tiny_config() };
        let latents =
            spawn_world(&space, config.d, config.patches, config.sigma, config.seed).unwrap();
        let train_set = render_train_set(&latents, &splits[0], &config).unwrap();
        let (_, trace) =
            train_session(&space, &latents, &[], &splits[0], &train_set, &config).unwrap();
        let steps_per_epoch = trace.step_losses.len() / config.epochs;
        let first: f64 =
            trace.step_losses[..steps_per_epoch].iter().sum::<f64>() / steps_per_epoch as f64;
        let last: f64 = trace.step_losses[trace.step_losses.len() - steps_per_epoch..]
            .iter()
            .sum::<f64>()
            / steps_per_epoch as f64;
        assert!(
            last < first * 0.9,
            "objective did not drop: first epoch {first}, last epoch {last}"
        );
    }

    #[test]
    fn session_zero_ignores_continual_loss_weights() {
        let (space, splits) = tiny_world();
        let config = tiny_config();
        let latents =
            spawn_world(&space, config.d, config.patches, config.sigma, config.seed).unwrap();
        let train_set = render_train_set(&latents, &splits[0], &config).unwrap();
        let loud = TrainConfig {
            loss: LossWeights {
                lambda_kd: 40.0,
                lambda_cal: 40.0,
                lambda_opl: 40.0,
                lambda_idl: 40.0,
                ..LossWeights::default()
            },
            ..config.clone()
        };
        let (a, _) =
            train_session(&space, &latents, &[], &splits[0], &train_set, &config).unwrap();
        let (b, _) = train_session(&space, &latents, &[], &splits[0], &train_set, &loud).unwrap();
        assert_eq!(
            model_param_hash(a.model()),
            model_param_hash(b.model()),
            "session 0 must train on cross entropy alone"
        );
    }

    #[test]
    fn sessions_must_arrive_in_order() {
        let (space, splits) = tiny_world();
        let config = tiny_config();
        let latents =
            spawn_world(&space, config.d, config.patches, config.sigma, config.seed).unwrap();
        let train_set = render_train_set(&latents, &splits[1], &config).unwrap();
        // Session 1 with an empty registry: refused before any work.
        match train_session(&space, &latents, &[], &splits[1], &train_set, &config) {
            Err(ContinualError::BadConfig { what: "session order", .. }) => {}
            other => panic!("expected ordering error, got {other:?}"),
        }
    }

    #[test]
    fn protocol_is_deterministic_and_counts_teachers() {
        let (space, splits) = tiny_world();
        let config = tiny_config();
        let a = run_protocol(&space, &splits, &config, &InferenceWeights::default(), None).unwrap();
        let b = run_protocol(&space, &splits, &config, &InferenceWeights::default(), None).unwrap();
        assert_eq!(a.outcomes, b.outcomes, "same seed must reproduce bitwise");
        assert_eq!(a.forgetting, b.forgetting);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.teacher_hashes, b.teacher_hashes);
        assert_eq!(a.teacher_hashes.len(), splits.len());
        // Slice i exists under every model t >= i.
        assert_eq!(a.outcomes[0].slices.len(), 1);
        assert_eq!(a.outcomes[1].slices.len(), 2);
        assert_eq!(a.forgetting.rows[0].len(), 2);
        assert_eq!(a.forgetting.rows[1].len(), 1);
    }

    #[test]
    fn single_session_protocol_has_trivial_forgetting() {
        let (space, splits) = tiny_world();
        let config = tiny_config();
        let out = run_protocol(&space, &splits[..1], &config, &InferenceWeights::default(), None).unwrap();
        assert_eq!(out.outcomes.len(), 1);
        assert_eq!(out.forgetting.rows, vec![vec![out.outcomes[0].slices[0].auc]]);
        assert_eq!(out.forgetting.f_auc, 0.0);
    }

    #[test]
    fn protocol_rejects_corrupt_splits() {
        let (space, mut splits) = tiny_world();
        // Re-teach a session-0 composition in session 1: cross-session overlap.
        let stolen = splits[0].seen[0];
        splits[1].seen.push(stolen);
        let config = tiny_config();
        match run_protocol(&space, &splits, &config, &InferenceWeights::default(), None) {
            Err(ContinualError::BadConfig { what: "splits", .. }) => {}
            other => panic!("expected split validation failure, got {other:?}"),
        }
    }

    #[test]
    fn teacher_cap_changes_later_sessions_only() {
        let space = build_space(names("a", 6), names("o", 4), None).unwrap();
        let splits = split_constrained(&space, 3, 5, 0.5).unwrap();
        let config = tiny_config();
        let capped = TrainConfig { max_teachers: Some(1), ..config.clone() };
        let full = run_protocol(&space, &splits, &config, &InferenceWeights::default(), None).unwrap();
        let one = run_protocol(&space, &splits, &capped, &InferenceWeights::default(), None).unwrap();
        // With at most one teacher in existence the cap is inert.
        assert_eq!(full.teacher_hashes[0], one.teacher_hashes[0]);
        assert_eq!(full.teacher_hashes[1], one.teacher_hashes[1]);
        // From session 2 the registries differ (two teachers vs one).
        assert_ne!(full.teacher_hashes[2], one.teacher_hashes[2]);
    }

    #[test]
    fn anchoring_reduces_prompt_drift_on_paired_seeds() {
        let (space, splits) = tiny_world();
        let base = TrainConfig { epochs: 4, ..tiny_config() };
        let unanchored = TrainConfig {
            loss: LossWeights { lambda_cal: 0.0, ..base.loss },
            ..base.clone()
        };
        // Drift of session-0 rows after session 1, measured against the
        // frozen session-0 teacher.
        let drift_of = |config: &TrainConfig| -> f64 {
            let latents =
                spawn_world(&space, config.d, config.patches, config.sigma, config.seed).unwrap();
            let set0 = render_train_set(&latents, &splits[0], config).unwrap();
            let (t0, _) =
                train_session(&space, &latents, &[], &splits[0], &set0, config).unwrap();
            let teachers = vec![t0];
            let set1 = render_train_set(&latents, &splits[1], config).unwrap();
            let (t1, _) =
                train_session(&space, &latents, &teachers, &splits[1], &set1, config).unwrap();
            mean_row_drift(teachers[0].bank(), t1.bank()).expect("sessions share primitives")
        };
        let anchored_drift = drift_of(&base);
        let free_drift = drift_of(&unanchored);
        assert!(
            anchored_drift < free_drift,
            "anchoring must reduce drift: {anchored_drift} vs {free_drift}"
        );
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let (space, splits) = tiny_world();
        let config = tiny_config();
        let dir = std::env::temp_dir().join(format!("czsl-ckpt-{}", std::process::id()));
        let out = run_protocol(&space, &splits, &config, &InferenceWeights::default(), Some(&dir)).unwrap();
        let path = dir.join("session_1.ckpt");
        let bytes = fs::read(&path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.session, 1);
        assert_eq!(ck.splits.len(), 2);
        // save(load(x)) == x byte for byte.
        let again = checkpoint_bytes(&ck).unwrap();
        assert_eq!(bytes, again, "checkpoint serialization must be stable");
        // Stored metrics match the run's reports exactly.
        assert_eq!(ck.reports[0], out.outcomes[1].czs);

        // The loaded model is the frozen session-1 teacher, bit for bit.
        let latents =
            spawn_world(&space, config.d, config.patches, config.sigma, config.seed).unwrap();
        let slice0 = render_eval_slice(&latents, &splits[0], &config).unwrap();
        let slice1 = render_eval_slice(&latents, &splits[1], &config).unwrap();
        let infer = InferenceWeights::default();
        let seen: std::collections::BTreeSet<(usize, usize)> =
            splits.iter().flat_map(|s| s.seen.iter().copied()).collect();
        let mut records = Vec::new();
        for slice in [&slice0, &slice1] {
            records.push(eval::records_from_model(
                &ck.model,
                &ck.partition,
                &latents,
                &slice.ids,
                &slice.samples,
                &infer,
            )
            .unwrap());
        }
        let merged = czs_accumulate(records).unwrap();
        let rep = eval::report(&merged, &seen, 1, EvalScope::Czs).unwrap();
        for (got, want) in [
            (rep.auc, ck.reports[0].auc),
            (rep.best_seen, ck.reports[0].best_seen),
            (rep.best_unseen, ck.reports[0].best_unseen),
            (rep.hm, ck.reports[0].hm),
            (rep.attr_acc, ck.reports[0].attr_acc),
            (rep.obj_acc, ck.reports[0].obj_acc),
            (rep.comp_acc, ck.reports[0].comp_acc),
        ] {
            assert!((got - want).abs() < 1e-9, "reloaded eval drifted: {got} vs {want}");
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_reader_rejects_damage() {
        let (space, splits) = tiny_world();
        let config = tiny_config();
        let dir = std::env::temp_dir().join(format!("czsl-ckpt-dmg-{}", std::process::id()));
        run_protocol(&space, &splits[..1], &config, &InferenceWeights::default(), Some(&dir)).unwrap();
        let path = dir.join("session_0.ckpt");
        let bytes = fs::read(&path).unwrap();

        // Truncation anywhere loses the checksum.
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(
            checkpoint_from_bytes(cut),
            Err(ContinualError::Corrupt { .. })
        ));
        // A flipped payload byte breaks the digest.
        let mut flipped = bytes.clone();
        flipped[40] ^= 0xff;
        assert!(matches!(
            checkpoint_from_bytes(&flipped),
            Err(ContinualError::Corrupt { .. })
        ));
        // A future version is refused even with a valid digest.
        let mut upgraded = bytes.clone();
        upgraded[8] = 9;
        let body_len = upgraded.len() - 8;
        let digest = fnv64(&upgraded[..body_len]);
        upgraded[body_len..].copy_from_slice(&digest.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&upgraded),
            Err(ContinualError::VersionMismatch { found: 9, .. })
        ));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_echoes_the_run() {
        let (space, splits) = tiny_world();
        let config = tiny_config();
        let m = run_manifest(&space, &splits, &config).unwrap();
        assert!(m.starts_with("czsl-run v1\n"));
        assert!(m.contains("seed\t11"));
        assert!(m.contains("sessions\t2"));
        assert!(m.contains("\"epochs\":2"));
    }
}
