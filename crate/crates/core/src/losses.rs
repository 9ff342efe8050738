//! Training objectives for the continual compositional learner.
//!
//! Five terms combine into the total loss. Cross entropy over the three
//! recognition branches anchors the current session. Cross-session knowledge
//! distillation (CSKD) pulls the student's branch distributions toward every
//! frozen teacher on the label overlap, with recent teachers weighted more
//! heavily. Cosine anchor alignment (CAL) keeps recurring primitive prompt
//! rows pointing where the teachers left them. Orthogonal projection (OPL)
//! pushes the session's new primitive rows away from the inherited ones, and
//! intra-session diversification (IDL) spreads the new rows apart from each
//! other.
//!
//! Everything here is pure given its inputs. Teacher logits arrive
//! precomputed as plain numbers and enter the tape only as constants, so the
//! gradients that flow are exclusively the student's. The distillation
//! direction is KL(teacher, student): the student is pulled onto the
//! teacher's distribution, never the reverse.

use std::error::Error;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError, SampleLogits};
use crate::numcore::{NumError, Tape, Tensor, Var};
use crate::prompts::{HeadTailPartition, PromptBank};
use crate::world::{Sample, SessionSpec, WorldLatents};

#[derive(Debug)]
pub enum LossError {
    Num(NumError),
    Model(ModelError),
    /// A weight or temperature is outside its documented domain.
    BadWeights { what: &'static str, detail: String },
    /// Two collections that must be paired have different lengths.
    BatchMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    /// A training label names a primitive or composition the bank has never
    /// been introduced to.
    UnknownLabel {
        what: &'static str,
        attr: usize,
        obj: usize,
    },
    /// A split references a primitive the bank does not hold.
    UnknownPrimitive { what: &'static str, id: usize },
    /// A component of the total objective is non-finite, or becomes so once
    /// weighted.
    NonFinite { component: &'static str },
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::Num(e) => write!(f, "{e}"),
            LossError::Model(e) => write!(f, "{e}"),
            LossError::BadWeights { what, detail } => write!(f, "loss weight {what}: {detail}"),
            LossError::BatchMismatch { what, left, right } => {
                write!(f, "{what}: got {left} entries against {right}")
            }
            LossError::UnknownLabel { what, attr, obj } => {
                write!(f, "label ({attr}, {obj}): {what} not present in the prompt bank")
            }
            LossError::UnknownPrimitive { what, id } => {
                write!(f, "{what} {id} not present in the prompt bank")
            }
            LossError::NonFinite { component } => {
                write!(f, "loss component {component} is not finite")
            }
        }
    }
}

impl Error for LossError {}

impl From<NumError> for LossError {
    fn from(e: NumError) -> Self {
        LossError::Num(e)
    }
}

impl From<ModelError> for LossError {
    fn from(e: ModelError) -> Self {
        LossError::Model(e)
    }
}

/// Every scalar knob of the objective in one place.
///
/// `alpha_*` weight the three cross-entropy branches, `lambda_ce` through
/// `lambda_idl` mix the five components, `lambda_a/o/c` mix the distillation
/// branches, `tau_kd` is the distillation temperature and `recency_gamma`
/// generates the per-teacher weights (see [`recency_weights`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_a: f64,
    pub alpha_o: f64,
    pub alpha_c: f64,
    pub lambda_ce: f64,
    pub lambda_kd: f64,
    pub lambda_cal: f64,
    pub lambda_opl: f64,
    pub lambda_idl: f64,
    pub lambda_a: f64,
    pub lambda_o: f64,
    pub lambda_c: f64,
    pub tau_kd: f64,
    pub recency_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_a: 1.0,
            alpha_o: 1.0,
            alpha_c: 1.0,
            lambda_ce: 0.35,
            lambda_kd: 0.65,
            lambda_cal: 0.05,
            lambda_opl: 0.05,
            lambda_idl: 0.005,
            lambda_a: 1.0,
            lambda_o: 1.0,
            lambda_c: 1.0,
            tau_kd: 2.0,
            recency_gamma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let nonnegative = [
            ("alpha_a", self.alpha_a),
            ("alpha_o", self.alpha_o),
            ("alpha_c", self.alpha_c),
            ("lambda_ce", self.lambda_ce),
            ("lambda_kd", self.lambda_kd),
            ("lambda_cal", self.lambda_cal),
            ("lambda_opl", self.lambda_opl),
            ("lambda_idl", self.lambda_idl),
            ("lambda_a", self.lambda_a),
            ("lambda_o", self.lambda_o),
            ("lambda_c", self.lambda_c),
        ];
        for (what, v) in nonnegative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::BadWeights {
                    what,
                    detail: format!("must be finite and nonnegative, got {v}"),
                });
            }
        }
        if !(self.tau_kd.is_finite() && self.tau_kd > 0.0) {
            return Err(LossError::BadWeights {
                what: "tau_kd",
                detail: format!("temperature must be positive and finite, got {}", self.tau_kd),
            });
        }
        if !(self.recency_gamma > 0.0 && self.recency_gamma <= 1.0) {
            return Err(LossError::BadWeights {
                what: "recency_gamma",
                detail: format!("must lie in (0, 1], got {}", self.recency_gamma),
            });
        }
        Ok(())
    }
}

/// Normalized per-teacher weights. Teacher `t` of `n` gets weight
/// proportional to `gamma^(n-1-t)`, so the most recent teacher always
/// carries the largest share and older ones decay geometrically.
pub fn recency_weights(n: usize, gamma: f64) -> Result<Vec<f64>, LossError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(LossError::BadWeights {
            what: "recency_gamma",
            detail: format!("must lie in (0, 1], got {gamma}"),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let raw: Vec<f64> = (0..n).map(|t| gamma.powi((n - 1 - t) as i32)).collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.iter().map(|v| v / sum).collect())
}

/// Branch logits of one frozen teacher for one sample, in that teacher's own
/// slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSampleLogits {
    pub z_a: Vec<f64>,
    pub z_o: Vec<f64>,
    pub z_c: Vec<f64>,
}

/// A fully frozen copy of the model as it stood at the end of a session,
/// together with the composition partition it was trained under. Snapshots
/// never change after creation; their banks double as the label index maps
/// (primitive or composition identity to logit position).
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    session: usize,
    model: Model,
    partition: HeadTailPartition,
}

impl TeacherSnapshot {
    pub fn freeze(session: usize, model: &Model, partition: &HeadTailPartition) -> Self {
        let mut frozen = model.clone();
        frozen.set_trainable(false);
        TeacherSnapshot { session, model: frozen, partition: partition.clone() }
    }

    pub fn session(&self) -> usize {
        self.session
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn partition(&self) -> &HeadTailPartition {
        &self.partition
    }

    pub fn bank(&self) -> &PromptBank {
        &self.model.bank
    }

    /// Runs the frozen teacher over a batch and extracts plain-number branch
    /// logits. Uses a private tape; nothing is recorded.
    pub fn eval_logits(
        &self,
        latents: &WorldLatents,
        samples: &[Sample],
    ) -> Result<Vec<TeacherSampleLogits>, LossError> {
        let mut tape = Tape::new();
        let out = self.model.forward_eval(&mut tape, latents, samples, &self.partition)?;
        let mut rows = Vec::with_capacity(out.per_sample.len());
        for s in &out.per_sample {
            rows.push(TeacherSampleLogits {
                z_a: tape.value(s.z_a)?.to_vec(),
                z_o: tape.value(s.z_o)?.to_vec(),
                z_c: tape.value(s.z_c)?.to_vec(),
            });
        }
        Ok(rows)
    }
}

/// Paired (teacher slot, student slot) positions for every label the two
/// banks share, per branch. Matching is by identity: same primitive id, or
/// same attribute-object pair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverlapMaps {
    pub attrs: Vec<(usize, usize)>,
    pub objs: Vec<(usize, usize)>,
    pub comps: Vec<(usize, usize)>,
}

pub fn overlap_maps(teacher: &PromptBank, student: &PromptBank) -> OverlapMaps {
    let mut maps = OverlapMaps::default();
    for (t_slot, &id) in teacher.attr_ids().iter().enumerate() {
        if let Some(s_slot) = student.attr_slot(id) {
            maps.attrs.push((t_slot, s_slot));
        }
    }
    for (t_slot, &id) in teacher.obj_ids().iter().enumerate() {
        if let Some(s_slot) = student.obj_slot(id) {
            maps.objs.push((t_slot, s_slot));
        }
    }
    for (t_slot, &comp) in teacher.comp_index().iter().enumerate() {
        if let Some(s_slot) = student.comp_slot(comp) {
            maps.comps.push((t_slot, s_slot));
        }
    }
    maps
}

/// One teacher's cached batch logits alongside its snapshot.
#[derive(Debug, Clone, Copy)]
pub struct TeacherTargets<'a> {
    pub snapshot: &'a TeacherSnapshot,
    pub logits: &'a [TeacherSampleLogits],
}

/// Batch-mean weighted cross entropy over the three branches.
///
/// Labels are world-level (attribute id, object id) pairs; they are mapped
/// through the bank's slot tables before indexing the probability vectors.
/// Probabilities are floored at 1e-12 before the log.
pub fn ce_total(
    tape: &mut Tape,
    per_sample: &[SampleLogits],
    labels: &[(usize, usize)],
    bank: &PromptBank,
    w: &LossWeights,
) -> Result<Var, LossError> {
    w.validate()?;
    if per_sample.is_empty() || per_sample.len() != labels.len() {
        return Err(LossError::BatchMismatch {
            what: "cross entropy labels per sample",
            left: per_sample.len(),
            right: labels.len(),
        });
    }
    let mut terms = Vec::with_capacity(per_sample.len());
    for (s, &(attr, obj)) in per_sample.iter().zip(labels) {
        let sa = bank
            .attr_slot(attr)
            .ok_or(LossError::UnknownLabel { what: "attribute", attr, obj })?;
        let so = bank
            .obj_slot(obj)
            .ok_or(LossError::UnknownLabel { what: "object", attr, obj })?;
        let sc = bank
            .comp_slot((attr, obj))
            .ok_or(LossError::UnknownLabel { what: "composition", attr, obj })?;
        let na = nll(tape, s.p_a, sa, w.alpha_a)?;
        let no = nll(tape, s.p_o, so, w.alpha_o)?;
        let nc = nll(tape, s.p_c, sc, w.alpha_c)?;
        terms.push(tape.add_n(&[na, no, nc])?);
    }
    let sum = tape.add_n(&terms)?;
    Ok(tape.affine_scalar(sum, 1.0 / per_sample.len() as f64, 0.0)?)
}

fn nll(tape: &mut Tape, probs: Var, slot: usize, alpha: f64) -> Result<Var, NumError> {
    let p = tape.gather_elems(probs, &[slot])?;
    let lp = tape.log_clamped(p, 1e-12)?;
    let s = tape.sum_all(lp)?;
    tape.affine_scalar(s, -alpha, 0.0)
}

/// Temperature-scaled KL divergence from one teacher branch to the matching
/// student branch, restricted to the overlap and renormalized there.
///
/// Both logit vectors are sliced to the overlap positions, each slice gets
/// its own softmax at `tau_kd`, and the result is `tau_kd^2 * KL(t, s)`.
/// The teacher side is plain numbers, so no gradient reaches it. An empty
/// overlap contributes zero and logs a notice rather than failing.
pub fn cskd_branch(
    tape: &mut Tape,
    teacher_logits: &[f64],
    student_logits: Var,
    overlap: &[(usize, usize)],
    tau_kd: f64,
) -> Result<Var, LossError> {
    if !(tau_kd.is_finite() && tau_kd > 0.0) {
        return Err(LossError::BadWeights {
            what: "tau_kd",
            detail: format!("temperature must be positive and finite, got {tau_kd}"),
        });
    }
    if overlap.is_empty() {
        log::info!("distillation overlap is empty; branch contributes zero");
        return Ok(tape.constant_scalar(0.0)?);
    }
    let mut t_scaled = Vec::with_capacity(overlap.len());
    for &(ti, _) in overlap {
        let z = teacher_logits.get(ti).ok_or(NumError::IndexOutOfBounds {
            op: "cskd_branch",
            index: ti,
            len: teacher_logits.len(),
        })?;
        t_scaled.push(*z / tau_kd);
    }
    let p_t = softmax_plain(&t_scaled);
    // Constant part of the divergence; p ln p tends to 0 as p does.
    let neg_entropy: f64 = p_t.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum();
    let s_idx: Vec<usize> = overlap.iter().map(|&(_, si)| si).collect();
    let z_s = tape.gather_elems(student_logits, &s_idx)?;
    let p_s = tape.softmax_t(z_s, tau_kd)?;
    let log_p_s = tape.log_clamped(p_s, 1e-12)?;
    let p_t_const = tape.constant_vec(&p_t)?;
    let cross = tape.mul(p_t_const, log_p_s)?;
    let dot = tape.sum_all(cross)?;
    let tau2 = tau_kd * tau_kd;
    Ok(tape.affine_scalar(dot, -tau2, tau2 * neg_entropy)?)
}

fn softmax_plain(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Full distillation term: for every teacher, the batch-mean branch KLs
/// mixed by `lambda_a/o/c`, the teachers mixed by the recency weights `pi`.
///
/// Teacher logits must come from evaluating the same batch the student saw,
/// in the same order; only the lengths can be checked here.
pub fn cskd_total(
    tape: &mut Tape,
    student_bank: &PromptBank,
    per_sample: &[SampleLogits],
    targets: &[TeacherTargets<'_>],
    pi: &[f64],
    w: &LossWeights,
) -> Result<Var, LossError> {
    w.validate()?;
    if pi.len() != targets.len() {
        return Err(LossError::BatchMismatch {
            what: "recency weights per teacher",
            left: pi.len(),
            right: targets.len(),
        });
    }
    if targets.is_empty() || per_sample.is_empty() {
        return Ok(tape.constant_scalar(0.0)?);
    }
    let mut weighted = Vec::with_capacity(targets.len());
    for (t, &pi_t) in targets.iter().zip(pi) {
        if t.logits.len() != per_sample.len() {
            return Err(LossError::BatchMismatch {
                what: "teacher logits per batch sample",
                left: t.logits.len(),
                right: per_sample.len(),
            });
        }
        let maps = overlap_maps(t.snapshot.bank(), student_bank);
        let a = branch_mean(tape, t.logits, per_sample, &maps.attrs, w.tau_kd, |l| &l.z_a, |s| {
            s.z_a
        })?;
        let o = branch_mean(tape, t.logits, per_sample, &maps.objs, w.tau_kd, |l| &l.z_o, |s| {
            s.z_o
        })?;
        let c = branch_mean(tape, t.logits, per_sample, &maps.comps, w.tau_kd, |l| &l.z_c, |s| {
            s.z_c
        })?;
        let wa = tape.affine_scalar(a, w.lambda_a, 0.0)?;
        let wo = tape.affine_scalar(o, w.lambda_o, 0.0)?;
        let wc = tape.affine_scalar(c, w.lambda_c, 0.0)?;
        let one = tape.add_n(&[wa, wo, wc])?;
        weighted.push(tape.affine_scalar(one, pi_t, 0.0)?);
    }
    Ok(tape.add_n(&weighted)?)
}

fn branch_mean(
    tape: &mut Tape,
    teacher: &[TeacherSampleLogits],
    per_sample: &[SampleLogits],
    overlap: &[(usize, usize)],
    tau_kd: f64,
    pick_t: fn(&TeacherSampleLogits) -> &[f64],
    pick_s: fn(&SampleLogits) -> Var,
) -> Result<Var, LossError> {
    if overlap.is_empty() {
        log::info!("distillation overlap is empty; branch contributes zero");
        return Ok(tape.constant_scalar(0.0)?);
    }
    let mut kls = Vec::with_capacity(per_sample.len());
    for (tl, sl) in teacher.iter().zip(per_sample) {
        kls.push(cskd_branch(tape, pick_t(tl), pick_s(sl), overlap, tau_kd)?);
    }
    let sum = tape.add_n(&kls)?;
    Ok(tape.affine_scalar(sum, 1.0 / per_sample.len() as f64, 0.0)?)
}

/// Anchor alignment against a single teacher: sum of `1 - cos` between each
/// primitive row the teacher knows and the student's row for the same
/// primitive. Teacher rows enter as constants.
pub fn cal_one(
    tape: &mut Tape,
    attr_rows: Var,
    obj_rows: Var,
    student: &PromptBank,
    teacher: &PromptBank,
) -> Result<Var, LossError> {
    let mut terms = Vec::new();
    anchor_terms(tape, attr_rows, teacher.attr_rows(), teacher.attr_ids(), &mut terms, |id| {
        student.attr_slot(id)
    })?;
    anchor_terms(tape, obj_rows, teacher.obj_rows(), teacher.obj_ids(), &mut terms, |id| {
        student.obj_slot(id)
    })?;
    if terms.is_empty() {
        return Ok(tape.constant_scalar(0.0)?);
    }
    Ok(tape.add_n(&terms)?)
}

fn anchor_terms(
    tape: &mut Tape,
    student_rows: Var,
    teacher_rows: &Tensor,
    teacher_ids: &[usize],
    terms: &mut Vec<Var>,
    student_slot: impl Fn(usize) -> Option<usize>,
) -> Result<(), LossError> {
    for (t_slot, &id) in teacher_ids.iter().enumerate() {
        let Some(s_slot) = student_slot(id) else { continue };
        let s_row = tape.row(student_rows, s_slot)?;
        let t_row = tape.constant_vec(teacher_rows.row(t_slot)?)?;
        let cos = tape.cosine(s_row, t_row)?;
        terms.push(tape.affine_scalar(cos, -1.0, 1.0)?);
    }
    Ok(())
}

/// Anchor alignment against every teacher, mixed by the recency weights.
pub fn cal_total(
    tape: &mut Tape,
    attr_rows: Var,
    obj_rows: Var,
    student: &PromptBank,
    teachers: &[&PromptBank],
    pi: &[f64],
) -> Result<Var, LossError> {
    if pi.len() != teachers.len() {
        return Err(LossError::BatchMismatch {
            what: "recency weights per teacher bank",
            left: pi.len(),
            right: teachers.len(),
        });
    }
    if teachers.is_empty() {
        return Ok(tape.constant_scalar(0.0)?);
    }
    let mut weighted = Vec::with_capacity(teachers.len());
    for (t, &pi_t) in teachers.iter().zip(pi) {
        let one = cal_one(tape, attr_rows, obj_rows, student, t)?;
        weighted.push(tape.affine_scalar(one, pi_t, 0.0)?);
    }
    Ok(tape.add_n(&weighted)?)
}

/// Bank slots split into rows inherited from earlier sessions (head) and
/// rows the current session introduced (tail), per primitive branch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrimitiveSplit {
    pub attr_head: Vec<usize>,
    pub attr_tail: Vec<usize>,
    pub obj_head: Vec<usize>,
    pub obj_tail: Vec<usize>,
}

impl PrimitiveSplit {
    /// Derives the split from a session: the session's introduced primitives
    /// form the tail, every other bank slot the head.
    pub fn from_session(bank: &PromptBank, session: &SessionSpec) -> Result<Self, LossError> {
        let (attr_head, attr_tail) =
            split_axis(bank.n_attrs(), &session.attrs, "attribute", |id| bank.attr_slot(id))?;
        let (obj_head, obj_tail) =
            split_axis(bank.n_objs(), &session.objs, "object", |id| bank.obj_slot(id))?;
        Ok(PrimitiveSplit { attr_head, attr_tail, obj_head, obj_tail })
    }
}

fn split_axis(
    n: usize,
    introduced: &[usize],
    what: &'static str,
    slot_of: impl Fn(usize) -> Option<usize>,
) -> Result<(Vec<usize>, Vec<usize>), LossError> {
    let mut in_tail = vec![false; n];
    for &id in introduced {
        let slot = slot_of(id).ok_or(LossError::UnknownPrimitive { what, id })?;
        in_tail[slot] = true;
    }
    let mut head = Vec::new();
    let mut tail = Vec::new();
    for (slot, &t) in in_tail.iter().enumerate() {
        if t {
            tail.push(slot);
        } else {
            head.push(slot);
        }
    }
    Ok((head, tail))
}

/// Orthogonality pressure between inherited and new primitive rows: the mean
/// absolute cosine over all (head, tail) pairs, attributes plus objects.
/// A branch with an empty side contributes zero, which makes the whole term
/// vanish in the first session.
pub fn opl(
    tape: &mut Tape,
    attr_rows: Var,
    obj_rows: Var,
    split: &PrimitiveSplit,
) -> Result<Var, LossError> {
    let a = opl_branch(tape, attr_rows, &split.attr_head, &split.attr_tail)?;
    let o = opl_branch(tape, obj_rows, &split.obj_head, &split.obj_tail)?;
    join_branches(tape, a, o)
}

fn opl_branch(
    tape: &mut Tape,
    rows: Var,
    head: &[usize],
    tail: &[usize],
) -> Result<Option<Var>, LossError> {
    if head.is_empty() || tail.is_empty() {
        return Ok(None);
    }
    let unit = tape.normalize_rows(rows)?;
    let h = tape.gather_rows(unit, head)?;
    let t = tape.gather_rows(unit, tail)?;
    let tt = tape.transpose(t)?;
    let gram = tape.matmul(h, tt)?;
    let mag = tape.abs(gram)?;
    let sum = tape.sum_all(mag)?;
    Ok(Some(tape.affine_scalar(sum, 1.0 / (head.len() * tail.len()) as f64, 0.0)?))
}

/// Diversification pressure within the session's new rows: the mean absolute
/// cosine over distinct tail pairs, attributes plus objects. Branches with
/// fewer than two new rows contribute zero.
pub fn idl(
    tape: &mut Tape,
    attr_rows: Var,
    obj_rows: Var,
    split: &PrimitiveSplit,
) -> Result<Var, LossError> {
    let a = idl_branch(tape, attr_rows, &split.attr_tail)?;
    let o = idl_branch(tape, obj_rows, &split.obj_tail)?;
    join_branches(tape, a, o)
}

fn idl_branch(tape: &mut Tape, rows: Var, tail: &[usize]) -> Result<Option<Var>, LossError> {
    let n = tail.len();
    if n < 2 {
        return Ok(None);
    }
    let unit = tape.normalize_rows(rows)?;
    let t = tape.gather_rows(unit, tail)?;
    let tt = tape.transpose(t)?;
    let gram = tape.matmul(t, tt)?;
    let mag = tape.abs(gram)?;
    // Zero out self-similarity so only distinct pairs count.
    let mut mask = vec![1.0; n * n];
    for i in 0..n {
        mask[i * n + i] = 0.0;
    }
    let keep = tape.constant(vec![n, n], mask)?;
    let off = tape.mul(mag, keep)?;
    let sum = tape.sum_all(off)?;
    Ok(Some(tape.affine_scalar(sum, 1.0 / (n * n - n) as f64, 0.0)?))
}

fn join_branches(tape: &mut Tape, a: Option<Var>, o: Option<Var>) -> Result<Var, LossError> {
    match (a, o) {
        (Some(a), Some(o)) => Ok(tape.add(a, o)?),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => Ok(tape.constant_scalar(0.0)?),
    }
}

/// The five scalar components, each already a scalar on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub ce: Var,
    pub cskd: Var,
    pub cal: Var,
    pub opl: Var,
    pub idl: Var,
}

/// Weighted sum of the five components. Each component must be finite and
/// stay finite once weighted; violations name the offending component.
pub fn total(tape: &mut Tape, parts: &LossComponents, w: &LossWeights) -> Result<Var, LossError> {
    w.validate()?;
    let entries: [(&'static str, Var, f64); 5] = [
        ("ce", parts.ce, w.lambda_ce),
        ("cskd", parts.cskd, w.lambda_kd),
        ("cal", parts.cal, w.lambda_cal),
        ("opl", parts.opl, w.lambda_opl),
        ("idl", parts.idl, w.lambda_idl),
    ];
    let mut weighted = Vec::with_capacity(entries.len());
    for (component, v, lambda) in entries {
        let value = {
            let data = tape.value(v)?;
            if data.len() != 1 {
                return Err(LossError::Num(NumError::NonScalarRoot {
                    shape: tape.shape_of(v)?.to_vec(),
                }));
            }
            data[0]
        };
        if !value.is_finite() || !(lambda * value).is_finite() {
            return Err(LossError::NonFinite { component });
        }
        weighted.push(tape.affine_scalar(v, lambda, 0.0)?);
    }
    Ok(tape.add_n(&weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_with_vars, Mode, ModelVars, SawMode};
    use crate::numcore::grad_check;
    use crate::prompts::{init_bank, BankVars};
    use crate::rng::chacha;
    use crate::world::{build_space, render_sample, spawn_world, split_constrained};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        // Box-Muller pairs; plenty for test fixtures.
        (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    }

    fn unwrap_num(e: LossError) -> NumError {
        match e {
            LossError::Num(n) => n,
            other => panic!("expected numeric error, got {other}"),
        }
    }

    /// Hand bank with fully controlled rows; compositions pair id 0 with 0.
    fn bank_from_rows(
        d: usize,
        attr: &[(usize, Vec<f64>)],
        obj: &[(usize, Vec<f64>)],
        seed: u64,
    ) -> PromptBank {
        let attr_ids: Vec<usize> = attr.iter().map(|(id, _)| *id).collect();
        let obj_ids: Vec<usize> = obj.iter().map(|(id, _)| *id).collect();
        let flat_a: Vec<f64> = attr.iter().flat_map(|(_, r)| r.clone()).collect();
        let flat_o: Vec<f64> = obj.iter().flat_map(|(_, r)| r.clone()).collect();
        let m = 2;
        let mut rng = chacha(seed);
        let prefix = |rng: &mut ChaCha8Rng| {
            Tensor::param(vec![m, d], normal_vec(rng, m * d).iter().map(|v| v * 0.02).collect())
                .unwrap()
        };
        PromptBank::from_parts(
            d,
            m,
            seed,
            attr_ids,
            obj_ids,
            vec![],
            Tensor::param(vec![attr.len(), d], flat_a).unwrap(),
            Tensor::param(vec![obj.len(), d], flat_o).unwrap(),
            [prefix(&mut rng), prefix(&mut rng), prefix(&mut rng)],
        )
        .unwrap()
    }

    fn basis_row(d: usize, axis: usize) -> Vec<f64> {
        let mut r = vec![0.0; d];
        r[axis] = 1.0;
        r
    }

    #[test]
    fn defaults_match_reported_configuration() {
        let w = LossWeights::default();
        assert_eq!(w.alpha_a, 1.0);
        assert_eq!(w.alpha_o, 1.0);
        assert_eq!(w.alpha_c, 1.0);
        assert_eq!(w.lambda_ce, 0.35);
        assert_eq!(w.lambda_kd, 0.65);
        assert_eq!(w.lambda_cal, 0.05);
        assert_eq!(w.lambda_opl, 0.05);
        assert_eq!(w.lambda_idl, 0.005);
        assert_eq!(w.lambda_a, 1.0);
        assert_eq!(w.lambda_o, 1.0);
        assert_eq!(w.lambda_c, 1.0);
        assert_eq!(w.tau_kd, 2.0);
        assert_eq!(w.recency_gamma, 0.5);
        w.validate().unwrap();
    }

    #[test]
    fn validate_rejects_out_of_domain_weights() {
        let mut w = LossWeights::default();
        w.alpha_a = -0.1;
        assert!(matches!(w.validate(), Err(LossError::BadWeights { what: "alpha_a", .. })));
        let mut w = LossWeights::default();
        w.tau_kd = 0.0;
        assert!(matches!(w.validate(), Err(LossError::BadWeights { what: "tau_kd", .. })));
        let mut w = LossWeights::default();
        w.recency_gamma = 0.0;
        assert!(matches!(w.validate(), Err(LossError::BadWeights { what: "recency_gamma", .. })));
        let mut w = LossWeights::default();
        w.recency_gamma = 1.5;
        assert!(matches!(w.validate(), Err(LossError::BadWeights { what: "recency_gamma", .. })));
    }

    #[test]
    fn recency_weights_follow_geometric_decay() {
        assert!(recency_weights(0, 0.5).unwrap().is_empty());
        assert_eq!(recency_weights(1, 0.5).unwrap(), vec![1.0]);
        let two = recency_weights(2, 0.5).unwrap();
        assert!((two[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((two[1] - 2.0 / 3.0).abs() < 1e-15);
        for n in 1..=10 {
            for gamma in [0.25, 0.5, 0.9] {
                let pi = recency_weights(n, gamma).unwrap();
                let sum: f64 = pi.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                for pair in pi.windows(2) {
                    assert!(pair[0] < pair[1], "older teacher outweighed newer at n={n}");
                }
            }
        }
        assert!(recency_weights(3, 0.0).is_err());
    }

    /// Bank over a full 2x2 space with all four compositions known.
    fn two_by_two_bank(d: usize) -> PromptBank {
        let space = build_space(names("a", 2), names("o", 2), None).unwrap();
        let session = SessionSpec {
            index: 0,
            attrs: vec![0, 1],
            objs: vec![0, 1],
            seen: vec![(0, 0), (0, 1), (1, 0)],
            unseen: vec![(1, 1)],
            val: vec![],
        };
        init_bank(&space, &session, d, 2, 11).unwrap()
    }

    fn logits_from(
        tape: &mut Tape,
        za: &[f64],
        zo: &[f64],
        zc: &[f64],
        tau: f64,
    ) -> SampleLogits {
        let z_a = tape.constant_vec(za).unwrap();
        let z_o = tape.constant_vec(zo).unwrap();
        let z_c = tape.constant_vec(zc).unwrap();
        SampleLogits {
            z_a,
            z_o,
            z_c,
            p_a: tape.softmax_t(z_a, tau).unwrap(),
            p_o: tape.softmax_t(z_o, tau).unwrap(),
            p_c: tape.softmax_t(z_c, tau).unwrap(),
        }
    }

    #[test]
    fn ce_perfect_prediction_costs_nothing() {
        let space = build_space(names("a", 1), names("o", 1), None).unwrap();
        let session = SessionSpec {
            index: 0,
            attrs: vec![0],
            objs: vec![0],
            seen: vec![(0, 0)],
            unseen: vec![],
            val: vec![],
        };
        let bank = init_bank(&space, &session, 4, 2, 3).unwrap();
        let mut tape = Tape::new();
        let s = logits_from(&mut tape, &[0.0], &[0.0], &[0.0], 1.0);
        let v = ce_total(&mut tape, &[s], &[(0, 0)], &bank, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(v).unwrap()[0], 0.0);
    }

    #[test]
    fn ce_uniform_composition_probs_cost_ln_k() {
        let bank = two_by_two_bank(4);
        let k = bank.comp_index().len();
        assert_eq!(k, 4);
        let mut w = LossWeights::default();
        w.alpha_a = 0.0;
        w.alpha_o = 0.0;
        let mut tape = Tape::new();
        let s = logits_from(&mut tape, &[0.0; 2], &[0.0; 2], &[0.0; 4], 1.0);
        let v = ce_total(&mut tape, &[s], &[(1, 0)], &bank, &w).unwrap();
        assert!((tape.value(v).unwrap()[0] - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_direct_summation_oracle() {
        let bank = two_by_two_bank(4);
        let w = LossWeights::default();
        let tau = 0.7;
        let mut rng = chacha(21);
        let labels = [(0usize, 0usize), (1, 1), (0, 1), (1, 0), (1, 1)];
        let mut tape = Tape::new();
        let mut per_sample = Vec::new();
        let mut expected = 0.0;
        for &(a, o) in &labels {
            let za = normal_vec(&mut rng, 2);
            let zo = normal_vec(&mut rng, 2);
            let zc = normal_vec(&mut rng, 4);
            let pa = softmax_plain(&za.iter().map(|z| z / tau).collect::<Vec<_>>());
            let po = softmax_plain(&zo.iter().map(|z| z / tau).collect::<Vec<_>>());
            let pc = softmax_plain(&zc.iter().map(|z| z / tau).collect::<Vec<_>>());
            expected += -w.alpha_a * pa[bank.attr_slot(a).unwrap()].ln()
                - w.alpha_o * po[bank.obj_slot(o).unwrap()].ln()
                - w.alpha_c * pc[bank.comp_slot((a, o)).unwrap()].ln();
            per_sample.push(logits_from(&mut tape, &za, &zo, &zc, tau));
        }
        expected /= labels.len() as f64;
        let v = ce_total(&mut tape, &per_sample, &labels, &bank, &w).unwrap();
        assert!((tape.value(v).unwrap()[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn ce_reports_labels_the_bank_never_met() {
        let bank = two_by_two_bank(4);
        let mut tape = Tape::new();
        let s = logits_from(&mut tape, &[0.0; 2], &[0.0; 2], &[0.0; 4], 1.0);
        let err = ce_total(&mut tape, &[s], &[(5, 0)], &bank, &LossWeights::default());
        assert!(matches!(err, Err(LossError::UnknownLabel { what: "attribute", .. })));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let bank = two_by_two_bank(4);
        let w = LossWeights::default();
        let mut rng = chacha(31);
        let params = vec![
            Tensor::param(vec![2], normal_vec(&mut rng, 2)).unwrap(),
            Tensor::param(vec![2], normal_vec(&mut rng, 2)).unwrap(),
            Tensor::param(vec![4], normal_vec(&mut rng, 4)).unwrap(),
        ];
        let rel = grad_check(&params, 1e-5, |tape, vars| {
            let s = SampleLogits {
                z_a: vars[0],
                z_o: vars[1],
                z_c: vars[2],
                p_a: tape.softmax_t(vars[0], 0.8)?,
                p_o: tape.softmax_t(vars[1], 0.8)?,
                p_c: tape.softmax_t(vars[2], 0.8)?,
            };
            ce_total(tape, &[s], &[(1, 0)], &bank, &w).map_err(unwrap_num)
        })
        .unwrap();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn cskd_identical_slices_vanish() {
        let mut rng = chacha(41);
        let z: Vec<f64> = normal_vec(&mut rng, 5);
        let mut tape = Tape::new();
        let zs = tape.constant_vec(&z).unwrap();
        let overlap: Vec<(usize, usize)> = (0..5).map(|i| (i, i)).collect();
        let v = cskd_branch(&mut tape, &z, zs, &overlap, 2.0).unwrap();
        assert!(tape.value(v).unwrap()[0].abs() < 1e-9);
    }

    #[test]
    fn cskd_matches_hand_kl() {
        // Teacher [ln 2, 0] gives probs [2/3, 1/3]; student is uniform.
        let mut tape = Tape::new();
        let zs = tape.constant_vec(&[0.0, 0.0]).unwrap();
        let v = cskd_branch(&mut tape, &[2.0f64.ln(), 0.0], zs, &[(0, 0), (1, 1)], 1.0).unwrap();
        let expected = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((tape.value(v).unwrap()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.056_633_012_265_132_4).abs() < 1e-15);
    }

    #[test]
    fn cskd_never_goes_negative() {
        let mut rng = chacha(43);
        let overlap: Vec<(usize, usize)> = (0..4).map(|i| (i, i)).collect();
        for trial in 0..1000 {
            let zt = normal_vec(&mut rng, 4);
            let zs = normal_vec(&mut rng, 4);
            let tau = [0.7, 1.0, 2.0][trial % 3];
            let mut tape = Tape::new();
            let s = tape.constant_vec(&zs).unwrap();
            let v = cskd_branch(&mut tape, &zt, s, &overlap, tau).unwrap();
            assert!(tape.value(v).unwrap()[0] >= -1e-12);
        }
    }

    #[test]
    fn cskd_empty_overlap_contributes_zero() {
        let mut tape = Tape::new();
        let zs = tape.constant_vec(&[1.0, -1.0]).unwrap();
        let v = cskd_branch(&mut tape, &[0.5], zs, &[], 2.0).unwrap();
        assert_eq!(tape.value(v).unwrap()[0], 0.0);
    }

    #[test]
    fn cskd_gradient_matches_finite_differences() {
        let mut rng = chacha(47);
        let zt = normal_vec(&mut rng, 6);
        let params = vec![Tensor::param(vec![6], normal_vec(&mut rng, 6)).unwrap()];
        let overlap: Vec<(usize, usize)> = vec![(0, 1), (2, 3), (5, 4), (3, 0)];
        let rel = grad_check(&params, 1e-5, |tape, vars| {
            cskd_branch(tape, &zt, vars[0], &overlap, 2.0).map_err(unwrap_num)
        })
        .unwrap();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    /// Two-session world with a frozen teacher per session boundary.
    struct ContinualFix {
        latents: WorldLatents,
        teacher0: TeacherSnapshot,
        student: Model,
        partition1: HeadTailPartition,
        batch: Vec<Sample>,
    }

    fn continual_fixture(d: usize, l: usize) -> ContinualFix {
        let space = build_space(names("a", 4), names("o", 3), None).unwrap();
        let sessions = split_constrained(&space, 2, 3, 0.5).unwrap();
        let latents = spawn_world(&space, d, l, 0.05, 77).unwrap();
        let mut bank = PromptBank::empty(d, 2, 5).unwrap();
        let p0 = bank.expand(&space, &sessions[0]).unwrap();
        let model0 = Model::new(bank.clone(), 1.0, 0.0, SawMode::TailOnly, 13).unwrap();
        let teacher0 = TeacherSnapshot::freeze(0, &model0, &p0);
        let p1 = bank.expand(&space, &sessions[1]).unwrap();
        let student = Model::new(bank, 1.0, 0.0, SawMode::TailOnly, 13).unwrap();
        let comp = sessions[0].seen[0];
        let batch: Vec<Sample> =
            (0..3).map(|k| render_sample(&latents, comp, k).unwrap()).collect();
        ContinualFix { latents, teacher0, student, partition1: p1, batch }
    }

    #[test]
    fn cskd_total_matches_hand_aggregation() {
        let fix = continual_fixture(6, 3);
        let teacher1 = TeacherSnapshot::freeze(1, &fix.student, &fix.partition1);
        let logits0 = fix.teacher0.eval_logits(&fix.latents, &fix.batch).unwrap();
        let logits1 = teacher1.eval_logits(&fix.latents, &fix.batch).unwrap();
        let w = LossWeights { lambda_a: 0.5, lambda_o: 2.0, ..LossWeights::default() };
        let pi = recency_weights(2, w.recency_gamma).unwrap();

        let mut tape = Tape::new();
        let out = fix
            .student
            .forward_eval(&mut tape, &fix.latents, &fix.batch, &fix.partition1)
            .unwrap();
        let targets = [
            TeacherTargets { snapshot: &fix.teacher0, logits: &logits0 },
            TeacherTargets { snapshot: &teacher1, logits: &logits1 },
        ];
        let v = cskd_total(&mut tape, &fix.student.bank, &out.per_sample, &targets, &pi, &w)
            .unwrap();
        let got = tape.value(v).unwrap()[0];

        // Hand aggregation: per-teacher, per-branch batch means mixed by
        // lambda and pi, assembled in plain f64.
        let mut expected = 0.0;
        for (t, logits) in [(&fix.teacher0, &logits0), (&teacher1, &logits1)] {
            let maps = overlap_maps(t.bank(), &fix.student.bank);
            let idx = targets.iter().position(|x| std::ptr::eq(x.logits, logits.as_slice()));
            let pi_t = pi[idx.unwrap()];
            let mut per_branch = 0.0;
            for (lam, overlap, pick_t, pick_s) in [
                (w.lambda_a, &maps.attrs, 0, 0),
                (w.lambda_o, &maps.objs, 1, 1),
                (w.lambda_c, &maps.comps, 2, 2),
            ] {
                let mut mean = 0.0;
                for (tl, sl) in logits.iter().zip(&out.per_sample) {
                    let t_branch = [&tl.z_a, &tl.z_o, &tl.z_c][pick_t];
                    let s_branch = [sl.z_a, sl.z_o, sl.z_c][pick_s];
                    let mut kt = Tape::new();
                    let sv = kt.constant_vec(tape.value(s_branch).unwrap()).unwrap();
                    let kl = cskd_branch(&mut kt, t_branch, sv, overlap, w.tau_kd).unwrap();
                    mean += kt.value(kl).unwrap()[0];
                }
                per_branch += lam * mean / fix.batch.len() as f64;
            }
            expected += pi_t * per_branch;
        }
        assert!((got - expected).abs() < 1e-10, "got {got}, expected {expected}");
    }

    #[test]
    fn cskd_total_self_distillation_vanishes() {
        let fix = continual_fixture(6, 3);
        let own = TeacherSnapshot::freeze(1, &fix.student, &fix.partition1);
        let logits = own.eval_logits(&fix.latents, &fix.batch).unwrap();
        let mut tape = Tape::new();
        let out = fix
            .student
            .forward_eval(&mut tape, &fix.latents, &fix.batch, &fix.partition1)
            .unwrap();
        let targets = [TeacherTargets { snapshot: &own, logits: &logits }];
        let v = cskd_total(
            &mut tape,
            &fix.student.bank,
            &out.per_sample,
            &targets,
            &[1.0],
            &LossWeights::default(),
        )
        .unwrap();
        assert!(tape.value(v).unwrap()[0].abs() < 1e-9);
    }

    #[test]
    fn cskd_total_rejects_mismatched_recency_weights() {
        let fix = continual_fixture(6, 3);
        let mut tape = Tape::new();
        let out = fix
            .student
            .forward_eval(&mut tape, &fix.latents, &fix.batch, &fix.partition1)
            .unwrap();
        let err = cskd_total(
            &mut tape,
            &fix.student.bank,
            &out.per_sample,
            &[],
            &[1.0],
            &LossWeights::default(),
        );
        assert!(matches!(err, Err(LossError::BatchMismatch { .. })));
    }

    #[test]
    fn cal_identical_banks_vanish() {
        let bank = two_by_two_bank(6);
        let mut tape = Tape::new();
        let vars = bank.vars(&mut tape);
        let v = cal_one(&mut tape, vars.attr_rows, vars.obj_rows, &bank, &bank).unwrap();
        assert!(tape.value(v).unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn cal_orthogonal_row_contributes_one() {
        let d = 4;
        // Same attribute id 7, rotated 90 degrees; object ids are disjoint.
        let student =
            bank_from_rows(d, &[(7, basis_row(d, 1))], &[(0, basis_row(d, 2))], 1);
        let teacher =
            bank_from_rows(d, &[(7, basis_row(d, 0))], &[(9, basis_row(d, 3))], 2);
        let mut tape = Tape::new();
        let vars = student.vars(&mut tape);
        let v = cal_one(&mut tape, vars.attr_rows, vars.obj_rows, &student, &teacher).unwrap();
        assert!((tape.value(v).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cal_ignores_positive_rescaling_of_student_rows() {
        let d = 6;
        let mut rng = chacha(53);
        let base: Vec<f64> = normal_vec(&mut rng, d);
        let teacher = bank_from_rows(d, &[(3, normal_vec(&mut rng, d))], &[], 4);
        let mut reference = None;
        for scale in [1.0, 0.1, 10.0] {
            let scaled: Vec<f64> = base.iter().map(|v| v * scale).collect();
            let student = bank_from_rows(d, &[(3, scaled)], &[], 5);
            let mut tape = Tape::new();
            let vars = student.vars(&mut tape);
            let v =
                cal_one(&mut tape, vars.attr_rows, vars.obj_rows, &student, &teacher).unwrap();
            let got = tape.value(v).unwrap()[0];
            match reference {
                None => reference = Some(got),
                Some(r) => assert!((got - r).abs() < 1e-9, "scale {scale} moved cal"),
            }
        }
    }

    #[test]
    fn cal_rejects_zero_norm_rows() {
        let d = 4;
        let student = bank_from_rows(d, &[(3, vec![0.0; d])], &[], 6);
        let teacher = bank_from_rows(d, &[(3, basis_row(d, 0))], &[], 7);
        let mut tape = Tape::new();
        let vars = student.vars(&mut tape);
        let err = cal_one(&mut tape, vars.attr_rows, vars.obj_rows, &student, &teacher);
        assert!(matches!(err, Err(LossError::Num(NumError::Domain { op: "cosine", .. }))));
    }

    #[test]
    fn cal_total_weights_teachers_by_recency() {
        let d = 5;
        let mut rng = chacha(59);
        let student = bank_from_rows(
            d,
            &[(0, normal_vec(&mut rng, d)), (1, normal_vec(&mut rng, d))],
            &[(0, normal_vec(&mut rng, d))],
            8,
        );
        let t0 = bank_from_rows(d, &[(0, normal_vec(&mut rng, d))], &[], 9);
        let t1 = bank_from_rows(
            d,
            &[(1, normal_vec(&mut rng, d))],
            &[(0, normal_vec(&mut rng, d))],
            10,
        );
        let pi = recency_weights(2, 0.5).unwrap();
        let mut tape = Tape::new();
        let vars = student.vars(&mut tape);
        let v = cal_total(&mut tape, vars.attr_rows, vars.obj_rows, &student, &[&t0, &t1], &pi)
            .unwrap();
        let c0 = cal_one(&mut tape, vars.attr_rows, vars.obj_rows, &student, &t0).unwrap();
        let c1 = cal_one(&mut tape, vars.attr_rows, vars.obj_rows, &student, &t1).unwrap();
        let expected =
            pi[0] * tape.value(c0).unwrap()[0] + pi[1] * tape.value(c1).unwrap()[0];
        assert!((tape.value(v).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn cal_gradient_matches_finite_differences() {
        let d = 5;
        let mut rng = chacha(61);
        let teacher = bank_from_rows(
            d,
            &[(0, normal_vec(&mut rng, d)), (2, normal_vec(&mut rng, d))],
            &[(1, normal_vec(&mut rng, d))],
            11,
        );
        let student = bank_from_rows(
            d,
            &[(0, normal_vec(&mut rng, d)), (2, normal_vec(&mut rng, d))],
            &[(1, normal_vec(&mut rng, d)), (3, normal_vec(&mut rng, d))],
            12,
        );
        let params =
            vec![student.attr_rows().clone(), student.obj_rows().clone()];
        let rel = grad_check(&params, 1e-5, |tape, vars| {
            cal_one(tape, vars[0], vars[1], &student, &teacher).map_err(unwrap_num)
        })
        .unwrap();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    fn rows_tensor(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::param(vec![n, d], normal_vec(rng, n * d)).unwrap()
    }

    #[test]
    fn opl_orthonormal_split_vanishes() {
        let d = 4;
        let rows = Tensor::param(vec![2, d], [basis_row(d, 0), basis_row(d, 1)].concat()).unwrap();
        let split = PrimitiveSplit {
            attr_head: vec![0],
            attr_tail: vec![1],
            obj_head: vec![],
            obj_tail: vec![0],
        };
        let mut tape = Tape::new();
        let a = tape.leaf(&rows);
        let o = tape.leaf(&rows);
        let v = opl(&mut tape, a, o, &split).unwrap();
        assert_eq!(tape.value(v).unwrap()[0], 0.0);
    }

    #[test]
    fn opl_duplicated_row_pair_contributes_one() {
        let d = 4;
        let mut rng = chacha(67);
        let r = normal_vec(&mut rng, d);
        let rows = Tensor::param(vec![2, d], [r.clone(), r].concat()).unwrap();
        let split = PrimitiveSplit {
            attr_head: vec![0],
            attr_tail: vec![1],
            ..PrimitiveSplit::default()
        };
        let mut tape = Tape::new();
        let a = tape.leaf(&rows);
        let o = tape.leaf(&rows);
        let v = opl(&mut tape, a, o, &split).unwrap();
        assert!((tape.value(v).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    fn abs_cos(u: &[f64], v: &[f64]) -> f64 {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (dot / (nu * nv)).abs()
    }

    #[test]
    fn opl_matches_double_loop_oracle() {
        let d = 7;
        let mut rng = chacha(71);
        let attr = rows_tensor(&mut rng, 5, d);
        let obj = rows_tensor(&mut rng, 4, d);
        let split = PrimitiveSplit {
            attr_head: vec![0, 2],
            attr_tail: vec![1, 3, 4],
            obj_head: vec![3, 0],
            obj_tail: vec![1, 2],
        };
        let mut expected = 0.0;
        for (rows, head, tail) in [
            (&attr, &split.attr_head, &split.attr_tail),
            (&obj, &split.obj_head, &split.obj_tail),
        ] {
            let mut sum = 0.0;
            for &i in head {
                for &j in tail {
                    sum += abs_cos(rows.row(i).unwrap(), rows.row(j).unwrap());
                }
            }
            expected += sum / (head.len() * tail.len()) as f64;
        }
        let mut tape = Tape::new();
        let a = tape.leaf(&attr);
        let o = tape.leaf(&obj);
        let v = opl(&mut tape, a, o, &split).unwrap();
        assert!((tape.value(v).unwrap()[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn opl_empty_sides_contribute_zero() {
        let d = 4;
        let mut rng = chacha(73);
        let rows = rows_tensor(&mut rng, 3, d);
        // First-session shape: nothing inherited, everything is new.
        let split = PrimitiveSplit {
            attr_head: vec![],
            attr_tail: vec![0, 1, 2],
            obj_head: vec![],
            obj_tail: vec![0, 1, 2],
        };
        let mut tape = Tape::new();
        let a = tape.leaf(&rows);
        let o = tape.leaf(&rows);
        let v = opl(&mut tape, a, o, &split).unwrap();
        assert_eq!(tape.value(v).unwrap()[0], 0.0);
    }

    #[test]
    fn opl_gradient_matches_finite_differences() {
        let d = 6;
        let mut rng = chacha(79);
        let params = vec![rows_tensor(&mut rng, 4, d), rows_tensor(&mut rng, 3, d)];
        let split = PrimitiveSplit {
            attr_head: vec![0, 1],
            attr_tail: vec![2, 3],
            obj_head: vec![0],
            obj_tail: vec![1, 2],
        };
        let rel = grad_check(&params, 1e-5, |tape, vars| {
            opl(tape, vars[0], vars[1], &split).map_err(unwrap_num)
        })
        .unwrap();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn opl_descends_under_its_own_gradient() {
        let d = 16;
        let split = PrimitiveSplit {
            attr_head: vec![0, 1, 2],
            attr_tail: vec![3, 4],
            obj_head: vec![0, 1],
            obj_tail: vec![2, 3],
        };
        let lambda = 0.05;
        let lr = 1e-3;
        for seed in [83, 89, 97, 101, 103] {
            let mut rng = chacha(seed);
            let mut attr = rows_tensor(&mut rng, 5, d);
            let mut obj = rows_tensor(&mut rng, 4, d);
            let value = |attr: &Tensor, obj: &Tensor| {
                let mut tape = Tape::new();
                let a = tape.leaf(attr);
                let o = tape.leaf(obj);
                let v = opl(&mut tape, a, o, &split).unwrap();
                tape.value(v).unwrap()[0]
            };
            let before = value(&attr, &obj);
            assert!(before > 0.1, "fixture {seed} too orthogonal already: {before}");
            let mut tape = Tape::new();
            let a = tape.leaf(&attr);
            let o = tape.leaf(&obj);
            let raw = opl(&mut tape, a, o, &split).unwrap();
            let scaled = tape.affine_scalar(raw, lambda, 0.0).unwrap();
            let grads = tape.backward(scaled).unwrap();
            let ga = grads.of(a).unwrap().to_vec();
            let go = grads.of(o).unwrap().to_vec();
            let step = |t: &mut Tensor, g: &[f64]| {
                let moved: Vec<f64> =
                    t.data().iter().zip(g).map(|(x, gi)| x - lr * gi).collect();
                t.set_data(&moved).unwrap();
            };
            step(&mut attr, &ga);
            step(&mut obj, &go);
            let after = value(&attr, &obj);
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn idl_single_new_row_contributes_zero() {
        let d = 4;
        let mut rng = chacha(107);
        let rows = rows_tensor(&mut rng, 2, d);
        let split = PrimitiveSplit { attr_tail: vec![1], ..PrimitiveSplit::default() };
        let mut tape = Tape::new();
        let a = tape.leaf(&rows);
        let o = tape.leaf(&rows);
        let v = idl(&mut tape, a, o, &split).unwrap();
        assert_eq!(tape.value(v).unwrap()[0], 0.0);
    }

    #[test]
    fn idl_identical_pair_contributes_one() {
        let d = 5;
        let mut rng = chacha(109);
        let r = normal_vec(&mut rng, d);
        let rows = Tensor::param(vec![2, d], [r.clone(), r].concat()).unwrap();
        let split = PrimitiveSplit { attr_tail: vec![0, 1], ..PrimitiveSplit::default() };
        let mut tape = Tape::new();
        let a = tape.leaf(&rows);
        let o = tape.leaf(&rows);
        let v = idl(&mut tape, a, o, &split).unwrap();
        assert!((tape.value(v).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn idl_matches_pair_enumeration_oracle() {
        let d = 6;
        let mut rng = chacha(113);
        let attr = rows_tensor(&mut rng, 4, d);
        let obj = rows_tensor(&mut rng, 5, d);
        let split = PrimitiveSplit {
            attr_head: vec![0],
            attr_tail: vec![1, 2, 3],
            obj_head: vec![4],
            obj_tail: vec![0, 1, 2, 3],
        };
        let mut expected = 0.0;
        for (rows, tail) in [(&attr, &split.attr_tail), (&obj, &split.obj_tail)] {
            let n = tail.len();
            let mut sum = 0.0;
            for &i in tail {
                for &j in tail {
                    if i != j {
                        sum += abs_cos(rows.row(i).unwrap(), rows.row(j).unwrap());
                    }
                }
            }
            expected += sum / (n * n - n) as f64;
        }
        let mut tape = Tape::new();
        let a = tape.leaf(&attr);
        let o = tape.leaf(&obj);
        let v = idl(&mut tape, a, o, &split).unwrap();
        assert!((tape.value(v).unwrap()[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn idl_gradient_matches_finite_differences() {
        let d = 6;
        let mut rng = chacha(127);
        let params = vec![rows_tensor(&mut rng, 4, d), rows_tensor(&mut rng, 3, d)];
        let split = PrimitiveSplit {
            attr_tail: vec![0, 2, 3],
            obj_tail: vec![0, 1],
            ..PrimitiveSplit::default()
        };
        let rel = grad_check(&params, 1e-5, |tape, vars| {
            idl(tape, vars[0], vars[1], &split).map_err(unwrap_num)
        })
        .unwrap();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn opl_and_idl_stay_in_the_unit_interval() {
        let d = 5;
        for seed in 0..20 {
            let mut rng = chacha(1000 + seed);
            let rows = rows_tensor(&mut rng, 6, d);
            // One branch at a time so the bound applies to a single mean.
            let split = PrimitiveSplit {
                attr_head: vec![0, 1, 2],
                attr_tail: vec![3, 4, 5],
                ..PrimitiveSplit::default()
            };
            let mut tape = Tape::new();
            let a = tape.leaf(&rows);
            let o = tape.leaf(&rows);
            let vo = opl(&mut tape, a, o, &split).unwrap();
            let vi = idl(&mut tape, a, o, &split).unwrap();
            for v in [vo, vi] {
                let x = tape.value(v).unwrap()[0];
                assert!((0.0..=1.0).contains(&x), "seed {seed}: {x} out of bounds");
            }
        }
    }

    #[test]
    fn primitive_split_tracks_session_introductions() {
        let space = build_space(names("a", 4), names("o", 3), None).unwrap();
        let sessions = split_constrained(&space, 2, 3, 0.5).unwrap();
        let mut bank = PromptBank::empty(5, 2, 5).unwrap();
        bank.expand(&space, &sessions[0]).unwrap();
        bank.expand(&space, &sessions[1]).unwrap();
        let split = PrimitiveSplit::from_session(&bank, &sessions[1]).unwrap();
        for &id in &sessions[1].attrs {
            assert!(split.attr_tail.contains(&bank.attr_slot(id).unwrap()));
        }
        assert_eq!(split.attr_head.len() + split.attr_tail.len(), bank.n_attrs());
        assert_eq!(split.obj_head.len() + split.obj_tail.len(), bank.n_objs());

        let ghost = SessionSpec {
            index: 9,
            attrs: vec![99],
            objs: vec![],
            seen: vec![],
            unseen: vec![],
            val: vec![],
        };
        assert!(matches!(
            PrimitiveSplit::from_session(&bank, &ghost),
            Err(LossError::UnknownPrimitive { what: "attribute", id: 99 })
        ));
    }

    #[test]
    fn total_with_zero_mixing_weights_is_zero() {
        let mut tape = Tape::new();
        let c = tape.constant_scalar(3.7).unwrap();
        let parts = LossComponents { ce: c, cskd: c, cal: c, opl: c, idl: c };
        let w = LossWeights {
            lambda_ce: 0.0,
            lambda_kd: 0.0,
            lambda_cal: 0.0,
            lambda_opl: 0.0,
            lambda_idl: 0.0,
            ..LossWeights::default()
        };
        let v = total(&mut tape, &parts, &w).unwrap();
        assert_eq!(tape.value(v).unwrap()[0], 0.0);
    }

    #[test]
    fn total_is_linear_in_each_component() {
        let mut tape = Tape::new();
        let vals = [0.8, 1.3, 0.2, 0.45, 0.9];
        let cs: Vec<Var> = vals.iter().map(|&v| tape.constant_scalar(v).unwrap()).collect();
        let parts = LossComponents { ce: cs[0], cskd: cs[1], cal: cs[2], opl: cs[3], idl: cs[4] };
        let base = LossWeights::default();
        let v0 = total(&mut tape, &parts, &base).unwrap();
        let v0 = tape.value(v0).unwrap()[0];
        let doubles: [(fn(&mut LossWeights) -> &mut f64, f64); 5] = [
            (|w| &mut w.lambda_ce, vals[0]),
            (|w| &mut w.lambda_kd, vals[1]),
            (|w| &mut w.lambda_cal, vals[2]),
            (|w| &mut w.lambda_opl, vals[3]),
            (|w| &mut w.lambda_idl, vals[4]),
        ];
        for (pick, component) in doubles {
            let mut w = base;
            let lambda = *pick(&mut w);
            *pick(&mut w) = lambda * 2.0;
            let v = total(&mut tape, &parts, &w).unwrap();
            let got = tape.value(v).unwrap()[0];
            assert!(
                (got - v0 - lambda * component).abs() < 1e-12,
                "doubling a weight must add exactly its contribution"
            );
        }
    }

    #[test]
    fn total_names_the_component_that_blew_up() {
        let mut tape = Tape::new();
        let ok = tape.constant_scalar(1.0).unwrap();
        let big = tape.constant_scalar(1e200).unwrap();
        let parts = LossComponents { ce: ok, cskd: ok, cal: big, opl: ok, idl: ok };
        let w = LossWeights { lambda_cal: 1e200, ..LossWeights::default() };
        match total(&mut tape, &parts, &w) {
            Err(LossError::NonFinite { component: "cal" }) => {}
            other => panic!("expected the cal component to be named, got {other:?}"),
        }
    }

    /// End to end: every learnable tensor against finite differences through
    /// the full five-term objective on a real two-session fixture.
    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let fix = continual_fixture(6, 3);
        let logits0 = fix.teacher0.eval_logits(&fix.latents, &fix.batch).unwrap();
        let w = LossWeights::default();
        let pi = recency_weights(1, w.recency_gamma).unwrap();
        let space = build_space(names("a", 4), names("o", 3), None).unwrap();
        let sessions = split_constrained(&space, 2, 3, 0.5).unwrap();
        let split = PrimitiveSplit::from_session(&fix.student.bank, &sessions[1]).unwrap();
        let labels: Vec<(usize, usize)> =
            fix.batch.iter().map(|s| (s.attr, s.obj)).collect();

        let mut params = Vec::new();
        let mut model = fix.student.clone();
        model.visit_params_mut(|_, t| params.push(t.clone()));
        let teacher_banks = [fix.teacher0.bank()];
        let rel = grad_check(&params, 1e-5, |tape, vars| {
            let mv = ModelVars {
                bank: BankVars {
                    attr_rows: vars[0],
                    obj_rows: vars[1],
                    prefix_a: vars[2],
                    prefix_o: vars[3],
                    prefix_c: vars[4],
                },
                attr_head: crate::model::HeadVars {
                    w: vars[5],
                    b: vars[6],
                    scale: vars[7],
                    shift: vars[8],
                },
                obj_head: crate::model::HeadVars {
                    w: vars[9],
                    b: vars[10],
                    scale: vars[11],
                    shift: vars[12],
                },
                sag: crate::model::FusionVars {
                    w_q: vars[13],
                    w_k: vars[14],
                    w_v: vars[15],
                    mlp_w1: vars[16],
                    mlp_b1: vars[17],
                    mlp_w2: vars[18],
                    mlp_b2: vars[19],
                },
                saw: crate::model::FusionVars {
                    w_q: vars[20],
                    w_k: vars[21],
                    w_v: vars[22],
                    mlp_w1: vars[23],
                    mlp_b1: vars[24],
                    mlp_w2: vars[25],
                    mlp_b2: vars[26],
                },
                beta: vars[27],
            };
            let (out, _) = forward_with_vars(
                tape,
                &mv,
                &fix.student.bank,
                &fix.student.heads,
                fix.student.tau,
                fix.student.saw_mode,
                &fix.latents,
                &fix.batch,
                &fix.partition1,
                Mode::Train,
                71,
            )
            .map_err(|e| match e {
                ModelError::Num(n) => n,
                other => panic!("{other}"),
            })?;
            let targets = [TeacherTargets { snapshot: &fix.teacher0, logits: &logits0 }];
            let parts = LossComponents {
                ce: ce_total(tape, &out.per_sample, &labels, &fix.student.bank, &w)
                    .map_err(unwrap_num)?,
                cskd: cskd_total(tape, &fix.student.bank, &out.per_sample, &targets, &pi, &w)
                    .map_err(unwrap_num)?,
                cal: cal_total(
                    tape,
                    mv.bank.attr_rows,
                    mv.bank.obj_rows,
                    &fix.student.bank,
                    &teacher_banks,
                    &pi,
                )
                .map_err(unwrap_num)?,
                opl: opl(tape, mv.bank.attr_rows, mv.bank.obj_rows, &split)
                    .map_err(unwrap_num)?,
                idl: idl(tape, mv.bank.attr_rows, mv.bank.obj_rows, &split)
                    .map_err(unwrap_num)?,
            };
            total(tape, &parts, &w).map_err(unwrap_num)
        })
        .unwrap();
        assert!(rel < 1e-4, "relative error {rel}");
    }
}
