//! Evaluation protocol: calibrated seen/unseen trade-off curves, AUC,
//! harmonic mean, primitive accuracies, accumulated continual evaluation
//! and the forgetting measure.
//!
//! The protocol is the standard calibrated one for compositional zero-shot
//! recognition: every sample is scored against every known composition, a
//! scalar bias is added to the scores of unseen candidates, and sweeping
//! that bias traces a curve of (seen top-1, unseen top-1) operating points.
//! The sweep is exact, not sampled: the only biases that can change any
//! prediction are the per-sample gaps between the best seen and best unseen
//! score, so the curve is evaluated exactly at those critical values plus
//! two finite sentinels standing in for the infinite limits.
//!
//! Continual evaluation reuses the same machinery: after session t the
//! model is scored on the union of all test sets introduced so far, and
//! per-origin-session slices of those records feed the forgetting matrix.
//!
//! Everything in this module is pure over plain numbers; ties resolve to
//! the lowest candidate index everywhere, including inside the oracle
//! tests, so recomputation from a prediction dump is bit-exact.

use std::collections::BTreeSet;
use std::error::Error;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError};
use crate::numcore::NumError;
use crate::prompts::PromptBank;
use crate::world::{Comp, Sample, WorldLatents};

#[derive(Debug)]
pub enum EvalError {
    Num(NumError),
    Model(ModelError),
    BadWeights { what: &'static str, detail: String },
    Mismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    /// The protocol cannot run on this input (e.g. no unseen candidates).
    Degenerate { what: &'static str },
    /// Records being merged disagree on the candidate space.
    CandidateSpaceMismatch { record: u64 },
    /// A sample's true composition is missing from the candidate set.
    TruthNotCandidate { sample: u64 },
    /// The forgetting matrix lacks an entry.
    MissingEntry { set: usize, expected: usize, got: usize },
    Io(std::io::Error),
    Parse { line: usize, detail: String },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Num(e) => write!(f, "{e}"),
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::BadWeights { what, detail } => {
                write!(f, "inference weight {what}: {detail}")
            }
            EvalError::Mismatch { what, left, right } => {
                write!(f, "{what}: got {left} entries against {right}")
            }
            EvalError::Degenerate { what } => write!(f, "degenerate protocol: {what}"),
            EvalError::CandidateSpaceMismatch { record } => {
                write!(f, "record {record} was scored against a different candidate set")
            }
            EvalError::TruthNotCandidate { sample } => {
                write!(f, "sample {sample}: true composition not in the candidate set")
            }
            EvalError::MissingEntry { set, expected, got } => {
                write!(f, "forgetting row {set}: expected {expected} entries, got {got}")
            }
            EvalError::Io(e) => write!(f, "{e}"),
            EvalError::Parse { line, detail } => write!(f, "dump line {line}: {detail}"),
        }
    }
}

impl Error for EvalError {}

impl From<NumError> for EvalError {
    fn from(e: NumError) -> Self {
        EvalError::Num(e)
    }
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e)
    }
}

/// Mixing weights for the inference score
/// `lambda_c * p_c + lambda_a * p_a * lambda_o * p_o`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceWeights {
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_o: f64,
}

impl Default for InferenceWeights {
    fn default() -> Self {
        InferenceWeights { lambda_c: 1.0, lambda_a: 1.0, lambda_o: 1.0 }
    }
}

impl InferenceWeights {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (what, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_a", self.lambda_a),
            ("lambda_o", self.lambda_o),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EvalError::BadWeights {
                    what,
                    detail: format!("must be finite and nonnegative, got {v}"),
                });
            }
        }
        if self.lambda_c == 0.0 && (self.lambda_a == 0.0 || self.lambda_o == 0.0) {
            return Err(EvalError::BadWeights {
                what: "lambda_c",
                detail: "all score terms vanish; at least one must be active".into(),
            });
        }
        Ok(())
    }
}

/// One evaluated sample: its truth, the candidate space it was scored
/// against, the combined score per candidate, and the raw branch argmaxes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub sample_id: u64,
    pub truth: Comp,
    pub candidates: Vec<Comp>,
    pub scores: Vec<f64>,
    /// Branch top-1 predictions as world ids, independent of the combined
    /// score.
    pub attr_pred: usize,
    pub obj_pred: usize,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.scores.len() != self.candidates.len() {
            return Err(EvalError::Mismatch {
                what: "scores per candidate",
                left: self.scores.len(),
                right: self.candidates.len(),
            });
        }
        if !self.candidates.contains(&self.truth) {
            return Err(EvalError::TruthNotCandidate { sample: self.sample_id });
        }
        Ok(())
    }
}

/// FNV-1a over the candidate pairs; identifies a candidate space cheaply in
/// dumps and merge checks.
pub fn candidates_digest(comps: &[Comp]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &(a, o) in comps {
        for v in [a as u64, o as u64] {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

/// Combined per-candidate score over the bank's composition index:
/// `lambda_c * p_c[c] + lambda_a * p_a[a] * lambda_o * p_o[o]`,
/// exactly in that form.
pub fn combined_score(
    bank: &PromptBank,
    p_a: &[f64],
    p_o: &[f64],
    p_c: &[f64],
    w: &InferenceWeights,
) -> Result<Vec<f64>, EvalError> {
    w.validate()?;
    if p_a.len() != bank.n_attrs() {
        return Err(EvalError::Mismatch {
            what: "attribute probabilities per bank row",
            left: p_a.len(),
            right: bank.n_attrs(),
        });
    }
    if p_o.len() != bank.n_objs() {
        return Err(EvalError::Mismatch {
            what: "object probabilities per bank row",
            left: p_o.len(),
            right: bank.n_objs(),
        });
    }
    if p_c.len() != bank.comp_index().len() {
        return Err(EvalError::Mismatch {
            what: "composition probabilities per candidate",
            left: p_c.len(),
            right: bank.comp_index().len(),
        });
    }
    let mut scores = Vec::with_capacity(p_c.len());
    for (slot, &(a, o)) in bank.comp_index().iter().enumerate() {
        let sa = bank.attr_slot(a).ok_or(EvalError::Degenerate {
            what: "composition references an attribute the bank does not hold",
        })?;
        let so = bank.obj_slot(o).ok_or(EvalError::Degenerate {
            what: "composition references an object the bank does not hold",
        })?;
        scores.push(w.lambda_c * p_c[slot] + w.lambda_a * p_a[sa] * w.lambda_o * p_o[so]);
    }
    Ok(scores)
}

/// First-index argmax; the tie rule every consumer of scores must share.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One operating point of the calibration sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
}

/// The full seen/unseen trade-off curve, biases ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSweepCurve {
    pub points: Vec<CurvePoint>,
}

/// Per-record reduction: best seen and best unseen candidate, with the
/// winning indices under the shared first-index tie rule.
struct RecordSummary {
    truth_seen: bool,
    correct_idx: usize,
    seen_max: f64,
    seen_idx: usize,
    unseen_max: f64,
    unseen_idx: usize,
}

fn summarize(records: &[PredictionRecord], seen: &BTreeSet<Comp>) -> Result<Vec<RecordSummary>, EvalError> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let mut seen_max = f64::NEG_INFINITY;
        let mut seen_idx = usize::MAX;
        let mut unseen_max = f64::NEG_INFINITY;
        let mut unseen_idx = usize::MAX;
        let mut correct_idx = usize::MAX;
        for (i, (cand, &s)) in r.candidates.iter().zip(&r.scores).enumerate() {
            if *cand == r.truth {
                correct_idx = i;
            }
            if seen.contains(cand) {
                if s > seen_max {
                    seen_max = s;
                    seen_idx = i;
                }
            } else if s > unseen_max {
                unseen_max = s;
                unseen_idx = i;
            }
        }
        if seen_idx == usize::MAX {
            return Err(EvalError::Degenerate { what: "no seen candidates to calibrate against" });
        }
        if unseen_idx == usize::MAX {
            return Err(EvalError::Degenerate { what: "no unseen candidates to calibrate" });
        }
        out.push(RecordSummary {
            truth_seen: seen.contains(&r.truth),
            correct_idx,
            seen_max,
            seen_idx,
            unseen_max,
            unseen_idx,
        });
    }
    Ok(out)
}

/// (seen top-1, unseen top-1) at one bias value. Classes without samples
/// score zero.
fn accuracy_at(summaries: &[RecordSummary], bias: f64) -> (f64, f64) {
    let (mut s_hit, mut s_all, mut u_hit, mut u_all) = (0usize, 0usize, 0usize, 0usize);
    for r in summaries {
        let boosted = r.unseen_max + bias;
        // Equal scores fall to the lower candidate index, matching a full
        // first-index argmax over the biased score vector.
        let winner = if r.seen_max > boosted || (r.seen_max == boosted && r.seen_idx < r.unseen_idx)
        {
            r.seen_idx
        } else {
            r.unseen_idx
        };
        let hit = winner == r.correct_idx;
        if r.truth_seen {
            s_all += 1;
            s_hit += usize::from(hit);
        } else {
            u_all += 1;
            u_hit += usize::from(hit);
        }
    }
    let frac = |hit: usize, all: usize| if all == 0 { 0.0 } else { hit as f64 / all as f64 };
    (frac(s_hit, s_all), frac(u_hit, u_all))
}

/// Sweeps the unseen-candidate bias over every critical value. The critical
/// set is the per-sample gaps between the best seen and best unseen score;
/// between adjacent gaps no prediction can change, so the curve is exact.
/// Two finite sentinels one unit outside the gap range stand in for the
/// infinite limits.
pub fn bias_sweep(
    records: &[PredictionRecord],
    seen: &BTreeSet<Comp>,
) -> Result<BiasSweepCurve, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Degenerate { what: "no records to sweep" });
    }
    let summaries = summarize(records, seen)?;
    let mut biases: Vec<f64> = summaries.iter().map(|r| r.seen_max - r.unseen_max).collect();
    let lo = biases.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = biases.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    biases.push(lo);
    biases.push(hi);
    biases.sort_by(f64::total_cmp);
    biases.dedup();
    let points = biases
        .into_iter()
        .map(|bias| {
            let (seen_acc, unseen_acc) = accuracy_at(&summaries, bias);
            CurvePoint { bias, seen: seen_acc, unseen: unseen_acc }
        })
        .collect();
    Ok(BiasSweepCurve { points })
}

/// Trapezoidal area under the (seen, unseen) trade-off, points ordered by
/// seen accuracy. Duplicate points contribute zero width.
pub fn auc(curve: &BiasSweepCurve) -> Result<f64, EvalError> {
    if curve.points.len() < 2 {
        return Err(EvalError::Degenerate { what: "curve needs at least two points" });
    }
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.seen, p.unseen)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    for w in pts.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    Ok(area)
}

/// Best seen accuracy, best unseen accuracy, and the best harmonic mean
/// over the curve's operating points.
pub fn best_hm(curve: &BiasSweepCurve) -> Result<(f64, f64, f64), EvalError> {
    if curve.points.is_empty() {
        return Err(EvalError::Degenerate { what: "empty curve" });
    }
    let mut best_seen = 0.0f64;
    let mut best_unseen = 0.0f64;
    let mut hm = 0.0f64;
    for p in &curve.points {
        best_seen = best_seen.max(p.seen);
        best_unseen = best_unseen.max(p.unseen);
        if p.seen + p.unseen > 0.0 {
            hm = hm.max(2.0 * p.seen * p.unseen / (p.seen + p.unseen));
        }
    }
    Ok((best_seen, best_unseen, hm))
}

/// Branch accuracies plus the conjunction accuracy of the unbiased combined
/// argmax: a composition counts only when both of its primitives are right.
pub fn primitive_acc(records: &[PredictionRecord]) -> Result<(f64, f64, f64), EvalError> {
    if records.is_empty() {
        return Err(EvalError::Degenerate { what: "no records to score" });
    }
    let (mut a_hit, mut o_hit, mut c_hit) = (0usize, 0usize, 0usize);
    for r in records {
        r.validate()?;
        let (ta, to) = r.truth;
        a_hit += usize::from(r.attr_pred == ta);
        o_hit += usize::from(r.obj_pred == to);
        let top = r.candidates[argmax_first(&r.scores)];
        c_hit += usize::from(top == r.truth);
    }
    let n = records.len() as f64;
    Ok((a_hit as f64 / n, o_hit as f64 / n, c_hit as f64 / n))
}

/// Merges per-session record sets evaluated under one model into the
/// accumulated set, enforcing that they share one candidate space.
pub fn czs_accumulate(sets: Vec<Vec<PredictionRecord>>) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut merged = Vec::new();
    let mut digest = None;
    for set in sets {
        for r in set {
            r.validate()?;
            let d = candidates_digest(&r.candidates);
            match digest {
                None => digest = Some(d),
                Some(expect) if expect != d => {
                    return Err(EvalError::CandidateSpaceMismatch { record: r.sample_id })
                }
                _ => {}
            }
            merged.push(r);
        }
    }
    Ok(merged)
}

/// Evaluation scope a report refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalScope {
    /// Single-session zero-shot evaluation.
    Zs,
    /// Accumulated continual evaluation over all sessions so far.
    Czs,
    /// The test slice introduced by one earlier session.
    Slice { origin: usize },
}

/// Scalar metric bundle for one evaluation. All values live in [0, 1];
/// any percentage scaling is presentation only. `unbiased_*` are the
/// accuracies at bias zero, alongside the curve maxima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub session: usize,
    pub scope: EvalScope,
    pub auc: f64,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub hm: f64,
    pub unbiased_seen: f64,
    pub unbiased_unseen: f64,
    pub attr_acc: f64,
    pub obj_acc: f64,
    pub comp_acc: f64,
}

/// Runs the full protocol over one record set.
pub fn report(
    records: &[PredictionRecord],
    seen: &BTreeSet<Comp>,
    session: usize,
    scope: EvalScope,
) -> Result<MetricsReport, EvalError> {
    let curve = bias_sweep(records, seen)?;
    let auc_value = auc(&curve)?;
    let (best_seen, best_unseen, hm) = best_hm(&curve)?;
    let summaries = summarize(records, seen)?;
    let (unbiased_seen, unbiased_unseen) = accuracy_at(&summaries, 0.0);
    let (attr_acc, obj_acc, comp_acc) = primitive_acc(records)?;
    Ok(MetricsReport {
        session,
        scope,
        auc: auc_value,
        best_seen,
        best_unseen,
        hm,
        unbiased_seen,
        unbiased_unseen,
        attr_acc,
        obj_acc,
        comp_acc,
    })
}

/// Forgetting summary: how much AUC each session's test slice lost under
/// every later model. Lower is better; zero means nothing was forgotten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingMatrix {
    /// `rows[i][k]` = AUC of session i's slice under the model of session
    /// i + k; row i has exactly T - i entries.
    pub rows: Vec<Vec<f64>>,
    /// Mean absolute AUC gap of slice i across models t >= i (the t = i
    /// term is zero by definition and included in the mean).
    pub per_set: Vec<f64>,
    pub f_auc: f64,
    /// Always true; carried so downstream consumers render the direction.
    pub lower_is_better: bool,
}

/// Builds the forgetting summary from ragged AUC rows: `rows[i][k]` is the
/// AUC on session i's slice under the model of session i + k.
pub fn forgetting(rows: &[Vec<f64>]) -> Result<ForgettingMatrix, EvalError> {
    let t = rows.len();
    if t == 0 {
        return Err(EvalError::Degenerate { what: "forgetting needs at least one session" });
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != t - i {
            return Err(EvalError::MissingEntry { set: i, expected: t - i, got: row.len() });
        }
    }
    let per_set: Vec<f64> = rows
        .iter()
        .map(|row| {
            let own = row[0];
            row.iter().map(|v| (own - v).abs()).sum::<f64>() / row.len() as f64
        })
        .collect();
    let f_auc = per_set.iter().sum::<f64>() / t as f64;
    Ok(ForgettingMatrix { rows: rows.to_vec(), per_set, f_auc, lower_is_better: true })
}

/// Scores rendered samples under a frozen model and packages them as
/// prediction records over the model's full composition space. `ids` and
/// `samples` are parallel.
pub fn records_from_model(
    model: &Model,
    partition: &crate::prompts::HeadTailPartition,
    latents: &WorldLatents,
    ids: &[u64],
    samples: &[Sample],
    w: &InferenceWeights,
) -> Result<Vec<PredictionRecord>, EvalError> {
    records_scoped(model, partition, latents, ids, samples, w, None)
}

/// One session's label universe as it stood when that session closed: its
/// own compositions plus every primitive slot known by then. Slots are
/// append-only, so counts describe prefixes of the current tables.
///
/// Evaluating an old test slice inside its origin universe measures how
/// well the model still solves that task, independent of how crowded the
/// label space has grown since. This is the reading the per-slice rows of
/// the forgetting summary use; the accumulated continual evaluation keeps
/// the full space as candidates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OriginUniverse {
    /// The origin session's compositions, in bank order.
    pub comps: Vec<Comp>,
    /// Attribute slots known when the origin session closed.
    pub attrs: usize,
    /// Object slots known when the origin session closed.
    pub objs: usize,
}

/// Like [`records_from_model`], but candidates and branch probabilities
/// are restricted to an origin universe. Probabilities are renormalized
/// over the restriction, which equals running the softmax on the
/// restricted logit slice directly.
pub fn records_from_model_within(
    model: &Model,
    partition: &crate::prompts::HeadTailPartition,
    latents: &WorldLatents,
    ids: &[u64],
    samples: &[Sample],
    w: &InferenceWeights,
    origin: &OriginUniverse,
) -> Result<Vec<PredictionRecord>, EvalError> {
    records_scoped(model, partition, latents, ids, samples, w, Some(origin))
}

fn records_scoped(
    model: &Model,
    partition: &crate::prompts::HeadTailPartition,
    latents: &WorldLatents,
    ids: &[u64],
    samples: &[Sample],
    w: &InferenceWeights,
    origin: Option<&OriginUniverse>,
) -> Result<Vec<PredictionRecord>, EvalError> {
    w.validate()?;
    if ids.len() != samples.len() {
        return Err(EvalError::Mismatch {
            what: "sample ids per sample",
            left: ids.len(),
            right: samples.len(),
        });
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let bank = &model.bank;
    // Candidate compositions with their primitive slots, plus the branch
    // vector lengths the probabilities are renormalized over.
    let (candidates, n_attrs, n_objs) = match origin {
        Some(u) => {
            if u.attrs == 0 || u.attrs > bank.attr_ids().len() {
                return Err(EvalError::Mismatch {
                    what: "origin attribute slots",
                    left: u.attrs,
                    right: bank.attr_ids().len(),
                });
            }
            if u.objs == 0 || u.objs > bank.obj_ids().len() {
                return Err(EvalError::Mismatch {
                    what: "origin object slots",
                    left: u.objs,
                    right: bank.obj_ids().len(),
                });
            }
            (u.comps.clone(), u.attrs, u.objs)
        }
        None => {
            (bank.comp_index().to_vec(), bank.attr_ids().len(), bank.obj_ids().len())
        }
    };
    let mut slots = Vec::with_capacity(candidates.len());
    for &(a, o) in &candidates {
        let sa = bank.attr_slot(a).filter(|&s| s < n_attrs);
        let so = bank.obj_slot(o).filter(|&s| s < n_objs);
        let sc = bank.comp_slot((a, o));
        match (sa, so, sc) {
            (Some(sa), Some(so), Some(sc)) => slots.push((sa, so, sc)),
            _ => {
                return Err(EvalError::Degenerate {
                    what: "candidate composition outside the origin universe",
                })
            }
        }
    }

    // The full space needs no renormalization: each branch is already a
    // softmax over exactly that space.
    let restricted = origin.is_some();
    let mut tape = crate::numcore::Tape::new();
    let out = model.forward_eval(&mut tape, latents, samples, partition)?;
    let mut records = Vec::with_capacity(samples.len());
    for ((&id, sample), logits) in ids.iter().zip(samples).zip(&out.per_sample) {
        let p_a = maybe_renormalized(tape.value(logits.p_a)?, n_attrs, restricted)?;
        let p_o = maybe_renormalized(tape.value(logits.p_o)?, n_objs, restricted)?;
        let p_c_full = tape.value(logits.p_c)?;
        let gathered: Vec<f64> = slots.iter().map(|&(_, _, sc)| p_c_full[sc]).collect();
        let n_comps = gathered.len();
        let p_c = maybe_renormalized(&gathered, n_comps, restricted)?;
        let scores: Vec<f64> = slots
            .iter()
            .enumerate()
            .map(|(k, &(sa, so, _))| {
                w.lambda_c * p_c[k] + w.lambda_a * p_a[sa] * w.lambda_o * p_o[so]
            })
            .collect();
        let record = PredictionRecord {
            sample_id: id,
            truth: (sample.attr, sample.obj),
            candidates: candidates.clone(),
            scores,
            attr_pred: bank.attr_ids()[argmax_first(&p_a)],
            obj_pred: bank.obj_ids()[argmax_first(&p_o)],
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// First `n` entries, rescaled to sum to one when restricting. Restricting
/// a softmax this way equals running the softmax on the restricted logits.
fn maybe_renormalized(probs: &[f64], n: usize, restrict: bool) -> Result<Vec<f64>, EvalError> {
    let head = &probs[..n];
    if !restrict {
        return Ok(head.to_vec());
    }
    let sum: f64 = head.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(EvalError::Degenerate { what: "probability mass in the restriction" });
    }
    Ok(head.iter().map(|p| p / sum).collect())
}

/// Writes records as a line-oriented dump: a header naming the format, the
/// shared candidate list, then one line per record carrying the id, truth,
/// candidate digest, branch argmaxes and the score vector. Floats print in
/// shortest round-trip form, so recomputing metrics from a dump is
/// bit-exact.
pub fn write_dump<W: Write>(out: &mut W, records: &[PredictionRecord]) -> Result<(), EvalError> {
    writeln!(out, "czsl-predictions v1")?;
    let candidates = match records.first() {
        Some(r) => r.candidates.clone(),
        None => Vec::new(),
    };
    let cand_str: Vec<String> =
        candidates.iter().map(|(a, o)| format!("{a}:{o}")).collect();
    writeln!(out, "candidates\t{}", cand_str.join(","))?;
    for r in records {
        r.validate()?;
        let digest = candidates_digest(&r.candidates);
        if digest != candidates_digest(&candidates) {
            return Err(EvalError::CandidateSpaceMismatch { record: r.sample_id });
        }
        let scores: Vec<String> = r.scores.iter().map(|s| format!("{s}")).collect();
        writeln!(
            out,
            "{}\t{}:{}\t{:016x}\t{}\t{}\t{}",
            r.sample_id,
            r.truth.0,
            r.truth.1,
            digest,
            r.attr_pred,
            r.obj_pred,
            scores.join(",")
        )?;
    }
    Ok(())
}

/// Reads a dump produced by [`write_dump`], validating the header, the
/// per-record digests and every record invariant.
pub fn read_dump<R: BufRead>(input: R) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut lines = input.lines().enumerate();
    let parse = |line: usize, detail: String| EvalError::Parse { line: line + 1, detail };
    let (ln, header) = lines
        .next()
        .ok_or(EvalError::Parse { line: 1, detail: "empty dump".into() })
        .map(|(i, r)| (i, r))?;
    if header? != "czsl-predictions v1" {
        return Err(parse(ln, "unrecognized header".into()));
    }
    let (ln, cand_line) =
        lines.next().ok_or(EvalError::Parse { line: 2, detail: "missing candidates".into() })?;
    let cand_line = cand_line?;
    let body = cand_line
        .strip_prefix("candidates\t")
        .ok_or_else(|| parse(ln, "expected candidates line".into()))?;
    let mut candidates: Vec<Comp> = Vec::new();
    if !body.is_empty() {
        for part in body.split(',') {
            let (a, o) = part
                .split_once(':')
                .ok_or_else(|| parse(ln, format!("bad candidate {part}")))?;
            candidates.push((
                a.parse().map_err(|_| parse(ln, format!("bad attribute id {a}")))?,
                o.parse().map_err(|_| parse(ln, format!("bad object id {o}")))?,
            ));
        }
    }
    let digest = candidates_digest(&candidates);
    let mut records = Vec::new();
    for (ln, line) in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(parse(ln, format!("expected 6 fields, got {}", fields.len())));
        }
        let sample_id =
            fields[0].parse().map_err(|_| parse(ln, format!("bad sample id {}", fields[0])))?;
        let (ta, to) = fields[1]
            .split_once(':')
            .ok_or_else(|| parse(ln, format!("bad truth {}", fields[1])))?;
        let truth = (
            ta.parse().map_err(|_| parse(ln, format!("bad attribute id {ta}")))?,
            to.parse().map_err(|_| parse(ln, format!("bad object id {to}")))?,
        );
        let line_digest = u64::from_str_radix(fields[2], 16)
            .map_err(|_| parse(ln, format!("bad digest {}", fields[2])))?;
        if line_digest != digest {
            return Err(EvalError::CandidateSpaceMismatch { record: sample_id });
        }
        let attr_pred =
            fields[3].parse().map_err(|_| parse(ln, format!("bad prediction {}", fields[3])))?;
        let obj_pred =
            fields[4].parse().map_err(|_| parse(ln, format!("bad prediction {}", fields[4])))?;
        let mut scores = Vec::new();
        if !fields[5].is_empty() {
            for s in fields[5].split(',') {
                scores
                    .push(s.parse().map_err(|_| parse(ln, format!("bad score {s}")))?);
            }
        }
        let record = PredictionRecord {
            sample_id,
            truth,
            candidates: candidates.clone(),
            scores,
            attr_pred,
            obj_pred,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}
