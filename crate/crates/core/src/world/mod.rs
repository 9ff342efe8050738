//! Composition spaces, constrained continual splits, and the synthetic
//! world that renders image features for them.
//!
//! A space is a set of named attributes and objects plus the attribute-object
//! pairs that exist in it. A continual run partitions those pairs into
//! sessions whose composition sets never overlap, while primitives may recur
//! once introduced. Splits are either generated (seeded) or loaded from a
//! split schema file; both forms go through the same validator.

mod latents;
mod split_file;

pub use latents::{
    frozen_text_encode, render_many, render_sample, spawn_world, EncoderVars, Sample,
    WorldLatents,
};
pub use split_file::{
    load_table_splits, parse_split_file, table_shape, to_split_file, DeclaredCounts, SplitFile,
    SplitFileSession, TableDataset,
};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numcore::NumError;
use crate::rng::{chacha, mix};
use rand::seq::SliceRandom;

/// Attribute-object pair, as indices into a [`CompositionSpace`].
pub type Comp = (usize, usize);

#[derive(Debug)]
pub enum WorldError {
    DuplicateName { kind: &'static str, name: String },
    EmptySpace { kind: &'static str },
    BadComposition { comp: Comp, n_attrs: usize, n_objs: usize },
    DuplicateComposition { comp: Comp },
    /// Too few compositions to give every session at least one seen and one
    /// unseen member; `session` is the first index that cannot be filled.
    InfeasibleSplit { session: usize, available: usize, needed: usize },
    BadFraction { value: f64 },
    /// The split schema file is malformed.
    Schema { detail: String },
    /// A declared per-session count disagrees with the listed entries.
    CountMismatch {
        session: usize,
        field: &'static str,
        declared: usize,
        actual: usize,
    },
    UnknownDataset { name: String },
    Io(std::io::Error),
    Num(NumError),
}

impl fmt::Display for WorldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorldError::DuplicateName { kind, name } => {
                write!(f, "duplicate {kind} name {name:?}")
            }
            WorldError::EmptySpace { kind } => write!(f, "space needs at least one {kind}"),
            WorldError::BadComposition { comp, n_attrs, n_objs } => write!(
                f,
                "composition {comp:?} out of range for {n_attrs} attrs x {n_objs} objs"
            ),
            WorldError::DuplicateComposition { comp } => {
                write!(f, "composition {comp:?} listed twice")
            }
            WorldError::InfeasibleSplit { session, available, needed } => write!(
                f,
                "session {session} cannot be filled: {available} compositions left, {needed} needed"
            ),
            WorldError::BadFraction { value } => {
                write!(f, "seen fraction must lie strictly between 0 and 1, got {value}")
            }
            WorldError::Schema { detail } => write!(f, "split schema: {detail}"),
            WorldError::CountMismatch { session, field, declared, actual } => write!(
                f,
                "session {session}: declared {field} count {declared} but {actual} entries listed"
            ),
            WorldError::UnknownDataset { name } => write!(f, "unknown dataset shape {name:?}"),
            WorldError::Io(e) => write!(f, "split file io: {e}"),
            WorldError::Num(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for WorldError {}

impl From<NumError> for WorldError {
    fn from(e: NumError) -> Self {
        WorldError::Num(e)
    }
}

impl From<std::io::Error> for WorldError {
    fn from(e: std::io::Error) -> Self {
        WorldError::Io(e)
    }
}

/// Named attributes and objects plus the valid attribute-object pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionSpace {
    attrs: Vec<String>,
    objs: Vec<String>,
    comps: Vec<Comp>,
}

impl CompositionSpace {
    pub fn attrs(&self) -> &[String] {
        &self.attrs
    }

    pub fn objs(&self) -> &[String] {
        &self.objs
    }

    pub fn comps(&self) -> &[Comp] {
        &self.comps
    }

    pub fn n_attrs(&self) -> usize {
        self.attrs.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objs.len()
    }

    pub fn attr_name(&self, i: usize) -> &str {
        &self.attrs[i]
    }

    pub fn obj_name(&self, i: usize) -> &str {
        &self.objs[i]
    }

    pub fn contains(&self, comp: Comp) -> bool {
        self.comps.contains(&comp)
    }
}

/// Builds a space from names. With `comps == None` the space is the full
/// attribute-object product.
pub fn build_space(
    attrs: Vec<String>,
    objs: Vec<String>,
    comps: Option<Vec<Comp>>,
) -> Result<CompositionSpace, WorldError> {
    if attrs.is_empty() {
        return Err(WorldError::EmptySpace { kind: "attribute" });
    }
    if objs.is_empty() {
        return Err(WorldError::EmptySpace { kind: "object" });
    }
    for (kind, names) in [("attribute", &attrs), ("object", &objs)] {
        let mut seen = BTreeSet::new();
        for n in names {
            if !seen.insert(n) {
                return Err(WorldError::DuplicateName { kind, name: n.clone() });
            }
        }
    }
    let comps = match comps {
        Some(list) => {
            let mut seen = BTreeSet::new();
            for &c in &list {
                if c.0 >= attrs.len() || c.1 >= objs.len() {
                    return Err(WorldError::BadComposition {
                        comp: c,
                        n_attrs: attrs.len(),
                        n_objs: objs.len(),
                    });
                }
                if !seen.insert(c) {
                    return Err(WorldError::DuplicateComposition { comp: c });
                }
            }
            list
        }
        None => {
            let mut list = Vec::with_capacity(attrs.len() * objs.len());
            for a in 0..attrs.len() {
                for o in 0..objs.len() {
                    list.push((a, o));
                }
            }
            list
        }
    };
    Ok(CompositionSpace { attrs, objs, comps })
}

/// One continual session: the primitives it introduces and its composition
/// sets. `seen` is the training set; `unseen` the zero-shot test set; `val`
/// carries validation compositions when a split file declares them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub index: usize,
    /// Attribute indices first introduced in this session.
    pub attrs: Vec<usize>,
    /// Object indices first introduced in this session.
    pub objs: Vec<usize>,
    pub seen: Vec<Comp>,
    pub unseen: Vec<Comp>,
    #[serde(default)]
    pub val: Vec<Comp>,
}

impl SessionSpec {
    /// Every composition belonging to this session.
    pub fn all_comps(&self) -> impl Iterator<Item = &Comp> {
        self.seen.iter().chain(self.unseen.iter()).chain(self.val.iter())
    }
}

/// Splits a space into `n_sessions` sessions with pairwise-disjoint
/// composition sets. Every composition of the space is used; each session
/// receives at least one seen and one unseen composition.
pub fn split_constrained(
    space: &CompositionSpace,
    n_sessions: usize,
    seed: u64,
    seen_fraction: f64,
) -> Result<Vec<SessionSpec>, WorldError> {
    if !(seen_fraction > 0.0 && seen_fraction < 1.0) {
        return Err(WorldError::BadFraction { value: seen_fraction });
    }
    let n_comps = space.comps.len();
    if n_sessions == 0 || n_comps < 2 * n_sessions {
        // Give the first two compositions to session 0, the next two to
        // session 1, and so on: the first starved session is n_comps / 2.
        return Err(WorldError::InfeasibleSplit {
            session: (n_comps / 2).min(n_sessions.saturating_sub(1)),
            available: n_comps.saturating_sub(2 * (n_comps / 2)),
            needed: 2,
        });
    }
    const TAG_SPLIT: u64 = 0x53504c49;
    let mut order: Vec<usize> = (0..n_comps).collect();
    order.shuffle(&mut chacha(mix(seed, &[TAG_SPLIT])));

    let base = n_comps / n_sessions;
    let extra = n_comps % n_sessions;
    let mut sessions = Vec::with_capacity(n_sessions);
    let mut cursor = 0usize;
    let mut introduced_attrs = vec![false; space.n_attrs()];
    let mut introduced_objs = vec![false; space.n_objs()];
    for s in 0..n_sessions {
        let len = base + usize::from(s < extra);
        let chunk: Vec<Comp> = order[cursor..cursor + len].iter().map(|&i| space.comps[i]).collect();
        cursor += len;

        let n_seen = ((len as f64 * seen_fraction).round() as usize).clamp(1, len - 1);
        let seen = chunk[..n_seen].to_vec();
        let unseen = chunk[n_seen..].to_vec();

        let mut attrs = Vec::new();
        let mut objs = Vec::new();
        for &(a, o) in &chunk {
            if !introduced_attrs[a] {
                introduced_attrs[a] = true;
                attrs.push(a);
            }
            if !introduced_objs[o] {
                introduced_objs[o] = true;
                objs.push(o);
            }
        }
        sessions.push(SessionSpec { index: s, attrs, objs, seen, unseen, val: Vec::new() });
    }
    Ok(sessions)
}

/// Primitive kind, for violation reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Attr,
    Obj,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::Attr => write!(f, "attribute"),
            Primitive::Obj => write!(f, "object"),
        }
    }
}

/// A constraint broken by a session split.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitViolation {
    /// The same composition appears in two different sessions.
    CrossSessionOverlap { earlier: usize, later: usize, comp: Comp },
    /// A composition appears in more than one of seen/val/unseen within a
    /// session.
    IntraSessionOverlap { session: usize, comp: Comp },
    /// A primitive index falls outside the space.
    PrimitiveOutOfRange { session: usize, kind: Primitive, index: usize },
    /// A composition uses a primitive not introduced by any session up to and
    /// including its own.
    PrimitiveNotIntroduced { session: usize, comp: Comp, kind: Primitive },
    /// A primitive is declared as introduced by two different sessions.
    ReintroducedPrimitive { session: usize, kind: Primitive, index: usize },
    /// A composition does not exist in the space.
    UnknownComposition { session: usize, comp: Comp },
}

impl fmt::Display for SplitViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitViolation::CrossSessionOverlap { earlier, later, comp } => write!(
                f,
                "composition {comp:?} appears in both session {earlier} and session {later}"
            ),
            SplitViolation::IntraSessionOverlap { session, comp } => write!(
                f,
                "session {session}: composition {comp:?} appears in more than one split"
            ),
            SplitViolation::PrimitiveOutOfRange { session, kind, index } => {
                write!(f, "session {session}: {kind} index {index} outside the space")
            }
            SplitViolation::PrimitiveNotIntroduced { session, comp, kind } => write!(
                f,
                "session {session}: composition {comp:?} uses a {kind} no session up to {session} introduced"
            ),
            SplitViolation::ReintroducedPrimitive { session, kind, index } => {
                write!(f, "session {session}: {kind} {index} was already introduced earlier")
            }
            SplitViolation::UnknownComposition { session, comp } => {
                write!(f, "session {session}: composition {comp:?} not in the space")
            }
        }
    }
}

/// Checks a session split against the continual constraints and returns every
/// violation found, in deterministic order.
pub fn validate_splits(space: &CompositionSpace, sessions: &[SessionSpec]) -> Vec<SplitViolation> {
    let mut violations = Vec::new();
    let space_comps: BTreeSet<Comp> = space.comps.iter().copied().collect();

    // Introduction bookkeeping: which session first declares each primitive.
    let mut attr_intro: Vec<Option<usize>> = vec![None; space.n_attrs()];
    let mut obj_intro: Vec<Option<usize>> = vec![None; space.n_objs()];
    for sess in sessions {
        for &a in &sess.attrs {
            if a >= space.n_attrs() {
                violations.push(SplitViolation::PrimitiveOutOfRange {
                    session: sess.index,
                    kind: Primitive::Attr,
                    index: a,
                });
            } else if let Some(_first) = attr_intro[a] {
                violations.push(SplitViolation::ReintroducedPrimitive {
                    session: sess.index,
                    kind: Primitive::Attr,
                    index: a,
                });
            } else {
                attr_intro[a] = Some(sess.index);
            }
        }
        for &o in &sess.objs {
            if o >= space.n_objs() {
                violations.push(SplitViolation::PrimitiveOutOfRange {
                    session: sess.index,
                    kind: Primitive::Obj,
                    index: o,
                });
            } else if let Some(_first) = obj_intro[o] {
                violations.push(SplitViolation::ReintroducedPrimitive {
                    session: sess.index,
                    kind: Primitive::Obj,
                    index: o,
                });
            } else {
                obj_intro[o] = Some(sess.index);
            }
        }
    }

    // Per-session composition checks.
    for sess in sessions {
        let mut in_session: BTreeSet<Comp> = BTreeSet::new();
        for &comp in sess.all_comps() {
            let (a, o) = comp;
            if !in_session.insert(comp) {
                violations.push(SplitViolation::IntraSessionOverlap {
                    session: sess.index,
                    comp,
                });
                continue;
            }
            if a >= space.n_attrs() || o >= space.n_objs() {
                violations.push(SplitViolation::PrimitiveOutOfRange {
                    session: sess.index,
                    kind: if a >= space.n_attrs() { Primitive::Attr } else { Primitive::Obj },
                    index: if a >= space.n_attrs() { a } else { o },
                });
                continue;
            }
            if !space_comps.contains(&comp) {
                violations.push(SplitViolation::UnknownComposition {
                    session: sess.index,
                    comp,
                });
            }
            match attr_intro[a] {
                Some(first) if first <= sess.index => {}
                _ => violations.push(SplitViolation::PrimitiveNotIntroduced {
                    session: sess.index,
                    comp,
                    kind: Primitive::Attr,
                }),
            }
            match obj_intro[o] {
                Some(first) if first <= sess.index => {}
                _ => violations.push(SplitViolation::PrimitiveNotIntroduced {
                    session: sess.index,
                    comp,
                    kind: Primitive::Obj,
                }),
            }
        }
    }

    // Cross-session disjointness.
    for i in 0..sessions.len() {
        let earlier: BTreeSet<Comp> = sessions[i].all_comps().copied().collect();
        for later in sessions.iter().skip(i + 1) {
            for &comp in later.all_comps() {
                if earlier.contains(&comp) {
                    violations.push(SplitViolation::CrossSessionOverlap {
                        earlier: sessions[i].index,
                        later: later.index,
                        comp,
                    });
                }
            }
        }
    }
    violations
}
