//! Learnable soft prompt bank shared across continual sessions.
//!
//! The bank keeps one row per known attribute and one per known object, plus
//! three prefix contexts (attribute, object, composition branches). A prompt
//! for a concept is its branch prefix with the concept's row(s) appended:
//! attributes and objects yield (m+1)-row sequences, compositions (m+2)-row
//! sequences ending in the attribute row then the object row. Composition
//! prompts share their rows with the primitive prompts, so one parameter
//! update moves every prompt that mentions the concept.
//!
//! Sessions only ever append. Existing rows keep their indices and bitwise
//! values across expansion, which is what lets later sessions distill against
//! snapshots taken earlier. Rows are initialized from a hash of the concept
//! name (unit norm), so the same concept starts identically in any run and
//! renaming one concept reseeds only its own row. Prefixes start as small
//! seeded gaussians (std 0.02) and are carried across sessions, never
//! re-initialized.
//!
//! Bank row order is introduction order, not the world's id order: global
//! primitive ids map to bank slots through lookup tables maintained here.
//! `comp_index` lists known compositions in introduction order (training
//! comps before zero-shot comps within a session) and defines the class
//! axis used by the scoring head. Validation comps are deliberately absent
//! from `comp_index`; they never enter the candidate space.

use std::collections::HashMap;
use std::error::Error;
use std::fmt;

use crate::numcore::{NumError, Tape, Tensor, Var};
use crate::rng::{chacha, hash_name, mix, normal_vec};
use crate::world::{Comp, CompositionSpace, SessionSpec};

const TAG_ATTR_ROW: u64 = 0x5052_4f41;
const TAG_OBJ_ROW: u64 = 0x5052_4f4f;
const TAG_PREFIX: u64 = 0x5052_5046;

/// Initial scale of prefix context entries.
const PREFIX_STD: f64 = 0.02;

#[derive(Debug)]
pub enum PromptError {
    BadDim { what: &'static str, value: usize },
    PrimitiveOutOfRange { kind: &'static str, id: usize, len: usize },
    PrimitiveAlreadyKnown { kind: &'static str, id: usize },
    UnknownPrimitive { kind: &'static str, id: usize },
    DuplicateComposition { attr: usize, obj: usize },
    Num(NumError),
}

impl fmt::Display for PromptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptError::BadDim { what, value } => {
                write!(f, "{what} must be at least 1, got {value}")
            }
            PromptError::PrimitiveOutOfRange { kind, id, len } => {
                write!(f, "{kind} id {id} outside space of size {len}")
            }
            PromptError::PrimitiveAlreadyKnown { kind, id } => {
                write!(f, "{kind} {id} already has a bank row")
            }
            PromptError::UnknownPrimitive { kind, id } => {
                write!(f, "{kind} {id} has no bank row")
            }
            PromptError::DuplicateComposition { attr, obj } => {
                write!(f, "composition ({attr}, {obj}) already known")
            }
            PromptError::Num(e) => write!(f, "numeric failure: {e}"),
        }
    }
}

impl Error for PromptError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            PromptError::Num(e) => Some(e),
            _ => None,
        }
    }
}

impl From<NumError> for PromptError {
    fn from(e: NumError) -> Self {
        PromptError::Num(e)
    }
}

/// Something a prompt can be assembled for. Ids are world ids, not bank
/// slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concept {
    Attr(usize),
    Obj(usize),
    Comp(usize, usize),
}

/// Composition classes split by introduction time: `head` holds comp_index
/// positions introduced in earlier sessions, `tail` the ones added by the
/// current expansion. At session 0 the head is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadTailPartition {
    pub head: Vec<usize>,
    pub tail: Vec<usize>,
}

impl HeadTailPartition {
    pub fn len(&self) -> usize {
        self.head.len() + self.tail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.head.is_empty() && self.tail.is_empty()
    }
}

/// The five learnable tensors placed on a tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    pub attr_rows: Var,
    pub obj_rows: Var,
    pub prefix_a: Var,
    pub prefix_o: Var,
    pub prefix_c: Var,
}

/// Soft prompt bank. Grows monotonically; see the module doc for layout.
#[derive(Debug, Clone)]
pub struct PromptBank {
    d: usize,
    m: usize,
    seed: u64,
    attr_rows: Tensor,
    obj_rows: Tensor,
    prefix_a: Tensor,
    prefix_o: Tensor,
    prefix_c: Tensor,
    /// Bank slot -> world id, in introduction order.
    attr_ids: Vec<usize>,
    obj_ids: Vec<usize>,
    /// World id -> bank slot.
    attr_slots: HashMap<usize, usize>,
    obj_slots: HashMap<usize, usize>,
    comp_index: Vec<Comp>,
    comp_slots: HashMap<Comp, usize>,
}

fn unit_row(seed: u64, tag: u64, name: &str, d: usize) -> Vec<f64> {
    let mut rng = chacha(mix(seed, &[tag, hash_name(name)]));
    let mut v = normal_vec(&mut rng, d);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // A d-dimensional gaussian draw is never the zero vector in practice,
    // but a zero row is still preferable to a NaN row.
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

impl PromptBank {
    /// An empty bank: prefixes allocated, no concept rows yet. Feed sessions
    /// through [`PromptBank::expand`] starting with session 0.
    pub fn empty(d: usize, m: usize, seed: u64) -> Result<Self, PromptError> {
        if d < 1 {
            return Err(PromptError::BadDim { what: "embedding width d", value: d });
        }
        if m < 1 {
            return Err(PromptError::BadDim { what: "context length m", value: m });
        }
        let prefix = |branch: u64| -> Result<Tensor, PromptError> {
            let mut rng = chacha(mix(seed, &[TAG_PREFIX, branch]));
            let data = normal_vec(&mut rng, m * d).iter().map(|x| x * PREFIX_STD).collect();
            Ok(Tensor::param(vec![m, d], data)?)
        };
        let prefix_a = prefix(0)?;
        let prefix_o = prefix(1)?;
        let prefix_c = prefix(2)?;
        Ok(PromptBank {
            d,
            m,
            seed,
            attr_rows: Tensor::param(vec![0, d], Vec::new())?,
            obj_rows: Tensor::param(vec![0, d], Vec::new())?,
            prefix_a,
            prefix_o,
            prefix_c,
            attr_ids: Vec::new(),
            obj_ids: Vec::new(),
            attr_slots: HashMap::new(),
            obj_slots: HashMap::new(),
            comp_index: Vec::new(),
            comp_slots: HashMap::new(),
        })
    }

    /// Appends rows for the session's newly introduced primitives and
    /// registers its training and zero-shot compositions. Returns which
    /// comp_index positions are old (head) and which this call added (tail).
    pub fn expand(
        &mut self,
        space: &CompositionSpace,
        session: &SessionSpec,
    ) -> Result<HeadTailPartition, PromptError> {
        // Validate everything before touching state so a failed expansion
        // leaves the bank unchanged.
        for &a in &session.attrs {
            if a >= space.n_attrs() {
                return Err(PromptError::PrimitiveOutOfRange {
                    kind: "attribute",
                    id: a,
                    len: space.n_attrs(),
                });
            }
            if self.attr_slots.contains_key(&a) {
                return Err(PromptError::PrimitiveAlreadyKnown { kind: "attribute", id: a });
            }
        }
        for &o in &session.objs {
            if o >= space.n_objs() {
                return Err(PromptError::PrimitiveOutOfRange {
                    kind: "object",
                    id: o,
                    len: space.n_objs(),
                });
            }
            if self.obj_slots.contains_key(&o) {
                return Err(PromptError::PrimitiveAlreadyKnown { kind: "object", id: o });
            }
        }
        let known_attr = |id: usize| {
            self.attr_slots.contains_key(&id) || session.attrs.contains(&id)
        };
        let known_obj =
            |id: usize| self.obj_slots.contains_key(&id) || session.objs.contains(&id);
        let new_comps: Vec<Comp> =
            session.seen.iter().chain(session.unseen.iter()).copied().collect();
        for (k, &(a, o)) in new_comps.iter().enumerate() {
            if !known_attr(a) {
                return Err(PromptError::UnknownPrimitive { kind: "attribute", id: a });
            }
            if !known_obj(o) {
                return Err(PromptError::UnknownPrimitive { kind: "object", id: o });
            }
            if self.comp_slots.contains_key(&(a, o)) || new_comps[..k].contains(&(a, o)) {
                return Err(PromptError::DuplicateComposition { attr: a, obj: o });
            }
        }

        for &a in &session.attrs {
            let row = unit_row(self.seed, TAG_ATTR_ROW, space.attr_name(a), self.d);
            self.attr_rows.append_rows(&row, 1)?;
            self.attr_slots.insert(a, self.attr_ids.len());
            self.attr_ids.push(a);
        }
        for &o in &session.objs {
            let row = unit_row(self.seed, TAG_OBJ_ROW, space.obj_name(o), self.d);
            self.obj_rows.append_rows(&row, 1)?;
            self.obj_slots.insert(o, self.obj_ids.len());
            self.obj_ids.push(o);
        }
        let head: Vec<usize> = (0..self.comp_index.len()).collect();
        let mut tail = Vec::with_capacity(new_comps.len());
        for c in new_comps {
            self.comp_slots.insert(c, self.comp_index.len());
            tail.push(self.comp_index.len());
            self.comp_index.push(c);
        }
        Ok(HeadTailPartition { head, tail })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn context_length(&self) -> usize {
        self.m
    }

    pub fn n_attrs(&self) -> usize {
        self.attr_ids.len()
    }

    pub fn n_objs(&self) -> usize {
        self.obj_ids.len()
    }

    /// Known compositions in introduction order; position = class index.
    pub fn comp_index(&self) -> &[Comp] {
        &self.comp_index
    }

    pub fn attr_ids(&self) -> &[usize] {
        &self.attr_ids
    }

    pub fn obj_ids(&self) -> &[usize] {
        &self.obj_ids
    }

    pub fn attr_slot(&self, id: usize) -> Option<usize> {
        self.attr_slots.get(&id).copied()
    }

    pub fn obj_slot(&self, id: usize) -> Option<usize> {
        self.obj_slots.get(&id).copied()
    }

    pub fn comp_slot(&self, comp: Comp) -> Option<usize> {
        self.comp_slots.get(&comp).copied()
    }

    pub fn attr_rows(&self) -> &Tensor {
        &self.attr_rows
    }

    pub fn obj_rows(&self) -> &Tensor {
        &self.obj_rows
    }

    pub fn prefixes(&self) -> [&Tensor; 3] {
        [&self.prefix_a, &self.prefix_o, &self.prefix_c]
    }

    /// Stable parameter walk for optimizers and checkpoints. Order is fixed:
    /// attr rows, obj rows, then the three prefixes.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor)) {
        f("prompt.attr_rows", &mut self.attr_rows);
        f("prompt.obj_rows", &mut self.obj_rows);
        f("prompt.prefix_a", &mut self.prefix_a);
        f("prompt.prefix_o", &mut self.prefix_o);
        f("prompt.prefix_c", &mut self.prefix_c);
    }

    /// Read-only walk in the same order as [`Self::visit_params_mut`].
    pub fn visit_params(&self, mut f: impl FnMut(&'static str, &Tensor)) {
        f("prompt.attr_rows", &self.attr_rows);
        f("prompt.obj_rows", &self.obj_rows);
        f("prompt.prefix_a", &self.prefix_a);
        f("prompt.prefix_o", &self.prefix_o);
        f("prompt.prefix_c", &self.prefix_c);
    }

    /// Marks every bank tensor trainable or frozen. Teacher snapshots freeze
    /// their clone so their forward passes record no backward nodes.
    pub fn set_trainable(&mut self, on: bool) {
        self.visit_params_mut(|_, t| t.set_requires_grad(on));
    }

    /// Copies the bank onto a tape for one forward pass.
    pub fn vars(&self, tape: &mut Tape) -> BankVars {
        BankVars {
            attr_rows: tape.leaf(&self.attr_rows),
            obj_rows: tape.leaf(&self.obj_rows),
            prefix_a: tape.leaf(&self.prefix_a),
            prefix_o: tape.leaf(&self.prefix_o),
            prefix_c: tape.leaf(&self.prefix_c),
        }
    }

    /// Builds the prompt sequence for a concept: branch prefix plus the
    /// concept's bank row(s).
    pub fn assemble(
        &self,
        tape: &mut Tape,
        vars: &BankVars,
        concept: Concept,
    ) -> Result<Var, PromptError> {
        match concept {
            Concept::Attr(id) => {
                let slot = self
                    .attr_slot(id)
                    .ok_or(PromptError::UnknownPrimitive { kind: "attribute", id })?;
                Ok(assemble_primitive(tape, vars.prefix_a, vars.attr_rows, slot)?)
            }
            Concept::Obj(id) => {
                let slot = self
                    .obj_slot(id)
                    .ok_or(PromptError::UnknownPrimitive { kind: "object", id })?;
                Ok(assemble_primitive(tape, vars.prefix_o, vars.obj_rows, slot)?)
            }
            Concept::Comp(a, o) => {
                let sa = self
                    .attr_slot(a)
                    .ok_or(PromptError::UnknownPrimitive { kind: "attribute", id: a })?;
                let so = self
                    .obj_slot(o)
                    .ok_or(PromptError::UnknownPrimitive { kind: "object", id: o })?;
                Ok(assemble_comp(tape, vars.prefix_c, vars.attr_rows, vars.obj_rows, sa, so)?)
            }
        }
    }

    /// Rebuilds a bank from checkpointed parts. Shapes and index tables are
    /// revalidated; slot maps are derived, not trusted.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        d: usize,
        m: usize,
        seed: u64,
        attr_ids: Vec<usize>,
        obj_ids: Vec<usize>,
        comp_index: Vec<Comp>,
        attr_rows: Tensor,
        obj_rows: Tensor,
        prefixes: [Tensor; 3],
    ) -> Result<Self, PromptError> {
        if d < 1 {
            return Err(PromptError::BadDim { what: "embedding width d", value: d });
        }
        if m < 1 {
            return Err(PromptError::BadDim { what: "context length m", value: m });
        }
        let expect = |t: &Tensor, rows: usize, what: &'static str| {
            if t.shape() != [rows, d] {
                return Err(PromptError::Num(NumError::BadShape {
                    op: what,
                    shape: t.shape().to_vec(),
                    expected: format!("{rows}x{d}"),
                }));
            }
            Ok(())
        };
        expect(&attr_rows, attr_ids.len(), "bank attr rows")?;
        expect(&obj_rows, obj_ids.len(), "bank obj rows")?;
        expect(&prefixes[0], m, "bank prefix")?;
        expect(&prefixes[1], m, "bank prefix")?;
        expect(&prefixes[2], m, "bank prefix")?;
        let mut attr_slots = HashMap::new();
        for (slot, &id) in attr_ids.iter().enumerate() {
            if attr_slots.insert(id, slot).is_some() {
                return Err(PromptError::PrimitiveAlreadyKnown { kind: "attribute", id });
            }
        }
        let mut obj_slots = HashMap::new();
        for (slot, &id) in obj_ids.iter().enumerate() {
            if obj_slots.insert(id, slot).is_some() {
                return Err(PromptError::PrimitiveAlreadyKnown { kind: "object", id });
            }
        }
        let mut comp_slots = HashMap::new();
        for (slot, &c) in comp_index.iter().enumerate() {
            if !attr_slots.contains_key(&c.0) {
                return Err(PromptError::UnknownPrimitive { kind: "attribute", id: c.0 });
            }
            if !obj_slots.contains_key(&c.1) {
                return Err(PromptError::UnknownPrimitive { kind: "object", id: c.1 });
            }
            if comp_slots.insert(c, slot).is_some() {
                return Err(PromptError::DuplicateComposition { attr: c.0, obj: c.1 });
            }
        }
        let [prefix_a, prefix_o, prefix_c] = prefixes;
        Ok(PromptBank {
            d,
            m,
            seed,
            attr_rows,
            obj_rows,
            prefix_a,
            prefix_o,
            prefix_c,
            attr_ids,
            obj_ids,
            attr_slots,
            obj_slots,
            comp_index,
            comp_slots,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Prefix plus one bank row: an (m+1)-row sequence.
pub fn assemble_primitive(
    tape: &mut Tape,
    prefix: Var,
    rows: Var,
    slot: usize,
) -> Result<Var, NumError> {
    let r = tape.row(rows, slot)?;
    tape.concat_rows(&[prefix, r])
}

/// Prefix plus attribute row plus object row: an (m+2)-row sequence.
pub fn assemble_comp(
    tape: &mut Tape,
    prefix: Var,
    attr_rows: Var,
    obj_rows: Var,
    attr_slot: usize,
    obj_slot: usize,
) -> Result<Var, NumError> {
    let ra = tape.row(attr_rows, attr_slot)?;
    let ro = tape.row(obj_rows, obj_slot)?;
    tape.concat_rows(&[prefix, ra, ro])
}

/// Bank for a first session in one call.
pub fn init_bank(
    space: &CompositionSpace,
    session0: &SessionSpec,
    d: usize,
    m: usize,
    seed: u64,
) -> Result<PromptBank, PromptError> {
    let mut bank = PromptBank::empty(d, m, seed)?;
    bank.expand(space, session0)?;
    Ok(bank)
}
