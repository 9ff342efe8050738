//! Desk-scale continual compositional zero-shot learning.
//!
//! A frozen synthetic vision-language world emits image features whose
//! attribute/object structure is known by construction. Learnable soft prompt
//! banks are trained session by session against that world, with knowledge
//! distillation and alignment regularizers guarding earlier sessions, and the
//! whole run is scored with a continual zero-shot protocol that tracks
//! catastrophic forgetting.
//!
//! Module layout mirrors the pipeline:
//! - [`numcore`]: f64 tensors, a reverse-mode tape, and a finite-difference
//!   gradient checker.
//! - [`world`]: composition spaces, constrained session splits, and the
//!   synthetic renderer/frozen text encoder.
//! - [`prompts`]: the learnable prompt bank and its append-only expansion.
//! - [`model`]: decomposition heads, cross-attention fusion, and logits.
//! - [`losses`]: cross-entropy plus the four continual regularizers.
//! - [`continual`]: per-session training, teacher registry, checkpoints.
//! - [`eval`]: bias-sweep metrics, accumulation, and the forgetting measure.

pub mod continual;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod prompts;
pub mod rng;
pub mod world;
