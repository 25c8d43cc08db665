//! Desk-scale circuit discovery for toy decoder-only transformers.
//!
//! The crate is organized around a small set of passes over one model:
//!
//! - [`tensor`] / [`tape`] — dense f64 tensors with reverse-mode autodiff on
//!   a Wengert tape; gradients are available for every intermediate, which
//!   edge attribution needs.
//! - [`model`] — a decoder-only transformer whose forward pass is decomposed
//!   into residual-stream nodes (input, attention heads, MLPs, output) and
//!   supports declarative interventions: head ablation, activation scaling,
//!   node patching, and per-edge patching.
//! - [`attribution`] — edge scores from clean/corrupted prompt pairs via
//!   integrated-gradients path averaging, plus an exact single-edge patching
//!   oracle.
//! - [`circuit`] — top-n edge selection, threshold simplification, path
//!   pruning, and faithfulness evaluation by patching all non-circuit edges.
//! - [`analysis`] — circuit diffs (emergent/retained/deactivated heads) and
//!   checkpoint cohort analytics.
//! - [`evalmetrics`] — pass@k / success@k and a sampling evaluation harness.
//! - [`train`] — SFT cross-entropy steps and GRPO steps (group-normalized
//!   advantages, clipped token-level ratios, reference-policy KL).
//! - [`tasks`] — built-in synthetic tasks (copy, modular addition, sorting)
//!   with programmatic verifiers.
//!
//! The crate is `no_std` (with `alloc`); all file formats, hashing, and the
//! command-line driver live in the companion `headtrace` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod attribution;
pub mod circuit;
pub mod error;
pub mod evalmetrics;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use tensor::Tensor;

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, CoreError>;
