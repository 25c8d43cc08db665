//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the core passes.
///
/// Numerical failures (NaN/Inf) are detected eagerly at operation boundaries
/// so a bad value cannot silently corrupt attribution rankings downstream.
#[derive(Clone, Debug, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced a NaN or Inf.
    NonFinite { op: &'static str },
    /// A NaN/Inf was hit while processing a specific prompt pair.
    NonFiniteInPair { pair_index: usize },
    /// `backward` was called on a non-scalar tensor.
    LossNotScalar,
    /// A tensor id does not belong to the tape it was used with.
    NotOnTape,
    /// A token is outside the configured vocabulary.
    TokenOutOfVocab { token: u32, vocab_size: usize },
    /// A sequence exceeds the configured maximum length.
    SequenceTooLong { len: usize, max: usize },
    /// An edge id is not valid for the model configuration.
    InvalidEdge { detail: String },
    /// An intervention spec violates its invariants.
    InvalidIntervention { detail: String },
    /// Clean and corrupted prompts in a pair differ in length.
    PairLengthMismatch { clean: usize, corrupted: usize },
    /// An operation requiring prompt pairs received none.
    EmptyPairList,
    /// A circuit was built against a different model configuration.
    ConfigMismatch { detail: String },
    /// Cohort analysis requires at least one checkpoint circuit.
    EmptySeries,
    /// The diff has no emergent heads to intervene on.
    EmptyEmergentSet,
    /// GRPO groups need at least two responses.
    GroupTooSmall { got: usize },
    /// Two aligned sequences differ in length.
    LengthMismatch { left: usize, right: usize },
    /// A training step received an empty batch.
    EmptyBatch,
    /// pass@k / success@k argument out of range.
    MetricDomain { detail: String },
    /// A generic precondition failed.
    Invalid { detail: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            CoreError::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            CoreError::NonFiniteInPair { pair_index } => {
                write!(f, "non-finite value while processing pair {pair_index}")
            }
            CoreError::LossNotScalar => write!(f, "backward requires a scalar loss"),
            CoreError::NotOnTape => write!(f, "tensor id does not belong to this tape"),
            CoreError::TokenOutOfVocab { token, vocab_size } => {
                write!(f, "token {token} out of vocabulary (size {vocab_size})")
            }
            CoreError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq_len {max}")
            }
            CoreError::InvalidEdge { detail } => write!(f, "invalid edge: {detail}"),
            CoreError::InvalidIntervention { detail } => {
                write!(f, "invalid intervention spec: {detail}")
            }
            CoreError::PairLengthMismatch { clean, corrupted } => write!(
                f,
                "clean/corrupted lengths differ: {clean} vs {corrupted}"
            ),
            CoreError::EmptyPairList => write!(f, "prompt pair list is empty"),
            CoreError::ConfigMismatch { detail } => write!(f, "config mismatch: {detail}"),
            CoreError::EmptySeries => write!(f, "checkpoint series is empty"),
            CoreError::EmptyEmergentSet => write!(f, "no emergent heads to intervene on"),
            CoreError::GroupTooSmall { got } => {
                write!(f, "GRPO group needs >= 2 responses, got {got}")
            }
            CoreError::LengthMismatch { left, right } => {
                write!(f, "sequence lengths differ: {left} vs {right}")
            }
            CoreError::EmptyBatch => write!(f, "batch is empty"),
            CoreError::MetricDomain { detail } => write!(f, "metric argument error: {detail}"),
            CoreError::Invalid { detail } => write!(f, "{detail}"),
        }
    }
}
