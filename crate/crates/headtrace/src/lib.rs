//! File formats, checkpointing, and the command-line driver for the
//! headtrace toolkit. Everything numerical lives in `headtrace-core`; this
//! crate owns IO: checkpoint manifests and blobs, prompt-pair files,
//! circuit/diff/cohort/eval artifacts, and the `headtrace` binary.

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod hashes;
pub mod pairs;
pub mod runs;

pub use error::{CliError, ExitCode};
