//! Correlation-aware domain adaptation for semantic segmentation.
//!
//! A labeled synthetic source domain and an unlabeled target domain share
//! self-supervised depth estimates. The model learns both tasks jointly with
//! a domain-shared task feature correlation module, refines target semantic
//! pseudo-labels by the discrepancy between the two domain-specific depth
//! decoders, and trains inside a class-mixing self-training loop.
//!
//! The crate ships a synthetic dual-domain benchmark so the whole pipeline
//! runs end to end on a CPU in minutes; see the `examples/` directory for one
//! runnable program per capability and the `corda` binary for the CLI.

pub mod cli;
pub mod datasets;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod refinement;
pub mod selftrain;

pub use error::{CordaError, Result};
