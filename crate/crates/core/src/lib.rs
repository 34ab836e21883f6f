//! Neural-network quantum states for second-quantized molecular
//! Hamiltonians.
//!
//! The crate provides the full training stack for a transformer-based
//! variational wavefunction: FCIDUMP integral tables, bit-packed
//! occupation number vectors with Slater-Condon matrix elements, an
//! autoregressive sampler with chemistry-informed pruning and a hybrid
//! breadth/depth traversal, a fixed-capacity KV cache pool, an
//! in-process virtual-cluster simulator with density-aware load
//! balancing, the variational Monte Carlo training loop, and a full
//! configuration interaction oracle used to validate all of the above.

pub mod ansatz;
pub mod cluster;
pub mod eloc;
pub mod integrals;
pub mod kvcache;
pub mod onv;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod vmc;

use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum NqsError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("index out of range: {0}")]
    Range(String),

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("zero amplitude for a sampled configuration: {0}")]
    DegenerateAmplitude(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NqsError>;
