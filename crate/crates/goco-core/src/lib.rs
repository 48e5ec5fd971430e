//! Gossip-based decentralized learning with gradient coding.
//!
//! A deterministic, desk-scale simulator for peer-to-peer training rounds in
//! which devices hold redundant copies of training subsets, send encoded
//! gradients' worth of parameter updates to their graph neighbors, and
//! randomly drop out of whole rounds as stragglers. The crate provides:
//!
//! - [`topology`]: communication graphs as symmetric doubly stochastic
//!   mixing matrices, plus their spectral summaries (gap `rho`, `beta`).
//! - [`assignment`]: subset-to-device placement matrices (uniform random,
//!   no-redundancy, full replication) and pair-wise balance reports.
//! - [`problem`]: the linear-regression objective with exact and noisy
//!   gradient oracles and a minimum-norm reference optimum.
//! - [`engine`]: the synchronous round protocol (encode, local step, gossip,
//!   broadcast) with Bernoulli stragglers, message buffers, and telemetry.
//! - [`theory`]: the convergence-bound constants and the predicted
//!   `phi1/sqrt(T) + phi2/T + phi3/(T sqrt(T))` envelope.
//! - [`rng`]: keyed ChaCha streams so every source of randomness is
//!   independently seeded and replayable.
//!
//! Everything is deterministic given the seeds; runs with identical inputs
//! produce byte-identical telemetry.
//!
//! ```
//! use goco_core::assignment::AssignmentMatrix;
//! use goco_core::engine::{Engine, RunConfig};
//! use goco_core::problem::{GenerateConfig, Problem};
//! use goco_core::topology::MixingMatrix;
//!
//! let problem = Problem::generate(&GenerateConfig {
//!     m: 16,
//!     dim: 100,
//!     feature_std: 10.0,
//!     label_noise_std: 1.0,
//!     planted_range: (1, 10),
//!     sigma0: 1.0,
//!     seed: 7,
//! })?;
//! let assignment = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 7, true)?;
//! let topology = MixingMatrix::ring(16)?;
//! let engine = Engine::new(&problem, &assignment, &topology, RunConfig::baseline(100, 7))?;
//! let telemetry = engine.run()?;
//! assert_eq!(telemetry.rows.len(), 100);
//! assert!(telemetry.rows.last().unwrap().loss < telemetry.rows[0].loss);
//! # Ok::<(), goco_core::Error>(())
//! ```

pub mod assignment;
pub mod engine;
pub mod problem;
pub mod rng;
pub mod theory;
pub mod topology;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("protocol state corrupted: {0}")]
    ProtocolState(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(
        "non-finite parameter detected at iteration {iteration} (learning rate likely too large)"
    )]
    Divergence {
        iteration: usize,
        /// Telemetry collected before the failing iteration, when available.
        partial: Option<Box<engine::Telemetry>>,
    },

    #[error("degenerate regime: {0}")]
    DegenerateRegime(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
