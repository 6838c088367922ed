//! Wasserstein-robust large deviations for finite Markov chains.
//!
//! A chain is described by a finite metric space, an initial distribution, a
//! nominal transition kernel and a radius `r`. At every step the law of the next
//! state may be any distribution within Wasserstein-1 distance `r` of the
//! nominal row. This crate computes
//!
//! - exact Wasserstein-1 distances with primal and dual certificates ([`transport`]),
//! - relative entropy and its robust (ball-minimised) variants ([`divergence`]),
//! - the robust rate function, worst-case tail rates and worst-case kernels
//!   ([`rate`]),
//! - robust invariant-measure envelopes and chain condition checks ([`set_chain`]),
//! - Monte Carlo estimates of exponential tail rates ([`montecarlo`]),
//!
//! and exposes all of it through the `robust-ldp` command line tool ([`cli`]).

pub mod chain;
pub mod cli;
pub mod divergence;
pub mod error;
mod linalg;
pub mod montecarlo;
pub mod program;
pub mod rate;
pub mod report;
pub mod set_chain;
pub mod transport;

pub use chain::{BallSet, ChainSpec, Dist, Kernel, MetricSpace, Violation};

pub use divergence::{DivergenceModel, DivergenceResult, ModelKind};
pub use error::{Error, Result};
pub use rate::RateReport;

pub use transport::{DualPotential, TransportPlan, W1};
