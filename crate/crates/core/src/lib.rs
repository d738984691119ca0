//! Planning and validation toolkit for ReLU-budgeted cell networks used in
//! two-party private inference.
//!
//! The crate is organized by subsystem:
//!
//! - [`cellgraph`]: normal/reduce cell DAGs, validation, legacy conversion,
//!   ReLU sharing, DOT export.
//! - [`accounting`]: exact ReLU / FLOP / parameter ledgers and the budget planner.
//! - [`skeleton`]: concrete stage lists and reduce-cell placement enumeration.
//! - [`gradcore`]: a small reverse-mode autodiff tape, Gumbel-softmax sampling,
//!   losses and optimizers.
//! - [`placement`]: the Gumbel-sampled bilevel search over reduce placements and
//!   its exhaustive grid-search counterpart.
//! - [`relaxation`]: continuous relaxation of cell edges and discretization.
//! - [`pisim`]: a simulation of the secret-shared inference protocol.
//! - [`latency`]: latency calibration and accuracy/latency Pareto fronts.
//!
//! Data-parallel loops go through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise.

pub mod accounting;
pub mod cellgraph;
pub mod error;
pub mod exec;
pub mod gradcore;
pub mod latency;
pub mod pisim;
pub mod placement;
pub mod relaxation;
pub mod skeleton;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Exec;
