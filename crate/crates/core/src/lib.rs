//! Implicit learn-to-optimize (L2O) models.
//!
//! An implicit model defines its inference as the limit of a fixed-point
//! iteration `x <- T(x; d)` whose operator is built from proximal and
//! gradient steps. This crate contains the numerical pieces needed to build,
//! run, train and certify such models:
//!
//! * [`linops`]: dense linear maps, power iteration, Cholesky solves.
//! * [`prox`]: shrink and the projection catalogue (box, ball, hyperplane,
//!   halfspace, log-set, linear coupling).
//! * [`solvers`]: the fixed-point driver, linearized ADMM and Davis-Yin
//!   three-operator splitting.
//! * [`models`]: sparse recovery, the implicit dictionary model, the
//!   box-constrained l1 model and CFMM arbitrage.
//! * [`certs`]: property values, empirical CDF calibration, labels and guards.
//! * [`graph`], [`tape`], [`train`]: a minimal reverse-mode tape and
//!   Jacobian-free backpropagation with an Adam optimizer.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod certs;
pub mod error;
pub mod graph;
pub mod linops;
pub mod models;
pub mod prox;
pub mod solvers;
pub mod tape;
pub mod train;
pub mod vector;

pub use error::{Error, Result};
pub use graph::{Eval, Graph, ParamId};
pub use linops::{LinearMap, NormalSolver, SpectralEstimate};
pub use solvers::{FixedPointTrace, StopRule};
