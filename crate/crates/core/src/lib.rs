//! Simulation and likelihood-ratio laboratory for discretely observed
//! McKean–Vlasov diffusions.
//!
//! The crate is organised around the objects an experiment touches, in the
//! order they are usually needed:
//!
//! - [`model`]: the drift/diffusion interface with all derivatives, plus the
//!   two built-in models (a linear mean-field Ornstein–Uhlenbeck oracle and a
//!   bounded `tanh` interaction).
//! - [`simulate`]: Euler–Maruyama for the interacting particle system and its
//!   parameter tangents, an exact sampler for the Gaussian oracle, and grid
//!   serialization.
//! - [`measure`]: empirical measures, Wasserstein distances, tangent measures.
//! - [`oracle`]: closed-form Gaussian transitions for the oracle model and a
//!   nested Monte Carlo fallback for arbitrary models.
//! - [`lan`]: local perturbations, the score expansion terms, the exact
//!   log-likelihood ratio and the Monte Carlo verification harness.
//! - [`inference`]: Fisher information by particle–time quadrature, the
//!   Gaussian quasi-likelihood contrast, its minimiser and rate studies.

pub mod error;
pub mod inference;
pub mod lan;
pub mod measure;
pub mod model;
pub mod numerics;
pub mod optimize;
pub mod oracle;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
pub use model::{BuiltinModel, InitialLaw, Interval, MeasureSnapshot, ModelSpec, ThetaPair};
pub use simulate::{SimConfig, SimMode, TangentCloud, TrajectoryGrid};
