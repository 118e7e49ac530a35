//! Dynamic multiplicative factor models for multivariate event sequences.
//!
//! Each subject's events are a multivariate counting process whose
//! intensities depend on history-derived covariates and a Gaussian latent
//! factor. Parameters are estimated by stochastic EM with a SCAD-penalized
//! coordinate-descent M-step; penalty levels are chosen by BIC.

pub mod covariates;
pub mod evalsuite;
pub mod events;
pub mod inference;
pub mod lik;
pub mod model;
pub mod mstep;
pub mod num;
pub mod rng;
pub mod sampler;
pub mod select;
pub mod simulator;
pub mod stem;

pub use covariates::{CovariatePanel, CovariateRule, CovariateSpec, PiecewiseConstantPath, SubjectPanel};
pub use events::{Dataset, EventCatalog, EventRecord, EventSequence};
pub use model::{AnchorMode, ConstraintMask, Coord, Dims, PenaltyConfig};
pub use num::Scalar;

/// Double-precision parameters, the type used by the fitting engine.
pub type Params = model::ModelParams<f64>;
