//! Latent Gaussian dynamic factor models for multivariate count time series.
//!
//! Counts are modeled as `X_{i,t} = F_i⁻¹(Φ(Z_{i,t}))` where the latent
//! Gaussian series follows `Z_t = Λ Y_t + ε_t` and the factors `Y_t` follow a
//! stationary VAR(p). The crate covers simulation, moment-based estimation
//! through correlation links, rank and lag selection, and particle-filter
//! forecasting.

// `!(x > 0.0)` is used on purpose so NaN takes the error path.
// Published approximation coefficients are kept digit for digit.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::excessive_precision
)]

pub mod error;
pub mod estimation;
pub mod harness;
pub mod kalman;
pub mod linalg;
pub mod link;
pub mod marginals;
pub mod model;
pub mod normal;
pub mod selection;
pub mod smc;
pub mod spline;

pub use error::{Error, Result};
pub use estimation::{fit, FitOptions, FittedModel};
pub use harness::{run_experiment, ExperimentConfig, ExperimentReport, MetricsReport};
pub use kalman::{KalmanCovs, StateSpace};
pub use link::{InverseLinkTable, LinkCache, LinkFunction, LinkGrid};
pub use marginals::{fit_marginal, Family, HermiteCoeffs, Marginal};
pub use model::{DfmParams, LatentAcfSet, Simulation};
pub use selection::{LagMethod, RankMethod, Selection};
pub use smc::{ForecastDistribution, ParticleEnsemble, ResampleStrategy, SisrOptions};

/// Count data: `T` rows (time) by `d` columns (series).
pub type CountMatrix = nalgebra::DMatrix<u32>;
