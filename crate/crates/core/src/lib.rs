//! Double debiased estimation of policy relevant treatment effects under a
//! partially linear marginal treatment effect model.

pub mod dataset;
pub mod dgp;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod io;
pub mod kernel;
pub mod montecarlo;
pub mod nuisance;
pub mod policy;
pub mod score;
pub mod special;

pub use dataset::{Dataset, FeatureMap};
pub use error::{PrteError, Result};
pub use kernel::Bandwidths;
pub use policy::Policy;
pub use estimator::{estimate, EstimateResult, EstimationConfig};
pub use montecarlo::{run_replications, McConfig, McReport};
