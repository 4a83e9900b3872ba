//! Ranking of unlabelled compounds by the probability that their activity
//! exceeds a threshold, corrected for activity-dependent reporting bias and
//! for the loss of predictive accuracy far from the training data.

pub mod bins;
pub mod covariance;
pub mod dataset;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod fingerprint;
pub mod isotonic;
pub mod mixture;
pub mod optim;
pub mod pipeline;
pub mod prior;
pub mod regressors;
pub mod scoring;
pub mod sampler;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};
pub use fingerprint::Fingerprint;
