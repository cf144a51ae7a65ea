//! Wald tests for blip effects of sequential treatments.
//!
//! Point effects estimated by stratification are decomposed into blip effects
//! through a design matrix built from transition proportions; the blip
//! parameter of a linear structural nested mean model is then estimated by
//! generalized least squares and tested with a bootstrap Wald statistic.

pub mod blip_model;
pub mod chi2;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod medical;
pub mod output;
pub mod oracle_dgp;
pub mod pipeline;
pub mod point_effects;
pub mod regression;
pub mod rng;
pub mod scalar;
pub mod seqdata;
pub mod study;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type PointEffectEstimate64 = point_effects::PointEffectEstimate<f64>;
pub type TransitionTable64 = blip_model::TransitionTable<f64>;
pub type DesignMatrix64 = blip_model::DesignMatrix<f64>;
pub type BlipEstimate64 = estimator::BlipEstimate<f64>;
pub type Hypothesis64 = estimator::Hypothesis<f64>;
pub type Fit64 = pipeline::Fit<f64>;
