//! The stratified estimation pipeline: point effects, transitions, design
//! matrix, GLS, and the bootstrap around it.

use serde::{Deserialize, Serialize};

use crate::blip_model::{build_design_matrix, empirical_transitions, DesignMatrix, SnmmSpec, TransitionTable};
use crate::error::Result;
use crate::estimator::{bootstrap_replicates, gls, BlipEstimate, BootstrapOutcome};
use crate::point_effects::{estimate_all_point_effects, EstimabilityPolicy, PointEffectEstimate, VarianceMode};
use crate::scalar::Scalar;
use crate::seqdata::{Observations, SequentialDataset};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineOptions {
    #[serde(default)]
    pub variance_mode: VarianceMode,
    #[serde(default)]
    pub policy: EstimabilityPolicy,
}

/// Everything produced by one pass of the pipeline.
#[derive(Debug, Clone)]
pub struct Fit<S> {
    pub point_effects: PointEffectEstimate<S>,
    pub transitions: TransitionTable<S>,
    pub design: DesignMatrix<S>,
    pub estimate: BlipEstimate<S>,
}

/// Conditional GLS fit of the SNMM.
pub fn fit<S: Scalar, D: Observations + ?Sized>(data: &D, snmm: &SnmmSpec, options: PipelineOptions) -> Result<Fit<S>> {
    let point_effects = estimate_all_point_effects(data, options.variance_mode, options.policy)?;
    let transitions = empirical_transitions(data);
    let design = build_design_matrix(snmm, &transitions, &point_effects.strata())?;
    let estimate = gls(&point_effects, &design)?;
    Ok(Fit {
        point_effects,
        transitions,
        design,
        estimate,
    })
}

/// Bootstrap covariance of `γ̂` (the marginal covariance).
pub fn bootstrap_marginal_cov<S: Scalar>(
    data: &SequentialDataset,
    snmm: &SnmmSpec,
    options: PipelineOptions,
    b: usize,
    seed: u64,
) -> Result<BootstrapOutcome<S>> {
    bootstrap_replicates(data, b, seed, |sample| {
        fit::<S, _>(sample, snmm, options).map(|f| f.estimate.gamma)
    })
}

/// [`fit`] followed by the bootstrap; the estimate carries the marginal covariance.
pub fn fit_with_bootstrap<S: Scalar>(
    data: &SequentialDataset,
    snmm: &SnmmSpec,
    options: PipelineOptions,
    b: usize,
    seed: u64,
) -> Result<(Fit<S>, BootstrapOutcome<S>)> {
    let mut fitted = fit::<S, _>(data, snmm, options)?;
    let boot = bootstrap_marginal_cov(data, snmm, options, b, seed)?;
    fitted.estimate.cov_marginal = Some(boot.cov.clone());
    Ok((fitted, boot))
}
