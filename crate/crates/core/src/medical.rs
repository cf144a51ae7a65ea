//! Two-period workflow for a binary outcome with baseline covariates
//! `x11, x12, ...`, a binary treatment `z1`, a binary intermediate covariate
//! `x2` and a binary treatment `z2`.
//!
//! Point effects come from identity-link quasi-likelihood fits: one model for
//! `z1` and one model per level of `x2` for `z2`. Since `z2` is the last
//! treatment its point effects equal its blip effects, and the point effect of
//! `z1` is `γ1 + γ20·c20 + γ21·c21` with `c2j` the difference in
//! `P(x2 = j, z2 = 1 | z1)` between `z1 = 1` and `z1 = 0`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blip_model::{build_design_matrix, empirical_transitions, SnmmSpec};
use crate::chi2::chi2_survival;
use crate::error::{Error, Result};
use crate::estimator::{bootstrap_replicates, wald_with_covariance, Hypothesis, WaldResult};
use crate::linalg::{back_substitute, upper_triangular_inverse, Matrix};
use crate::regression::{regression_point_effects, IrlsOptions, MeanModel, MeanModelSpec, RegressionFit, Term};
use crate::rng::{derive_seed, stream_rng};
use crate::seqdata::{ExtraColumn, Observations, OutcomeFamily, Record, Schema, SequentialDataset, Stratum};

/// Significance level of the optional covariate selection.
pub const SELECTION_LEVEL: f64 = 0.1;

const Z_975: f64 = 1.959963984540054;

fn baseline_name(column: &str) -> Option<&str> {
    column
        .strip_prefix("x1")
        .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
}

/// Parses the two-period CSV layout `[id,] x11, x12, ..., z1, x2, z2, y`.
///
/// Baseline columns `x1k` become real-valued covariates at time 1; `id` is
/// optional and defaults to the row number.
pub fn parse_medical(text: &str) -> Result<SequentialDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let position = |name: &str| headers.iter().position(|h| h == name);
    let mut required = [0usize; 4];
    for (slot, name) in ["z1", "x2", "z2", "y"].iter().enumerate() {
        required[slot] = position(name).ok_or_else(|| Error::Schema(format!("missing column `{name}`")))?;
    }
    let id_col = position("id");
    let mut baseline = Vec::new();
    for (c, h) in headers.iter().enumerate() {
        if let Some(name) = baseline_name(h) {
            if baseline.iter().any(|(_, n): &(usize, String)| n == name) {
                return Err(Error::Schema(format!("duplicate column `{h}`")));
            }
            baseline.push((c, name.to_string()));
        } else if !matches!(h, "id" | "z1" | "x2" | "z2" | "y") {
            return Err(Error::Schema(format!("unrecognized column `{h}`")));
        }
    }
    if headers.len() != baseline.len() + 4 + usize::from(id_col.is_some()) {
        return Err(Error::Schema("duplicate column in header".into()));
    }

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let line = row + 2;
        let rec = result.map_err(|e| Error::Parse {
            line: e.position().map_or(line, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let int = |c: usize| {
            field(c).parse::<i64>().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: cannot parse `{}`", &headers[c], field(c)),
            })
        };
        let real = |c: usize| {
            field(c).parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: cannot parse `{}`", &headers[c], field(c)),
            })
        };
        let id = match id_col {
            Some(c) if field(c).is_empty() => {
                return Err(Error::Parse {
                    line,
                    message: "empty subject id".into(),
                })
            }
            Some(c) => field(c).to_string(),
            None => (row + 1).to_string(),
        };
        records.push(Record {
            id,
            x: vec![0, int(required[1])?],
            z: vec![int(required[0])?, int(required[2])?],
            extras: baseline.iter().map(|&(c, _)| real(c)).collect::<Result<_>>()?,
            y: real(required[3])?,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schema = Schema {
        n_times: 2,
        covariate_observed: vec![false, true],
        extra_columns: baseline.into_iter().map(|(_, name)| ExtraColumn { t: 1, name }).collect(),
    };
    SequentialDataset::new(OutcomeFamily::Bernoulli, schema, records)
}

pub fn read_medical(path: impl AsRef<Path>) -> Result<SequentialDataset> {
    parse_medical(&std::fs::read_to_string(path)?)
}

fn check_shape(data: &SequentialDataset) -> Result<()> {
    let ok = data.n_times() == 2
        && !data.covariate_observed(1)
        && data.covariate_observed(2)
        && data.extra_columns().iter().all(|c| c.t == 1)
        && data.family() == OutcomeFamily::Bernoulli;
    if ok {
        Ok(())
    } else {
        Err(Error::Schema(
            "expected a two-period bernoulli dataset with baseline covariates x1k, z1, x2, z2".into(),
        ))
    }
}

/// Serializes a two-period dataset in the layout read by [`parse_medical`].
pub fn medical_csv(data: &SequentialDataset) -> Result<String> {
    check_shape(data)?;
    let extras = data.extra_columns();
    let mut out = String::from("id");
    for c in extras {
        out.push_str(&format!(",x1{}", c.name));
    }
    out.push_str(",z1,x2,z2,y\n");
    for i in 0..data.n() {
        out.push_str(data.id(i));
        for c in extras {
            let v = data.extra(1, &c.name).expect("declared column")[i];
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{},{},{},{}\n", data.z(1, i), data.x(2, i), data.z(2, i), data.y(i)));
    }
    Ok(out)
}

/// Settings of the two-period workflow.
#[derive(Debug, Clone, PartialEq)]
pub struct MedicalOptions {
    /// Baseline columns adjusted for in the `z1` model; `None` means all.
    pub t1_covariates: Option<Vec<String>>,
    /// Baseline columns adjusted for in the `z2` models; `None` means all.
    pub t2_covariates: Option<Vec<String>>,
    /// Drop covariates that are not significant at [`SELECTION_LEVEL`].
    pub auto_select: bool,
    pub boot: usize,
    pub seed: u64,
    pub alpha: f64,
    pub irls: IrlsOptions,
}

impl Default for MedicalOptions {
    fn default() -> Self {
        Self {
            t1_covariates: None,
            t2_covariates: None,
            auto_select: false,
            boot: 500,
            seed: 0,
            alpha: 0.05,
            irls: IrlsOptions::default(),
        }
    }
}

/// Significance of one baseline covariate in the candidate models.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateDiagnostic {
    pub covariate: String,
    /// p-value in the `z1` model, if it was a candidate there.
    pub p_value_t1: Option<f64>,
    /// Smallest p-value over the `z2` models, if it was a candidate there.
    pub p_value_t2: Option<f64>,
    pub kept_t1: bool,
    pub kept_t2: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub name: String,
    pub n: usize,
    pub iterations: usize,
    pub clamped: bool,
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub p_values: Vec<f64>,
}

impl ModelSummary {
    fn new(name: String, fit: &RegressionFit) -> Self {
        Self {
            name,
            n: fit.n,
            iterations: fit.iterations,
            clamped: fit.clamped,
            labels: fit.labels.clone(),
            coefficients: fit.coefficients.clone(),
            standard_errors: fit.standard_errors(),
            p_values: fit.p_values(),
        }
    }
}

/// Estimate with a bootstrap standard error, normal 95% interval and the
/// Wald test of a zero value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectRow {
    pub label: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub statistic: f64,
    pub p_value: f64,
}

impl EffectRow {
    fn new(label: &str, estimate: f64, variance: f64) -> Self {
        let se = variance.max(0.0).sqrt();
        let statistic = if se > 0.0 { (estimate / se).powi(2) } else { f64::NAN };
        Self {
            label: label.to_string(),
            estimate,
            se,
            ci_lower: estimate - Z_975 * se,
            ci_upper: estimate + Z_975 * se,
            statistic,
            p_value: if se > 0.0 { chi2_survival(statistic, 1) } else { f64::NAN },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub used: usize,
    pub failed: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedicalReport {
    pub n: usize,
    pub auto_select: bool,
    pub covariates_t1: Vec<String>,
    pub covariates_t2: Vec<String>,
    pub diagnostics: Vec<CovariateDiagnostic>,
    pub models: Vec<ModelSummary>,
    pub c20: f64,
    pub c21: f64,
    /// `γ1, γ20, γ21`.
    pub blip_effects: Vec<EffectRow>,
    /// `θ1, θ20, θ21`.
    pub point_effects: Vec<EffectRow>,
    /// Joint test of `γ = 0`.
    pub joint_test: WaldResult,
    pub bootstrap: BootstrapSummary,
    pub warnings: Vec<String>,
}

impl MedicalReport {
    pub fn gamma(&self) -> Vec<f64> {
        self.blip_effects.iter().map(|r| r.estimate).collect()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.point_effects.iter().map(|r| r.estimate).collect()
    }
}

const BLIP_LABELS: [&str; 3] = ["gamma_1", "gamma_20", "gamma_21"];
const POINT_LABELS: [&str; 3] = ["theta_1", "theta_20", "theta_21"];

fn terms(names: &[String]) -> Vec<Term> {
    std::iter::once(Term::Intercept)
        .chain(names.iter().map(|n| Term::Extra {
            t: 1,
            name: baseline_name(n).expect("validated name").to_string(),
        }))
        .collect()
}

fn model_spec(data: &SequentialDataset, t1: &[String], t2: &[String]) -> MeanModelSpec {
    let mut models = vec![MeanModel {
        time: 1,
        covariate_level: None,
        terms: terms(t1),
    }];
    for &level in data.covariate_levels(2) {
        let mut adjust = terms(t2);
        adjust.push(Term::Treatment(1));
        models.push(MeanModel {
            time: 2,
            covariate_level: Some(level),
            terms: adjust,
        });
    }
    MeanModelSpec { models }
}

fn resolve(data: &SequentialDataset, declared: &Option<Vec<String>>) -> Result<Vec<String>> {
    let available: Vec<String> = data.extra_columns().iter().map(|c| format!("x1{}", c.name)).collect();
    match declared {
        None => Ok(available),
        Some(list) => {
            for name in list {
                if !available.contains(name) {
                    return Err(Error::Schema(format!("covariate `{name}` is not a baseline column")));
                }
            }
            Ok(list.clone())
        }
    }
}

/// One pass of stages 1 to 3: `(γ̂, θ̂, c20, c21)` and the fitted models.
struct Stage {
    gamma: Vec<f64>,
    theta: Vec<f64>,
    c: [f64; 2],
    fits: Vec<RegressionFit>,
}

fn estimate<D: Observations + ?Sized>(data: &D, spec: &MeanModelSpec, options: IrlsOptions) -> Result<Stage> {
    let ds = data.dataset();
    let reg = regression_point_effects(data, spec, options)?;
    let strata = reg.estimate.strata();
    let expected = [Stratum::new(1, 0, 1), Stratum::new(2, 0, 1), Stratum::new(2, 1, 1)];
    if strata != expected {
        return Err(Error::Inestimable {
            stratum: expected.iter().find(|s| !strata.contains(s)).copied().unwrap_or(expected[0]),
            reason: "the workflow needs x2 and both treatments to take the values 0 and 1".into(),
        });
    }
    let snmm = SnmmSpec::per_stratum(ds.layout());
    let transitions = empirical_transitions::<f64, _>(data);
    let design = build_design_matrix(&snmm, &transitions, &strata)?;
    let theta = reg.estimate.theta();
    // the design is unit upper triangular, so the last-period blips equal their point effects exactly
    let gamma = back_substitute(&design.matrix, &theta);
    Ok(Stage {
        gamma,
        theta,
        c: [design.matrix[(0, 1)], design.matrix[(0, 2)]],
        fits: reg.fits,
    })
}

fn selection_diagnostics(
    data: &SequentialDataset,
    t1: &[String],
    t2: &[String],
    options: IrlsOptions,
) -> Result<Vec<CovariateDiagnostic>> {
    let stage = estimate(data, &model_spec(data, t1, t2), options)?;
    let p_of = |fit: &RegressionFit, name: &str| {
        let idx = fit.labels.iter().position(|l| l == name)?;
        Some(fit.p_values()[idx])
    };
    let mut names: Vec<String> = t1.to_vec();
    names.extend(t2.iter().filter(|n| !t1.contains(n)).cloned());
    Ok(names
        .into_iter()
        .map(|name| {
            let p1 = p_of(&stage.fits[0], &name);
            let p2 = stage.fits[1..]
                .iter()
                .filter_map(|f| p_of(f, &name))
                .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.min(p))));
            CovariateDiagnostic {
                kept_t1: p1.is_some_and(|p| p <= SELECTION_LEVEL),
                kept_t2: p2.is_some_and(|p| p <= SELECTION_LEVEL),
                covariate: name,
                p_value_t1: p1,
                p_value_t2: p2,
            }
        })
        .collect())
}

/// Runs the four-stage workflow: mean models, decomposition, blip estimates,
/// bootstrap covariance and Wald tests.
pub fn run_medical(data: &SequentialDataset, options: &MedicalOptions) -> Result<MedicalReport> {
    check_shape(data)?;
    let mut t1 = resolve(data, &options.t1_covariates)?;
    let mut t2 = resolve(data, &options.t2_covariates)?;
    let diagnostics = selection_diagnostics(data, &t1, &t2, options.irls)?;
    if options.auto_select {
        let kept = |name: &String, f: fn(&CovariateDiagnostic) -> bool| {
            diagnostics.iter().any(|d| &d.covariate == name && f(d))
        };
        t1.retain(|n| kept(n, |d| d.kept_t1));
        t2.retain(|n| kept(n, |d| d.kept_t2));
    }
    let spec = model_spec(data, &t1, &t2);
    let stage = estimate(data, &spec, options.irls)?;
    let boot = bootstrap_replicates(data, options.boot, options.seed, |sample| {
        let s = estimate(sample, &spec, options.irls)?;
        Ok(s.gamma.into_iter().chain(s.theta).collect())
    })?;
    let cov = &boot.cov;
    let gamma_cov = Matrix::from_fn(3, 3, |a, b| cov[(a, b)]);
    let joint = Hypothesis::new(Matrix::identity(3), vec![0.0; 3])?.named("gamma = 0");
    let joint_test = wald_with_covariance(&stage.gamma, &gamma_cov, &joint, options.alpha)?;

    let mut warnings = Vec::new();
    let mut models = vec![ModelSummary::new("z1".into(), &stage.fits[0])];
    for (fit, level) in stage.fits[1..].iter().zip(data.covariate_levels(2)) {
        models.push(ModelSummary::new(format!("z2 | x2={level}"), fit));
    }
    for m in &models {
        if m.clamped {
            warnings.push(format!("model `{}`: fitted means left (0, 1) and were clamped", m.name));
        }
    }
    if boot.failed > 0 {
        warnings.push(format!("{} of {} bootstrap replicates failed", boot.failed, options.boot));
    }
    Ok(MedicalReport {
        n: data.n(),
        auto_select: options.auto_select,
        covariates_t1: t1,
        covariates_t2: t2,
        diagnostics,
        models,
        c20: stage.c[0],
        c21: stage.c[1],
        blip_effects: (0..3).map(|j| EffectRow::new(BLIP_LABELS[j], stage.gamma[j], cov[(j, j)])).collect(),
        point_effects: (0..3)
            .map(|j| EffectRow::new(POINT_LABELS[j], stage.theta[j], cov[(3 + j, 3 + j)]))
            .collect(),
        joint_test,
        bootstrap: BootstrapSummary {
            replicates: options.boot,
            used: boot.used,
            failed: boot.failed,
            seed: options.seed,
        },
        warnings,
    })
}

/// Model-based covariance of `γ̂` implied by the regression covariances,
/// `C⁻¹ Σ C⁻ᵀ`; used where a bootstrap would be too expensive.
pub fn model_based_gamma_covariance(data: &SequentialDataset, options: &MedicalOptions) -> Result<(Vec<f64>, Matrix<f64>)> {
    check_shape(data)?;
    let t1 = resolve(data, &options.t1_covariates)?;
    let t2 = resolve(data, &options.t2_covariates)?;
    let spec = model_spec(data, &t1, &t2);
    let reg = regression_point_effects(data, &spec, options.irls)?;
    let strata = reg.estimate.strata();
    let snmm = SnmmSpec::per_stratum(data.layout());
    let design = build_design_matrix(&snmm, &empirical_transitions::<f64, _>(data), &strata)?;
    let cinv = upper_triangular_inverse(&design.matrix);
    let gamma = back_substitute(&design.matrix, &reg.estimate.theta());
    let cov = cinv.matmul(&reg.estimate.covariance()).matmul(&cinv.transpose()).symmetrized();
    Ok((gamma, cov))
}

/// Planted truth of the synthetic two-period generator.
///
/// Baseline covariates are `x11 ~ Bernoulli(0.5)`, `x12 ~ Bernoulli(0.6)`
/// (no effect) and `x13` an age drawn from `N(65, 10²)` clamped to `[35, 95]`.
/// The outcome mean is
/// `a + b_x11·x11 + b_age·(x13 − 65)/10 + g1·z1 + d·x2 + γ2[x2]·z2` with
/// `g1 = γ1 − d·(p_x2[1] − p_x2[0])`, so that the blip of `z1` is `γ1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedicalTruth {
    pub gamma1: f64,
    pub gamma20: f64,
    pub gamma21: f64,
    pub intercept: f64,
    pub b_x11: f64,
    pub b_age: f64,
    /// Effect of an advanced stage `x2 = 1`.
    pub d: f64,
    /// `P(z1 = 1)`.
    pub p_z1: f64,
    /// `P(x2 = 1 | z1)` for `z1 = 0, 1`.
    pub p_x2: [f64; 2],
    /// `P(z2 = 1 | x2)` for `x2 = 0, 1`.
    pub p_z2: [f64; 2],
}

impl Default for MedicalTruth {
    fn default() -> Self {
        Self {
            gamma1: -0.08,
            gamma20: 0.02,
            gamma21: -0.05,
            intercept: 0.6,
            b_x11: -0.05,
            b_age: -0.03,
            d: -0.15,
            p_z1: 0.5,
            p_x2: [0.5, 0.4],
            p_z2: [0.4, 0.6],
        }
    }
}

impl MedicalTruth {
    /// Every blip set to zero and `x2` independent of `z1`, so that `z1` is
    /// independent of everything else.
    pub fn null() -> Self {
        Self {
            gamma1: 0.0,
            gamma20: 0.0,
            gamma21: 0.0,
            p_x2: [0.45, 0.45],
            ..Self::default()
        }
    }

    pub fn gamma(&self) -> [f64; 3] {
        [self.gamma1, self.gamma20, self.gamma21]
    }

    /// Coefficient of `z1` in the outcome mean.
    fn g1(&self) -> f64 {
        self.gamma1 - self.d * (self.p_x2[1] - self.p_x2[0])
    }

    fn mean(&self, x11: f64, age: f64, z1: i64, x2: i64, z2: i64) -> f64 {
        let gamma2 = if x2 == 1 { self.gamma21 } else { self.gamma20 };
        self.intercept + self.b_x11 * x11 + self.b_age * (age - 65.0) / 10.0 + self.g1() * z1 as f64
            + self.d * x2 as f64
            + gamma2 * z2 as f64
    }

    fn validate(&self) -> Result<()> {
        let probs = [self.p_z1, self.p_x2[0], self.p_x2[1], self.p_z2[0], self.p_z2[1]];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidSpec("generator probabilities must lie in [0, 1]".into()));
        }
        for corner in 0..64u32 {
            let bit = |k: u32| i64::from((corner >> k) & 1);
            let age = if bit(1) == 1 { 95.0 } else { 35.0 };
            let mu = self.mean(bit(0) as f64, age, bit(2), bit(3), bit(4));
            if !(0.0..=1.0).contains(&mu) {
                return Err(Error::InvalidSpec(format!("outcome mean {mu} leaves [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Draws `n` subjects; subject `i` uses stream `i` of `seed`.
pub fn generate_medical(truth: &MedicalTruth, n: usize, seed: u64) -> Result<SequentialDataset> {
    truth.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let age = Normal::new(65.0, 10.0).expect("valid normal");
    let records = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut bern = |p: f64| i64::from(rng.random::<f64>() < p);
            let x11 = bern(0.5);
            let x12 = bern(0.6);
            let z1 = bern(truth.p_z1);
            let x2 = bern(truth.p_x2[z1 as usize]);
            let z2 = bern(truth.p_z2[x2 as usize]);
            let x13: f64 = Distribution::<f64>::sample(&age, &mut rng).clamp(35.0, 95.0);
            let x13 = (x13 * 10.0).round() / 10.0;
            let mu = truth.mean(x11 as f64, x13, z1, x2, z2);
            let y = f64::from(u8::from(rng.random::<f64>() < mu));
            Record {
                id: (i + 1).to_string(),
                x: vec![0, x2],
                z: vec![z1, z2],
                extras: vec![x11 as f64, x12 as f64, x13],
                y,
            }
        })
        .collect();
    let schema = Schema {
        n_times: 2,
        covariate_observed: vec![false, true],
        extra_columns: ["1", "2", "3"]
            .iter()
            .map(|name| ExtraColumn {
                t: 1,
                name: name.to_string(),
            })
            .collect(),
    };
    SequentialDataset::new(OutcomeFamily::Bernoulli, schema, records)
}

/// Rejection counts of the Wald tests over synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationSummary {
    pub datasets: usize,
    pub failed: usize,
    /// Rejections of `γ1 = 0`, `γ20 = 0`, `γ21 = 0`.
    pub individual_rejections: [usize; 3],
    pub joint_rejections: usize,
}

impl CalibrationSummary {
    pub fn joint_rate(&self) -> f64 {
        self.joint_rejections as f64 / (self.datasets - self.failed) as f64
    }

    pub fn individual_rates(&self) -> [f64; 3] {
        let used = (self.datasets - self.failed) as f64;
        self.individual_rejections.map(|r| r as f64 / used)
    }
}

/// Repeats the workflow on `datasets` synthetic samples of size `n`; dataset
/// `i` is drawn from seed `derive_seed(seed, [i, 0])` and bootstrapped with
/// `derive_seed(seed, [i, 1])`.
pub fn calibrate(
    truth: &MedicalTruth,
    n: usize,
    datasets: usize,
    options: &MedicalOptions,
    seed: u64,
) -> Result<CalibrationSummary> {
    let outcomes: Vec<Option<([bool; 3], bool)>> = (0..datasets)
        .into_par_iter()
        .map(|i| {
            let data = generate_medical(truth, n, derive_seed(seed, &[i as u64, 0])).ok()?;
            let opts = MedicalOptions {
                seed: derive_seed(seed, &[i as u64, 1]),
                ..options.clone()
            };
            let report = run_medical(&data, &opts).ok()?;
            let truth = truth.gamma();
            let reject = |j: usize| {
                let r = &report.blip_effects[j];
                ((r.estimate - truth[j]) / r.se).abs() > Z_975
            };
            Some(([reject(0), reject(1), reject(2)], report.joint_test.reject))
        })
        .collect();
    let failed = outcomes.iter().filter(|o| o.is_none()).count();
    if failed * 10 > datasets || failed == datasets {
        return Err(Error::Study { failed, total: datasets });
    }
    let mut summary = CalibrationSummary {
        datasets,
        failed,
        individual_rejections: [0; 3],
        joint_rejections: 0,
    };
    for (individual, joint) in outcomes.into_iter().flatten() {
        for j in 0..3 {
            summary.individual_rejections[j] += usize::from(individual[j]);
        }
        summary.joint_rejections += usize::from(joint);
    }
    Ok(summary)
}
