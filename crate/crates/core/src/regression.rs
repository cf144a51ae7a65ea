//! Regression-adjusted point effects: identity-link quasi-likelihood fits by
//! iteratively reweighted least squares, one model per time (optionally per
//! covariate level), whose treatment coefficients are the point effects.

use serde::Serialize;

use crate::chi2::chi2_survival;
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigenvalues, Cholesky, Matrix};
use crate::point_effects::{PointEffectEstimate, TimeBlock};
use crate::seqdata::{Level, Observations, Stratum};

/// Adjusting term of a mean model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Intercept,
    /// Numeric value of the extra covariate column `x{t}_{name}`.
    Extra { t: usize, name: String },
    /// Numeric value of `x_t`.
    Covariate(usize),
    /// Numeric value of `z_t` (an earlier treatment).
    Treatment(usize),
}

impl Term {
    pub fn label(&self) -> String {
        match self {
            Term::Intercept => "intercept".into(),
            Term::Extra { t, name } => format!("x{t}{name}"),
            Term::Covariate(t) => format!("x{t}"),
            Term::Treatment(t) => format!("z{t}"),
        }
    }
}

/// Mean model for the outcome among subjects at one time, optionally
/// restricted to one covariate level; its treatment indicators for `z_time`
/// are appended after `terms`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanModel {
    pub time: usize,
    pub covariate_level: Option<Level>,
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanModelSpec {
    pub models: Vec<MeanModel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Fitted means are kept inside `[clamp, 1 - clamp]`.
    pub clamp: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100,
            clamp: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionFit {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    #[serde(skip)]
    pub covariance: Matrix<f64>,
    pub iterations: usize,
    /// Some fitted mean left `(0, 1)` during iteration and was clamped.
    pub clamped: bool,
    pub n: usize,
}

impl RegressionFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.covariance.diagonal().into_iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Two-sided normal-approximation p-values for each coefficient being zero.
    pub fn p_values(&self) -> Vec<f64> {
        self.coefficients
            .iter()
            .zip(self.standard_errors())
            .map(|(&b, se)| if se > 0.0 { chi2_survival((b / se).powi(2), 1) } else { f64::NAN })
            .collect()
    }

    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.coefficients[i])
    }
}

fn weighted_normal_equations(x: &Matrix<f64>, y: &[f64], w: &[f64]) -> (Matrix<f64>, Vec<f64>) {
    let p = x.cols();
    let mut xtwx = Matrix::zeros(p, p);
    let mut xtwy = vec![0.0; p];
    for i in 0..x.rows() {
        if w[i] == 0.0 {
            continue;
        }
        let row = x.row(i);
        for a in 0..p {
            let wa = w[i] * row[a];
            xtwy[a] += wa * y[i];
            for b in a..p {
                xtwx[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    (xtwx, xtwy)
}

fn solve_spd(a: &Matrix<f64>, labels: &[String]) -> Result<Cholesky<f64>> {
    let eig = symmetric_eigenvalues(a);
    let max = eig.last().copied().unwrap_or(0.0);
    if !(max > 0.0) || eig[0] <= 1e-12 * max {
        return Err(Error::SingularDesign(format!(
            "columns [{}] are linearly dependent",
            labels.join(", ")
        )));
    }
    Cholesky::new(a).ok_or_else(|| Error::SingularDesign("X'WX is not positive definite".into()))
}

/// Identity-link fit with binomial variance `μ(1 − μ)`, dispersion fixed at 1;
/// `w` holds frequency weights.
///
/// Each step is a Newton step on the quasi-score, falling back to Fisher
/// scoring while the observed information is not positive definite; the
/// reported covariance is the inverse expected information at the solution.
pub fn fit_identity_irls(
    x: &Matrix<f64>,
    y: &[f64],
    w: &[f64],
    labels: Vec<String>,
    options: IrlsOptions,
) -> Result<RegressionFit> {
    let p = x.cols();
    let n = w.iter().filter(|&&v| v > 0.0).count();
    let (xtx, xty) = weighted_normal_equations(x, y, w);
    let mut beta = solve_spd(&xtx, &labels)?.solve(&xty);
    let mut clamped = false;
    let mut current = quasi_likelihood(x, y, w, &beta, options.clamp);
    for iteration in 1..=options.max_iterations {
        let mut step = quasi_score_step(x, y, w, &beta, options.clamp, &labels, &mut clamped)?;
        // halve the step until the quasi-likelihood does not decrease
        let mut candidate: Vec<f64> = beta.iter().zip(&step).map(|(b, d)| b + d).collect();
        let mut value = quasi_likelihood(x, y, w, &candidate, options.clamp);
        for _ in 0..40 {
            if value >= current - 1e-12 * current.abs() {
                break;
            }
            step.iter_mut().for_each(|d| *d *= 0.5);
            candidate = beta.iter().zip(&step).map(|(b, d)| b + d).collect();
            value = quasi_likelihood(x, y, w, &candidate, options.clamp);
        }
        let change = step.iter().map(|d| d.abs()).fold(0.0, f64::max);
        beta = candidate;
        current = value;
        if change < options.tolerance {
            let mut weights = vec![0.0; x.rows()];
            for i in 0..x.rows() {
                if w[i] > 0.0 {
                    let mu = fitted(x.row(i), &beta).clamp(options.clamp, 1.0 - options.clamp);
                    weights[i] = w[i] / (mu * (1.0 - mu));
                }
            }
            let (info, _) = weighted_normal_equations(x, y, &weights);
            let covariance = solve_spd(&info, &labels)?.inverse();
            debug_assert_eq!(covariance.rows(), p);
            return Ok(RegressionFit {
                labels,
                coefficients: beta,
                covariance,
                iterations: iteration,
                clamped,
                n,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: options.max_iterations,
        last: beta,
    })
}

fn fitted(row: &[f64], beta: &[f64]) -> f64 {
    row.iter().zip(beta).map(|(a, b)| a * b).sum()
}

/// `Σ w [y log μ + (1 − y) log(1 − μ)]` with clamped means; concave in `β`
/// while every mean lies inside the clamp bounds.
fn quasi_likelihood(x: &Matrix<f64>, y: &[f64], w: &[f64], beta: &[f64], clamp: f64) -> f64 {
    (0..x.rows())
        .filter(|&i| w[i] > 0.0)
        .map(|i| {
            let mu = fitted(x.row(i), beta).clamp(clamp, 1.0 - clamp);
            w[i] * (y[i] * mu.ln() + (1.0 - y[i]) * (1.0 - mu).ln())
        })
        .sum()
}

/// Newton (or Fisher scoring) increment for the quasi-score
/// `U(β) = Σ w x (y − μ) / V(μ)`.
fn quasi_score_step(
    x: &Matrix<f64>,
    y: &[f64],
    w: &[f64],
    beta: &[f64],
    clamp: f64,
    labels: &[String],
    clamped: &mut bool,
) -> Result<Vec<f64>> {
    let p = x.cols();
    let mut score = vec![0.0; p];
    let mut expected = Matrix::zeros(p, p);
    let mut observed = Matrix::zeros(p, p);
    for i in 0..x.rows() {
        if w[i] == 0.0 {
            continue;
        }
        let row = x.row(i);
        let raw = fitted(row, beta);
        let mu = raw.clamp(clamp, 1.0 - clamp);
        *clamped |= mu != raw;
        let v = mu * (1.0 - mu);
        let resid = y[i] - mu;
        let e = w[i] / v;
        // −∂/∂μ of (y − μ)/V(μ), with V'(μ) = 1 − 2μ
        let o = w[i] * (1.0 / v + resid * (1.0 - 2.0 * mu) / (v * v));
        // a clamped mean does not move with β, so it adds nothing to the
        // derivatives of the quasi-likelihood being maximized
        let active = if mu == raw { 1.0 } else { 0.0 };
        for a in 0..p {
            score[a] += active * e * resid * row[a];
            for b in a..p {
                expected[(a, b)] += e * row[a] * row[b];
                observed[(a, b)] += active * o * row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            expected[(a, b)] = expected[(b, a)];
            observed[(a, b)] = observed[(b, a)];
        }
    }
    match Cholesky::new(&observed) {
        Some(chol) => Ok(chol.solve(&score)),
        None => Ok(solve_spd(&expected, labels)?.solve(&score)),
    }
}

fn term_values<D: Observations + ?Sized>(data: &D, term: &Term) -> Result<Vec<f64>> {
    let ds = data.dataset();
    Ok(match term {
        Term::Intercept => vec![1.0; ds.n()],
        Term::Extra { t, name } => ds
            .extra(*t, name)
            .ok_or_else(|| Error::Schema(format!("missing covariate column `{}`", term.label())))?
            .to_vec(),
        Term::Covariate(t) => {
            ds.layout().check_time(*t)?;
            ds.covariates(*t).iter().map(|&v| v as f64).collect()
        }
        Term::Treatment(t) => {
            ds.layout().check_time(*t)?;
            ds.treatments(*t).iter().map(|&v| v as f64).collect()
        }
    })
}

/// Fits one mean model; returns the fit and the strata of its treatment coefficients.
pub fn fit_mean_model<D: Observations + ?Sized>(
    data: &D,
    model: &MeanModel,
    options: IrlsOptions,
) -> Result<(RegressionFit, Vec<Stratum>)> {
    let ds = data.dataset();
    let t = model.time;
    ds.layout().check_time(t)?;
    let x_level = match model.covariate_level {
        Some(level) => level,
        None if ds.covariate_levels(t).len() == 1 => ds.covariate_levels(t)[0],
        None => {
            return Err(Error::InvalidSpec(format!(
                "model at time {t} must be restricted to one level of x{t}"
            )));
        }
    };
    let treated: Vec<Level> = ds.treatment_levels(t).iter().copied().filter(|&z| z != 0).collect();
    let columns = model
        .terms
        .iter()
        .map(|term| term_values(data, term))
        .collect::<Result<Vec<_>>>()?;
    let mut labels: Vec<String> = model.terms.iter().map(Term::label).collect();
    for &z in &treated {
        labels.push(if treated.len() == 1 { format!("z{t}") } else { format!("z{t}={z}") });
    }
    let counts = data.counts();
    let rows: Vec<usize> = (0..ds.n())
        .filter(|&i| counts.is_none_or(|c| c[i] > 0) && ds.x(t, i) == x_level)
        .collect();
    let p = labels.len();
    let mut x = Matrix::zeros(rows.len(), p);
    let mut y = Vec::with_capacity(rows.len());
    let mut w = Vec::with_capacity(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        for (c, col) in columns.iter().enumerate() {
            x[(r, c)] = col[i];
        }
        for (c, &z) in treated.iter().enumerate() {
            x[(r, columns.len() + c)] = if ds.z(t, i) == z { 1.0 } else { 0.0 };
        }
        y.push(ds.y(i));
        w.push(counts.map_or(1.0, |c| c[i] as f64));
    }
    if rows.len() < p {
        return Err(Error::SingularDesign(format!(
            "model at time {t} has {} subjects for {p} coefficients",
            rows.len()
        )));
    }
    let fit = fit_identity_irls(&x, &y, &w, labels, options)?;
    let strata = treated.iter().map(|&z| Stratum::new(t, x_level, z)).collect();
    Ok((fit, strata))
}

#[derive(Debug, Clone)]
pub struct RegressionPointEffects {
    pub fits: Vec<RegressionFit>,
    pub estimate: PointEffectEstimate<f64>,
}

/// Fits every model of `spec` and stacks the treatment coefficients as point
/// effects, block diagonal by time.
pub fn regression_point_effects<D: Observations + ?Sized>(
    data: &D,
    spec: &MeanModelSpec,
    options: IrlsOptions,
) -> Result<RegressionPointEffects> {
    let mut order: Vec<usize> = (0..spec.models.len()).collect();
    order.sort_by_key(|&m| (spec.models[m].time, spec.models[m].covariate_level));
    let mut fits = vec![None; spec.models.len()];
    let mut blocks: Vec<TimeBlock<f64>> = Vec::new();
    for &m in &order {
        let (fit, strata) = fit_mean_model(data, &spec.models[m], options)?;
        let q = strata.len();
        let p = fit.coefficients.len();
        let theta = fit.coefficients[p - q..].to_vec();
        let cov = Matrix::from_fn(q, q, |a, b| fit.covariance[(p - q + a, p - q + b)]);
        let t = spec.models[m].time;
        match blocks.last_mut() {
            Some(block) if block.t == t => {
                if block.strata.iter().any(|s| strata.contains(s)) {
                    return Err(Error::InvalidSpec(format!("two models at time {t} cover the same stratum")));
                }
                block.strata.extend(strata);
                block.theta.extend(theta);
                block.cov = Matrix::block_diagonal(&[block.cov.clone(), cov]);
            }
            _ => blocks.push(TimeBlock { t, strata, theta, cov }),
        }
        fits[m] = Some(fit);
    }
    Ok(RegressionPointEffects {
        fits: fits.into_iter().map(|f| f.expect("every model fitted")).collect(),
        estimate: PointEffectEstimate::new(blocks, Vec::new(), data.total()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point_effects::stratum_means;
    use crate::seqdata::{parse_dataset, OutcomeFamily};

    #[test]
    fn saturated_model_reproduces_cell_means() {
        let text = "id,z1,y\n1,0,0\n2,0,1\n3,0,1\n4,1,1\n5,1,0\n6,1,0\n7,1,0\n";
        let d = parse_dataset(text, OutcomeFamily::Bernoulli).unwrap();
        let spec = MeanModelSpec {
            models: vec![MeanModel {
                time: 1,
                covariate_level: None,
                terms: vec![Term::Intercept],
            }],
        };
        let res = regression_point_effects(&d, &spec, IrlsOptions::default()).unwrap();
        let means = stratum_means::<f64, _>(&d, 1).unwrap();
        let direct = means[&Stratum::new(1, 0, 1)].mean - means[&Stratum::new(1, 0, 0)].mean;
        assert!((res.estimate.theta()[0] - direct).abs() < 1e-10);
        assert!((res.fits[0].coefficients[0] - 2.0 / 3.0).abs() < 1e-10);
        // model-based variance of a saturated binomial fit equals the plug-in variance
        let v = (2.0 / 3.0) * (1.0 / 3.0) / 3.0 + 0.25 * 0.75 / 4.0;
        assert!((res.estimate.covariance()[(0, 0)] - v).abs() < 1e-8);
    }

    #[test]
    fn collinear_columns_are_singular() {
        let text = "id,z1,y\n1,0,0\n2,0,1\n3,1,1\n4,1,0\n";
        let d = parse_dataset(text, OutcomeFamily::Bernoulli).unwrap();
        let spec = MeanModelSpec {
            models: vec![MeanModel {
                time: 1,
                covariate_level: None,
                terms: vec![Term::Intercept, Term::Treatment(1)],
            }],
        };
        assert!(matches!(
            regression_point_effects(&d, &spec, IrlsOptions::default()),
            Err(Error::SingularDesign(_))
        ));
    }

    #[test]
    fn split_models_per_level() {
        let mut text = String::from("id,z1,x2,z2,y\n");
        for i in 0..80 {
            let (z1, x2, z2) = (i % 2, (i / 2) % 2, (i / 4) % 2);
            let y = ((i * 7) % 5 < 2 + z2) as i32;
            text.push_str(&format!("{i},{z1},{x2},{z2},{y}\n"));
        }
        let d = parse_dataset(&text, OutcomeFamily::Bernoulli).unwrap();
        let spec = MeanModelSpec {
            models: (0..2)
                .map(|j| MeanModel {
                    time: 2,
                    covariate_level: Some(j),
                    terms: vec![Term::Intercept, Term::Treatment(1)],
                })
                .collect(),
        };
        let res = regression_point_effects(&d, &spec, IrlsOptions::default()).unwrap();
        assert_eq!(res.estimate.strata(), vec![Stratum::new(2, 0, 1), Stratum::new(2, 1, 1)]);
        assert_eq!(res.estimate.covariance()[(0, 1)], 0.0);
        assert!(res.fits.iter().all(|f| f.labels.last().unwrap() == "z2"));
    }

    #[test]
    fn clamping_is_flagged() {
        // a linear fit through these points leaves (0, 1) at the ends
        let x = Matrix::from_rows(&(0..6).map(|i| vec![1.0, i as f64]).collect::<Vec<_>>());
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let fit = fit_identity_irls(&x, &y, &[1.0; 6], vec!["a".into(), "b".into()], IrlsOptions::default());
        let fit = fit.unwrap();
        assert!(fit.clamped);
        // the fitted line stays increasing and crosses 1/2 between the groups
        let b = &fit.coefficients;
        assert!(b[1] > 0.0);
        let crossing = (0.5 - b[0]) / b[1];
        assert!((2.0..3.0).contains(&crossing), "{crossing}");
    }
}
