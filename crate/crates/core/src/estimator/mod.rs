//! GLS estimation of the blip parameter, restricted estimation, Wald tests.

mod bootstrap;

pub use bootstrap::{bootstrap_replicates, BootstrapOutcome};

use serde::{Deserialize, Serialize};

use crate::blip_model::DesignMatrix;
use crate::chi2::{chi2_survival, chi2_upper_quantile, noncentral_chi2_survival};
use crate::error::{Error, Result};
use crate::linalg::{back_substitute, numerical_rank, singular_values, symmetric_eigenvalues, upper_triangular_inverse, Cholesky, Matrix, Qr};
use crate::point_effects::PointEffectEstimate;
use crate::scalar::Scalar;
use crate::seqdata::Stratum;

const CONDITION_LIMIT: f64 = 1e12;

/// Estimated blip parameter with conditional and (optionally) marginal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct BlipEstimate<S> {
    pub gamma: Vec<S>,
    pub cov_conditional: Matrix<S>,
    pub cov_marginal: Option<Matrix<S>>,
    pub n: usize,
    pub strata: Vec<Stratum>,
    pub labels: Vec<String>,
}

impl<S: Scalar> BlipEstimate<S> {
    pub fn k(&self) -> usize {
        self.gamma.len()
    }

    pub fn conditional_se(&self) -> Vec<S> {
        self.cov_conditional.diagonal().into_iter().map(|v| v.max(S::zero()).sqrt()).collect()
    }

    pub fn marginal_se(&self) -> Option<Vec<S>> {
        self.cov_marginal
            .as_ref()
            .map(|c| c.diagonal().into_iter().map(|v| v.max(S::zero()).sqrt()).collect())
    }
}

/// Linear hypothesis `H γ = ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<S> {
    pub name: Option<String>,
    h: Matrix<S>,
    rho: Vec<S>,
}

impl<S: Scalar> Hypothesis<S> {
    pub fn new(h: Matrix<S>, rho: Vec<S>) -> Result<Self> {
        let l = h.rows();
        if l == 0 || h.cols() == 0 {
            return Err(Error::InvalidHypothesis("H must have at least one row and column".into()));
        }
        if rho.len() != l {
            return Err(Error::InvalidHypothesis(format!("rho has {} entries but H has {l} rows", rho.len())));
        }
        if l > h.cols() {
            return Err(Error::InvalidHypothesis(format!("H has {l} rows but only {} columns", h.cols())));
        }
        let tol = S::of(1e-10).max(S::epsilon() * S::of_usize(10 * h.cols()));
        if numerical_rank(&h, tol) < l {
            return Err(Error::InvalidHypothesis("H does not have full row rank".into()));
        }
        Ok(Self { name: None, h, rho })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// `γ_j = value` in a `k`-dimensional model.
    pub fn single(k: usize, j: usize, value: S) -> Result<Self> {
        let mut h = Matrix::zeros(1, k);
        if j >= k {
            return Err(Error::InvalidHypothesis(format!("component {j} out of range for k={k}")));
        }
        h[(0, j)] = S::one();
        Self::new(h, vec![value])
    }

    pub fn h(&self) -> &Matrix<S> {
        &self.h
    }

    pub fn rho(&self) -> &[S] {
        &self.rho
    }

    pub fn df(&self) -> usize {
        self.h.rows()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if self.h.cols() != k {
            return Err(Error::InvalidHypothesis(format!(
                "H has {} columns but the model has k={k} parameters",
                self.h.cols()
            )));
        }
        Ok(())
    }

    fn residual(&self, gamma: &[S]) -> Vec<S> {
        self.h.mul_vec(gamma).iter().zip(&self.rho).map(|(&a, &b)| a - b).collect()
    }
}

/// Serialized form of a hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub h: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
}

impl HypothesisJson {
    pub fn into_hypothesis(self) -> Result<Hypothesis<f64>> {
        if self.h.is_empty() || self.h.iter().any(|r| r.len() != self.h[0].len()) {
            return Err(Error::InvalidHypothesis("H must be a non-empty rectangular matrix".into()));
        }
        let hyp = Hypothesis::new(Matrix::from_rows(&self.h), self.rho)?;
        Ok(match self.name {
            Some(n) => hyp.named(n),
            None => hyp,
        })
    }
}

impl From<&Hypothesis<f64>> for HypothesisJson {
    fn from(h: &Hypothesis<f64>) -> Self {
        Self {
            name: h.name.clone(),
            h: h.h.to_rows(),
            rho: h.rho.clone(),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum HypothesisFile {
    One(HypothesisJson),
    Many(Vec<HypothesisJson>),
}

/// Parses a hypothesis file: one `{h, rho}` object or an array of them.
pub fn parse_hypotheses(text: &str) -> Result<Vec<Hypothesis<f64>>> {
    let file: HypothesisFile = serde_json::from_str(text)?;
    let list = match file {
        HypothesisFile::One(h) => vec![h],
        HypothesisFile::Many(v) => v,
    };
    if list.is_empty() {
        return Err(Error::InvalidHypothesis("hypothesis file lists no hypotheses".into()));
    }
    list.into_iter().map(HypothesisJson::into_hypothesis).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaldResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub critical_value: f64,
    pub reject: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noncentrality: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
}

fn check_positive_definite<S: Scalar>(eigs: &[S], what: &str) -> Result<()> {
    let max = eigs.iter().copied().fold(S::zero(), S::max);
    let min = eigs.iter().copied().fold(S::infinity(), S::min);
    if !(max > S::zero()) || !(min > S::of(1e-12) * max) || !min.is_finite() {
        return Err(Error::Weighting(format!(
            "{what}: smallest eigenvalue {:.3e} vs largest {:.3e}",
            min.as_f64(),
            max.as_f64()
        )));
    }
    Ok(())
}

/// Conditional GLS estimate `γ̂ = (C'Σ⁻¹C)⁻¹C'Σ⁻¹θ̂` with covariance `(C'Σ⁻¹C)⁻¹`.
pub fn gls<S: Scalar>(theta: &PointEffectEstimate<S>, design: &DesignMatrix<S>) -> Result<BlipEstimate<S>> {
    let strata = theta.strata();
    if strata != design.strata {
        return Err(Error::InvalidArgument(
            "design matrix rows do not follow the point-effect ordering".into(),
        ));
    }
    let c = &design.matrix;
    let (m, k) = (c.rows(), c.cols());
    if m < k {
        return Err(Error::Identifiability {
            rank: m,
            k,
            dependent_column: design.labels[m.min(k - 1)].clone(),
        });
    }
    let mut eigs = Vec::with_capacity(m);
    for block in theta.blocks() {
        eigs.extend(symmetric_eigenvalues(&block.cov));
    }
    check_positive_definite(&eigs, "point-effect covariance is singular")?;
    let sigma = theta.covariance();
    let chol = Cholesky::new(&sigma).ok_or_else(|| Error::Weighting("Cholesky factorization failed".into()))?;
    let a = chol.whiten(c);
    let b = chol.solve_lower(&theta.theta());
    let qr = Qr::new(&a);
    let r = qr.r();
    let sv = singular_values(&r);
    let condition = (sv[0] / sv[k - 1]).as_f64();
    if !condition.is_finite() || condition > CONDITION_LIMIT {
        return Err(Error::IllConditioned { condition });
    }
    let qtb = qr.qt_mul(&b);
    let gamma = back_substitute(&r, &qtb[..k]);
    let rinv = upper_triangular_inverse(&r);
    let cov = rinv.matmul(&rinv.transpose()).symmetrized();
    Ok(BlipEstimate {
        gamma,
        cov_conditional: cov,
        cov_marginal: None,
        n: theta.n(),
        strata,
        labels: design.labels.clone(),
    })
}

/// GLS estimate projected onto `{γ : Hγ = ρ}` in the conditional-covariance metric.
pub fn restricted_gls<S: Scalar>(est: &BlipEstimate<S>, hyp: &Hypothesis<S>) -> Result<BlipEstimate<S>> {
    hyp.check_k(est.k())?;
    let v = &est.cov_conditional;
    let hv = hyp.h.matmul(v);
    let m = hv.matmul(&hyp.h.transpose()).symmetrized();
    check_positive_definite(&symmetric_eigenvalues(&m), "H V H'").map_err(|_| Error::ConstraintDegenerate)?;
    let chol = Cholesky::new(&m).ok_or(Error::ConstraintDegenerate)?;
    let resid = hyp.residual(&est.gamma);
    let w = chol.solve(&resid);
    let shift = hv.transpose().mul_vec(&w);
    let gamma = est.gamma.iter().zip(&shift).map(|(&g, &s)| g - s).collect();
    let m_inv_hv = chol.solve_matrix(&hv);
    let cov = v.sub(&hv.transpose().matmul(&m_inv_hv)).symmetrized();
    Ok(BlipEstimate {
        gamma,
        cov_conditional: cov,
        cov_marginal: None,
        n: est.n,
        strata: est.strata.clone(),
        labels: est.labels.clone(),
    })
}

/// `(Hγ − ρ)' (H cov H')⁻¹ (Hγ − ρ)`.
pub fn wald_statistic<S: Scalar>(gamma: &[S], cov: &Matrix<S>, hyp: &Hypothesis<S>) -> Result<f64> {
    hyp.check_k(gamma.len())?;
    let m = hyp.h.matmul(cov).matmul(&hyp.h.transpose()).symmetrized();
    check_positive_definite(&symmetric_eigenvalues(&m), "H cov H'").map_err(|_| Error::DegenerateTest)?;
    let chol = Cholesky::new(&m).ok_or(Error::DegenerateTest)?;
    let z = chol.solve_lower(&hyp.residual(gamma));
    Ok(z.iter().map(|&v| v.as_f64() * v.as_f64()).sum())
}

/// Wald test of `hyp` using the marginal (bootstrap) covariance.
pub fn wald<S: Scalar>(est: &BlipEstimate<S>, hyp: &Hypothesis<S>, alpha: f64) -> Result<WaldResult> {
    let cov = est.cov_marginal.as_ref().ok_or(Error::MissingMarginalCovariance)?;
    wald_with_covariance(&est.gamma, cov, hyp, alpha)
}

pub fn wald_with_covariance<S: Scalar>(
    gamma: &[S],
    cov: &Matrix<S>,
    hyp: &Hypothesis<S>,
    alpha: f64,
) -> Result<WaldResult> {
    check_alpha(alpha)?;
    let statistic = wald_statistic(gamma, cov, hyp)?;
    let df = hyp.df();
    let critical_value = chi2_upper_quantile(alpha, df);
    Ok(WaldResult {
        statistic,
        df,
        p_value: chi2_survival(statistic, df),
        alpha,
        critical_value,
        reject: statistic > critical_value,
        noncentrality: None,
        power: None,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Noncentrality `λ` at `gamma_true` and the asymptotic power at level `alpha`.
pub fn noncentral_power<S: Scalar>(
    hyp: &Hypothesis<S>,
    gamma_true: &[S],
    cov: &Matrix<S>,
    alpha: f64,
) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let lambda = wald_statistic(gamma_true, cov, hyp)?;
    let crit = chi2_upper_quantile(alpha, hyp.df());
    Ok((lambda, noncentral_chi2_survival(crit, hyp.df(), lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point_effects::TimeBlock;

    fn estimate(theta: Vec<f64>, cov: Matrix<f64>, c: Matrix<f64>) -> BlipEstimate<f64> {
        let m = theta.len();
        let strata: Vec<Stratum> = (0..m).map(|i| Stratum::new(1, i as i64, 1)).collect();
        let pe = PointEffectEstimate::new(
            vec![TimeBlock {
                t: 1,
                strata: strata.clone(),
                theta,
                cov,
            }],
            vec![],
            100,
        );
        let k = c.cols();
        let design = DesignMatrix {
            strata,
            labels: (0..k).map(|j| format!("g{j}")).collect(),
            matrix: c,
            rank: k,
            condition: 1.0,
        };
        gls(&pe, &design).unwrap()
    }

    #[test]
    fn identity_design() {
        let est = estimate(vec![1.0, -2.0, 3.5], Matrix::identity(3), Matrix::identity(3));
        assert_eq!(est.gamma, vec![1.0, -2.0, 3.5]);
        assert!(est.cov_conditional.max_abs_diff(&Matrix::identity(3)) < 1e-14);
    }

    #[test]
    fn just_identified_ignores_sigma() {
        let c = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.5, 3.0]]);
        let sigma = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 0.5]]);
        let est = estimate(vec![1.0, 2.0], sigma, c.clone());
        let back = c.mul_vec(&est.gamma);
        assert!((back[0] - 1.0).abs() < 1e-12 && (back[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn overdetermined_matches_normal_equations() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]]);
        let sigma = Matrix::diag(&[1.0, 2.0, 4.0]);
        let theta = vec![1.0, 2.5, 2.0];
        let est = estimate(theta.clone(), sigma.clone(), c.clone());
        let si = Cholesky::new(&sigma).unwrap().inverse();
        let ctsi = c.transpose().matmul(&si);
        let normal = ctsi.matmul(&c);
        let g = Cholesky::new(&normal).unwrap().solve(&ctsi.mul_vec(&theta));
        assert!((g[0] - est.gamma[0]).abs() < 1e-12 && (g[1] - est.gamma[1]).abs() < 1e-12);
        let cov = Cholesky::new(&normal).unwrap().inverse();
        assert!(cov.max_abs_diff(&est.cov_conditional) < 1e-12);
    }

    #[test]
    fn singular_sigma_is_weighting_error() {
        let strata = vec![Stratum::new(1, 0, 1)];
        let pe = PointEffectEstimate::new(
            vec![TimeBlock {
                t: 1,
                strata: strata.clone(),
                theta: vec![1.0],
                cov: Matrix::zeros(1, 1),
            }],
            vec![],
            1,
        );
        let design = DesignMatrix {
            strata,
            labels: vec!["g".into()],
            matrix: Matrix::identity(1),
            rank: 1,
            condition: 1.0,
        };
        assert!(matches!(gls(&pe, &design), Err(Error::Weighting(_))));
    }

    #[test]
    fn restricted_feasible_and_full() {
        let v = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let est = BlipEstimate {
            gamma: vec![1.0, 2.0],
            cov_conditional: v.clone(),
            cov_marginal: None,
            n: 10,
            strata: vec![],
            labels: vec!["a".into(), "b".into()],
        };
        let feasible = Hypothesis::single(2, 0, 1.0).unwrap();
        assert_eq!(restricted_gls(&est, &feasible).unwrap().gamma, vec![1.0, 2.0]);
        let full = Hypothesis::new(Matrix::identity(2), vec![5.0, -1.0]).unwrap();
        let r: BlipEstimate<f64> = restricted_gls(&est, &full).unwrap();
        assert!((r.gamma[0] - 5.0).abs() < 1e-12 && (r.gamma[1] + 1.0).abs() < 1e-12);
        assert!(r.cov_conditional.max_abs() < 1e-12);
    }

    #[test]
    fn wald_scalar_example() {
        let est = BlipEstimate {
            gamma: vec![1.0],
            cov_conditional: Matrix::diag(&[0.25]),
            cov_marginal: Some(Matrix::diag(&[0.25])),
            n: 10,
            strata: vec![],
            labels: vec!["g".into()],
        };
        let res = wald(&est, &Hypothesis::single(1, 0, 0.0).unwrap(), 0.05).unwrap();
        assert!((res.statistic - 4.0).abs() < 1e-14);
        assert!((res.p_value - 0.045_500_263_896_358_4).abs() < 1e-12);
        assert!(res.reject);
        let null = wald(&est, &Hypothesis::single(1, 0, 1.0).unwrap(), 0.05).unwrap();
        assert_eq!((null.statistic, null.p_value), (0.0, 1.0));
    }

    #[test]
    fn wald_requires_marginal() {
        let est = BlipEstimate {
            gamma: vec![1.0],
            cov_conditional: Matrix::diag(&[0.25]),
            cov_marginal: None,
            n: 10,
            strata: vec![],
            labels: vec!["g".into()],
        };
        assert!(matches!(
            wald(&est, &Hypothesis::single(1, 0, 0.0).unwrap(), 0.05),
            Err(Error::MissingMarginalCovariance)
        ));
    }

    #[test]
    fn hypothesis_validation() {
        let dup = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        assert!(Hypothesis::new(dup, vec![0.0, 0.0]).is_err());
        assert!(Hypothesis::new(Matrix::identity(2), vec![0.0]).is_err());
        let parsed = parse_hypotheses(r#"{"h": [[1, 0], [0, 1]], "rho": [0, 0]}"#).unwrap();
        assert_eq!(parsed[0].df(), 2);
        let many = parse_hypotheses(r#"[{"name": "a", "h": [[1, 0]], "rho": [1]}, {"h": [[0, 1]], "rho": [0]}]"#).unwrap();
        assert_eq!(many.len(), 2);
        assert_eq!(many[0].name.as_deref(), Some("a"));
    }

    #[test]
    fn power_limits() {
        let cov = Matrix::diag(&[1.0]);
        let hyp = Hypothesis::single(1, 0, 0.0).unwrap();
        let (lambda, power) = noncentral_power(&hyp, &[0.0], &cov, 0.05).unwrap();
        assert_eq!(lambda, 0.0);
        assert!((power - 0.05).abs() < 1e-12);
        let (lambda, power) = noncentral_power(&hyp, &[10.0], &cov, 0.05).unwrap();
        assert!(lambda >= 100.0 && power > 0.999);
    }
}
