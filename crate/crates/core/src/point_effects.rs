//! Stratified point effects `θ̂(x_t; z_t) = μ̂(x_t, z_t) − μ̂(x_t, 0)` and their
//! within-time covariance.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::seqdata::{Observations, OutcomeFamily, Stratum};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary<S> {
    pub mean: S,
    pub count: usize,
    /// Denominator `count - 1`; zero for singleton cells.
    pub sample_variance: S,
}

/// How the variance of a stratum mean is estimated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// One within-cell variance pooled over every cell at every time.
    PooledNormal,
    /// `p(1-p)/n` for bernoulli outcomes, `ȳ/n` for poisson, sample variance otherwise.
    PluginFamily,
    /// Per-cell sample variance over cell size.
    #[default]
    Sample,
}

impl FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled_normal" | "pooled-normal" => Ok(Self::PooledNormal),
            "plugin_family" | "plugin-family" => Ok(Self::PluginFamily),
            "sample" => Ok(Self::Sample),
            other => Err(Error::InvalidArgument(format!("unknown variance mode `{other}`"))),
        }
    }
}

impl fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PooledNormal => "pooled_normal",
            Self::PluginFamily => "plugin_family",
            Self::Sample => "sample",
        })
    }
}

/// What to do with a treated stratum whose control cell is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimabilityPolicy {
    #[default]
    Strict,
    /// Drop the stratum and list it in [`PointEffectEstimate::excluded`].
    Exclude,
}

/// Point effects at one time with their covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeBlock<S> {
    pub t: usize,
    pub strata: Vec<Stratum>,
    pub theta: Vec<S>,
    pub cov: Matrix<S>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Exclusion {
    pub stratum: Stratum,
    pub reason: String,
}

/// Stacked point effects over all times; the covariance is block diagonal by time.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEffectEstimate<S> {
    blocks: Vec<TimeBlock<S>>,
    excluded: Vec<Exclusion>,
    n: usize,
}

impl<S: Scalar> PointEffectEstimate<S> {
    pub fn new(blocks: Vec<TimeBlock<S>>, excluded: Vec<Exclusion>, n: usize) -> Self {
        Self { blocks, excluded, n }
    }

    /// Number of subjects (with multiplicity) behind the estimate.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[TimeBlock<S>] {
        &self.blocks
    }

    pub fn excluded(&self) -> &[Exclusion] {
        &self.excluded
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.strata.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stratum ordering shared with the design matrix.
    pub fn strata(&self) -> Vec<Stratum> {
        self.blocks.iter().flat_map(|b| b.strata.iter().copied()).collect()
    }

    pub fn theta(&self) -> Vec<S> {
        self.blocks.iter().flat_map(|b| b.theta.iter().copied()).collect()
    }

    /// Full block-diagonal covariance Σ̂.
    pub fn covariance(&self) -> Matrix<S> {
        let blocks: Vec<Matrix<S>> = self.blocks.iter().map(|b| b.cov.clone()).collect();
        Matrix::block_diagonal(&blocks)
    }
}

/// Dense per-cell moments at one time.
pub(crate) struct CellStats<S> {
    pub count: Vec<usize>,
    pub mean: Vec<S>,
    /// Sum of squared deviations from the cell mean.
    pub ss: Vec<S>,
}

impl<S: Scalar> CellStats<S> {
    pub fn compute<D: Observations + ?Sized>(data: &D, t: usize) -> Self {
        let ds = data.dataset();
        let cells = ds.layout().cell_count(t);
        let codes = ds.cell_codes(t);
        let y = ds.outcomes();
        let mut count = vec![0usize; cells];
        let mut sum = vec![S::zero(); cells];
        match data.counts() {
            None => {
                for (&c, &v) in codes.iter().zip(y) {
                    count[c as usize] += 1;
                    sum[c as usize] += S::of(v);
                }
            }
            Some(w) => {
                for ((&c, &v), &k) in codes.iter().zip(y).zip(w) {
                    if k > 0 {
                        count[c as usize] += k as usize;
                        sum[c as usize] += S::of(v) * S::of_usize(k as usize);
                    }
                }
            }
        }
        let mean: Vec<S> = sum
            .iter()
            .zip(&count)
            .map(|(&s, &n)| if n > 0 { s / S::of_usize(n) } else { S::zero() })
            .collect();
        let mut ss = vec![S::zero(); cells];
        match data.counts() {
            None => {
                for (&c, &v) in codes.iter().zip(y) {
                    let d = S::of(v) - mean[c as usize];
                    ss[c as usize] += d * d;
                }
            }
            Some(w) => {
                for ((&c, &v), &k) in codes.iter().zip(y).zip(w) {
                    if k > 0 {
                        let d = S::of(v) - mean[c as usize];
                        ss[c as usize] += d * d * S::of_usize(k as usize);
                    }
                }
            }
        }
        Self { count, mean, ss }
    }

    fn sample_variance(&self, c: usize) -> S {
        if self.count[c] > 1 {
            self.ss[c] / S::of_usize(self.count[c] - 1)
        } else {
            S::zero()
        }
    }
}

/// Mean, size and sample variance of every non-empty cell at time `t`.
pub fn stratum_means<S: Scalar, D: Observations + ?Sized>(
    data: &D,
    t: usize,
) -> Result<BTreeMap<Stratum, CellSummary<S>>> {
    let ds = data.dataset();
    ds.layout().check_time(t)?;
    let stats = CellStats::<S>::compute(data, t);
    Ok((0..stats.count.len())
        .filter(|&c| stats.count[c] > 0)
        .map(|c| {
            (
                ds.layout().cell(t, c),
                CellSummary {
                    mean: stats.mean[c],
                    count: stats.count[c],
                    sample_variance: stats.sample_variance(c),
                },
            )
        })
        .collect())
}

fn pooled_variance<S: Scalar>(all: &[CellStats<S>]) -> S {
    let (mut ss, mut df) = (S::zero(), 0usize);
    for stats in all {
        for (c, &n) in stats.count.iter().enumerate() {
            if n > 1 {
                ss += stats.ss[c];
                df += n - 1;
            }
        }
    }
    if df > 0 {
        ss / S::of_usize(df)
    } else {
        S::zero()
    }
}

struct MeanVariance<'a, S> {
    stats: &'a CellStats<S>,
    mode: VarianceMode,
    family: OutcomeFamily,
    pooled: S,
}

impl<S: Scalar> MeanVariance<'_, S> {
    fn of(&self, c: usize) -> S {
        let n = S::of_usize(self.stats.count[c]);
        match (self.mode, self.family) {
            (VarianceMode::PooledNormal, _) => self.pooled / n,
            (VarianceMode::PluginFamily, OutcomeFamily::Bernoulli) => {
                let p = self.stats.mean[c];
                p * (S::one() - p) / n
            }
            (VarianceMode::PluginFamily, OutcomeFamily::Poisson) => self.stats.mean[c] / n,
            _ => self.stats.sample_variance(c) / n,
        }
    }
}

fn time_block<S: Scalar, D: Observations + ?Sized>(
    data: &D,
    t: usize,
    stats: &CellStats<S>,
    mode: VarianceMode,
    pooled: S,
    policy: EstimabilityPolicy,
    excluded: &mut Vec<Exclusion>,
) -> Result<TimeBlock<S>> {
    let ds = data.dataset();
    let layout = ds.layout();
    let variance = MeanVariance {
        stats,
        mode,
        family: ds.family(),
        pooled,
    };
    let mut strata = Vec::new();
    let mut theta = Vec::new();
    // (treated cell, control cell) per entry
    let mut cells = Vec::new();
    for &x in layout.x_levels(t) {
        let control = layout.cell_code(t, x, 0);
        for &z in layout.z_levels(t).iter().filter(|&&z| z != 0) {
            let treated = layout.cell_code(t, x, z).expect("level from layout");
            if stats.count[treated] == 0 {
                continue;
            }
            let stratum = Stratum::new(t, x, z);
            match control.filter(|&c| stats.count[c] > 0) {
                Some(c0) => {
                    strata.push(stratum);
                    theta.push(stats.mean[treated] - stats.mean[c0]);
                    cells.push((treated, c0));
                }
                None => {
                    let reason = format!("control cell (t={t}, x{t}={x}, z{t}=0) is empty");
                    match policy {
                        EstimabilityPolicy::Strict => return Err(Error::Inestimable { stratum, reason }),
                        EstimabilityPolicy::Exclude => excluded.push(Exclusion { stratum, reason }),
                    }
                }
            }
        }
    }
    let m = strata.len();
    let mut cov = Matrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            let (ta, ca) = cells[a];
            let (tb, cb) = cells[b];
            let mut v = S::zero();
            if ta == tb {
                v += variance.of(ta);
            }
            if ca == cb {
                v += variance.of(ca);
            }
            cov[(a, b)] = v;
        }
    }
    Ok(TimeBlock { t, strata, theta, cov })
}

/// Point effects at time `t` with their covariance; every treated stratum
/// observed at `t` must have a non-empty control cell.
pub fn estimate_point_effects<S: Scalar, D: Observations + ?Sized>(
    data: &D,
    t: usize,
    mode: VarianceMode,
) -> Result<TimeBlock<S>> {
    let ds = data.dataset();
    ds.layout().check_time(t)?;
    let all: Vec<CellStats<S>> = if mode == VarianceMode::PooledNormal {
        (1..=ds.n_times()).map(|s| CellStats::compute(data, s)).collect()
    } else {
        vec![CellStats::compute(data, t)]
    };
    let pooled = pooled_variance(&all);
    let stats = if mode == VarianceMode::PooledNormal { &all[t - 1] } else { &all[0] };
    time_block(data, t, stats, mode, pooled, EstimabilityPolicy::Strict, &mut Vec::new())
}

/// Point effects at every time.
pub fn estimate_all_point_effects<S: Scalar, D: Observations + ?Sized>(
    data: &D,
    mode: VarianceMode,
    policy: EstimabilityPolicy,
) -> Result<PointEffectEstimate<S>> {
    let ds = data.dataset();
    let all: Vec<CellStats<S>> = (1..=ds.n_times()).map(|t| CellStats::compute(data, t)).collect();
    let pooled = pooled_variance(&all);
    let mut excluded = Vec::new();
    let blocks = all
        .iter()
        .enumerate()
        .map(|(i, stats)| time_block(data, i + 1, stats, mode, pooled, policy, &mut excluded))
        .collect::<Result<Vec<_>>>()?;
    Ok(PointEffectEstimate::new(blocks, excluded, data.total()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;
    use crate::seqdata::{parse_dataset, Record, Schema, SequentialDataset};

    fn dataset(rows: &[(i64, i64, f64)]) -> SequentialDataset {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, &(x, z, y))| Record {
                id: i.to_string(),
                x: vec![x],
                z: vec![z],
                extras: vec![],
                y,
            })
            .collect();
        SequentialDataset::new(OutcomeFamily::Normal, Schema::simple(1, vec![true]), records).unwrap()
    }

    #[test]
    fn singleton_and_pair_cells() {
        let d = dataset(&[(0, 0, 5.0), (0, 1, 1.0), (0, 1, 3.0)]);
        let means = stratum_means::<f64, _>(&d, 1).unwrap();
        let single = means[&Stratum::new(1, 0, 0)];
        assert_eq!((single.mean, single.count, single.sample_variance), (5.0, 1, 0.0));
        let pair = means[&Stratum::new(1, 0, 1)];
        assert_eq!((pair.mean, pair.count, pair.sample_variance), (2.0, 2, 2.0));
    }

    #[test]
    fn theta_is_difference_of_means() {
        let d = dataset(&[(0, 0, 4.0), (0, 0, 4.0), (0, 1, 7.0), (0, 1, 7.0)]);
        let block = estimate_point_effects::<f64, _>(&d, 1, VarianceMode::Sample).unwrap();
        assert_eq!(block.strata, vec![Stratum::new(1, 0, 1)]);
        assert_eq!(block.theta, vec![3.0]);
    }

    #[test]
    fn sample_variance_mode_formula() {
        // treated cell: 50 values with sample variance 2; control: 50 with sample variance 4
        let mut rows = Vec::new();
        let a = (2.0f64 * 49.0 / 50.0).sqrt();
        let b = (4.0f64 * 49.0 / 50.0).sqrt();
        for i in 0..50 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            rows.push((0, 1, 10.0 + s * a));
            rows.push((0, 0, s * b));
        }
        let d = dataset(&rows);
        let block = estimate_point_effects::<f64, _>(&d, 1, VarianceMode::Sample).unwrap();
        assert!((block.cov[(0, 0)] - 0.12).abs() < 1e-12, "{}", block.cov[(0, 0)]);
    }

    #[test]
    fn shared_control_cell_covariance() {
        let d = dataset(&[
            (0, 0, 1.0),
            (0, 0, 3.0),
            (0, 1, 2.0),
            (0, 1, 6.0),
            (0, 2, 5.0),
            (0, 2, 9.0),
            (1, 0, 0.0),
            (1, 0, 2.0),
            (1, 1, 1.0),
            (1, 1, 1.0),
        ]);
        let block = estimate_point_effects::<f64, _>(&d, 1, VarianceMode::Sample).unwrap();
        assert_eq!(block.strata.len(), 3);
        // control at x=0 has variance 2 over 2 observations
        assert!((block.cov[(0, 1)] - 1.0).abs() < 1e-12);
        assert_eq!(block.cov[(0, 2)], 0.0);
        assert!(block.cov.is_symmetric(0.0));
        assert!(symmetric_eigenvalues(&block.cov)[0] >= -1e-10);
    }

    #[test]
    fn empty_control_cell_is_inestimable() {
        let d = dataset(&[(0, 0, 1.0), (0, 1, 2.0), (1, 1, 3.0)]);
        match estimate_point_effects::<f64, _>(&d, 1, VarianceMode::Sample) {
            Err(Error::Inestimable { stratum, .. }) => assert_eq!(stratum, Stratum::new(1, 1, 1)),
            other => panic!("unexpected {other:?}"),
        }
        let est = estimate_all_point_effects::<f64, _>(&d, VarianceMode::Sample, EstimabilityPolicy::Exclude).unwrap();
        assert_eq!(est.len(), 1);
        assert_eq!(est.excluded()[0].stratum, Stratum::new(1, 1, 1));
    }

    #[test]
    fn four_entries_for_four_covariate_levels() {
        let mut text = String::from("id,z1,x2,z2,y\n");
        let mut id = 0;
        for x in 0..4 {
            for z in 0..2 {
                for r in 0..3 {
                    id += 1;
                    text.push_str(&format!("{id},{},{x},{z},{}\n", (id % 2), x * 10 + z + r));
                }
            }
        }
        let d = parse_dataset(&text, OutcomeFamily::Normal).unwrap();
        let block = estimate_point_effects::<f64, _>(&d, 2, VarianceMode::Sample).unwrap();
        assert_eq!(block.strata, (0..4).map(|j| Stratum::new(2, j, 1)).collect::<Vec<_>>());
        assert!(block.theta.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn plugin_and_pooled_modes() {
        let records = [(0, 0.0), (0, 1.0), (0, 1.0), (1, 1.0), (1, 1.0), (1, 0.0), (1, 1.0)]
            .iter()
            .enumerate()
            .map(|(i, &(z, y))| Record {
                id: i.to_string(),
                x: vec![0],
                z: vec![z],
                extras: vec![],
                y,
            })
            .collect();
        let d = SequentialDataset::new(OutcomeFamily::Bernoulli, Schema::simple(1, vec![false]), records).unwrap();
        let plug = estimate_point_effects::<f64, _>(&d, 1, VarianceMode::PluginFamily).unwrap();
        let expect = (2.0 / 3.0) * (1.0 / 3.0) / 3.0 + 0.75 * 0.25 / 4.0;
        assert!((plug.cov[(0, 0)] - expect).abs() < 1e-14);
        let pooled = estimate_point_effects::<f64, _>(&d, 1, VarianceMode::PooledNormal).unwrap();
        let ss = 2.0 / 3.0 + 0.75;
        let s2 = ss / 5.0;
        assert!((pooled.cov[(0, 0)] - (s2 / 3.0 + s2 / 4.0)).abs() < 1e-14);
    }

    #[test]
    fn f32_estimates() {
        let d = dataset(&[(0, 0, 4.0), (0, 0, 6.0), (0, 1, 7.0), (0, 1, 9.0)]);
        let block = estimate_point_effects::<f32, _>(&d, 1, VarianceMode::Sample).unwrap();
        assert_eq!(block.theta, vec![3.0f32]);
        assert!((block.cov[(0, 0)] - 2.0).abs() < 1e-6);
    }
}
