//! Exact data-generating processes for binary treatment sequences.
//!
//! A [`DgpSpec`] fixes the covariate and treatment distributions, a linear
//! SNMM with its true parameter, covariate point effects `ζ` and the grand
//! mean. From these the outcome mean of every full path is constructed so that
//! the blip effects are exactly the ones declared; point effects, transition
//! probabilities and the design decomposition are then available in closed
//! form by enumerating all paths.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blip_model::{design_row, BasisFunction, SnmmSpec, TransitionTable};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::stream_rng;
use crate::seqdata::{Layout, Level, OutcomeFamily, Record, Schema, SequentialDataset, Stratum};

/// Distribution of `x_t` given the history `(x_1, z_1, …, x_{t-1}, z_{t-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateModel {
    /// Same distribution for every history.
    Fixed { probs: Vec<f64> },
    /// One row per history.
    Table { rows: Vec<HistoryRow> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub history: Vec<Level>,
    pub probs: Vec<f64>,
}

/// `P(z_t = 1 | ·)` for a binary treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreatmentModel {
    /// Depends on the latest covariate only; `p[i]` belongs to the i-th covariate level.
    LatestCovariate { p: Vec<f64> },
    /// Depends on the whole history `(x_1, z_1, …, x_t)`.
    History { rows: Vec<TreatmentRow> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentRow {
    pub history: Vec<Level>,
    pub p: f64,
}

/// Covariate point effect `ζ(h_t; x_t = level) = intercept + coefs · h_t`
/// where `h_t = (x_1, z_1, …, x_{t-1}, z_{t-1})`; the lowest level is the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaTerm {
    pub t: usize,
    pub level: Level,
    pub intercept: f64,
    #[serde(default)]
    pub coefs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub family: OutcomeFamily,
    /// Outcome standard deviation (normal family).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub grand_mean: f64,
    pub covariate_levels: Vec<Vec<Level>>,
    pub covariates: Vec<CovariateModel>,
    pub treatments: Vec<TreatmentModel>,
    pub snmm: SnmmSpec,
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub zeta: Vec<ZetaTerm>,
}

impl DgpSpec {
    pub fn n_times(&self) -> usize {
        self.covariate_levels.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Layout with the declared covariate levels and binary treatments.
    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self.covariate_levels.clone(), vec![vec![0, 1]; self.n_times()])
    }

    /// Shipped specification for `family`.
    pub fn default_for(family: OutcomeFamily) -> Self {
        match family {
            OutcomeFamily::Normal => Self::default_normal(),
            OutcomeFamily::Bernoulli => Self::default_bernoulli(),
            OutcomeFamily::Poisson => Self::default_poisson(),
        }
    }

    /// Normal outcome, `γ₀ = (2, 3, −4, −4, 3, 3, −4, −4, 3)`, grand mean −5, σ = 5.
    pub fn default_normal() -> Self {
        let mut zeta = Vec::new();
        for (level, intercept) in [(1, 10.0), (2, 12.0), (3, 13.0)] {
            zeta.push(ZetaTerm {
                t: 2,
                level,
                intercept,
                coefs: vec![0.0, 5.0],
            });
        }
        for (level, intercept, z2) in [(1, 10.0, -2.0), (2, 12.0, -2.0), (3, 10.0, -3.0)] {
            zeta.push(ZetaTerm {
                t: 3,
                level,
                intercept,
                coefs: vec![0.0, -5.0, 3.0, z2],
            });
        }
        default_design(
            OutcomeFamily::Normal,
            Some(5.0),
            -5.0,
            vec![2.0, 3.0, -4.0, -4.0, 3.0, 3.0, -4.0, -4.0, 3.0],
            zeta,
        )
    }

    /// Bernoulli outcome, grand mean 0.55.
    pub fn default_bernoulli() -> Self {
        default_design(
            OutcomeFamily::Bernoulli,
            None,
            0.55,
            vec![-0.2, 0.1, -0.15, -0.15, 0.1, 0.1, -0.15, -0.15, 0.1],
            small_zeta(),
        )
    }

    /// Poisson outcome, grand mean 20.
    pub fn default_poisson() -> Self {
        default_design(
            OutcomeFamily::Poisson,
            None,
            20.0,
            vec![2.0, 4.0, -3.0, -3.0, 4.0, 4.0, -3.0, -3.0, 4.0],
            small_zeta(),
        )
    }
}

fn small_zeta() -> Vec<ZetaTerm> {
    let mut zeta = Vec::new();
    for level in 1..=3 {
        zeta.push(ZetaTerm {
            t: 2,
            level,
            intercept: 0.0,
            coefs: vec![0.0, 0.1],
        });
        zeta.push(ZetaTerm {
            t: 3,
            level,
            intercept: 0.0,
            coefs: vec![0.0, 0.0, 0.0, -0.1],
        });
    }
    zeta
}

/// Probability tables shared by the three shipped specs.
fn default_design(
    family: OutcomeFamily,
    sigma: Option<f64>,
    grand_mean: f64,
    gamma: Vec<f64>,
    zeta: Vec<ZetaTerm>,
) -> DgpSpec {
    let levels = vec![vec![0], vec![0, 1, 2, 3], vec![0, 1, 2, 3]];
    let x2_rows = vec![
        HistoryRow {
            history: vec![0, 0],
            probs: vec![0.35, 0.25, 0.2, 0.2],
        },
        HistoryRow {
            history: vec![0, 1],
            probs: vec![0.2, 0.2, 0.25, 0.35],
        },
    ];
    let mut x3_rows = Vec::new();
    for z1 in 0..2 {
        for x2 in 0..4 {
            for z2 in 0..2 {
                let score: Vec<f64> = (0..4)
                    .map(|v| {
                        let v = v as f64;
                        0.4 * v * (x2 as f64 - 1.5) / 1.5 + 0.3 * (v - 1.5) * (z2 as f64 - 0.5)
                            - 0.2 * (v - 1.5) * (z1 as f64 - 0.5)
                    })
                    .collect();
                let total: f64 = score.iter().map(|s| s.exp()).sum();
                let mut probs: Vec<f64> = score.iter().map(|s| 0.8 * s.exp() / total + 0.05).collect();
                let norm: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= norm);
                x3_rows.push(HistoryRow {
                    history: vec![0, z1, x2, z2],
                    probs,
                });
            }
        }
    }
    let layout = Layout::new(levels.clone(), vec![vec![0, 1]; 3]).expect("static layout");
    DgpSpec {
        family,
        sigma,
        grand_mean,
        covariate_levels: levels,
        covariates: vec![
            CovariateModel::Fixed { probs: vec![1.0] },
            CovariateModel::Table { rows: x2_rows },
            CovariateModel::Table { rows: x3_rows },
        ],
        treatments: vec![
            TreatmentModel::LatestCovariate { p: vec![0.5] },
            TreatmentModel::LatestCovariate {
                p: vec![0.3, 0.45, 0.55, 0.7],
            },
            TreatmentModel::LatestCovariate {
                p: vec![0.25, 0.4, 0.6, 0.75],
            },
        ],
        snmm: SnmmSpec::per_stratum(&layout),
        gamma,
        zeta,
    }
}

/// Outcome mean and probability of one full path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathParam {
    pub x: Vec<Level>,
    pub z: Vec<Level>,
    pub probability: f64,
    pub mean: f64,
}

/// Outcome means `μ(x_1, z_1, …, x_T, z_T)` with exact path probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StandardParams {
    pub paths: Vec<PathParam>,
}

impl StandardParams {
    /// `Σ_path μ(path) P(path)`.
    pub fn grand_mean(&self) -> f64 {
        self.paths.iter().map(|p| p.mean * p.probability).sum()
    }

    pub fn total_probability(&self) -> f64 {
        self.paths.iter().map(|p| p.probability).sum()
    }
}

/// Exact point effects `θ(x_t; z_t = 1)` computed two ways.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactPointEffects {
    pub strata: Vec<Stratum>,
    /// Full-history point effects averaged over histories given `(x_t, z_t = 1)`.
    pub forward: Vec<f64>,
    /// Differences of path-enumerated stratum means.
    pub enumerated: Vec<f64>,
}

impl ExactPointEffects {
    pub fn max_route_difference(&self) -> f64 {
        self.forward
            .iter()
            .zip(&self.enumerated)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A validated [`DgpSpec`] with lookup tables for enumeration and sampling.
#[derive(Debug, Clone)]
pub struct Dgp {
    spec: DgpSpec,
    layout: Layout,
    x_rows: Vec<HashMap<Vec<Level>, Vec<f64>>>,
    z_rows: Vec<Option<HashMap<Vec<Level>, f64>>>,
    zeta: Vec<BTreeMap<Level, (f64, Vec<f64>)>>,
    params: StandardParams,
}

const PROB_TOL: f64 = 1e-12;

fn check_distribution(probs: &[f64], levels: usize, what: &str) -> Result<()> {
    if probs.len() != levels {
        return Err(Error::InvalidSpec(format!(
            "{what}: {} probabilities for {levels} levels",
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidSpec(format!("{what}: probabilities sum to {sum}")));
    }
    let interior = levels == 1 || probs.iter().all(|&p| p > 0.0 && p < 1.0);
    if !interior {
        return Err(Error::InvalidSpec(format!("{what}: probabilities must lie strictly inside (0, 1)")));
    }
    Ok(())
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("{what}: P(z=1) = {p} must lie strictly inside (0, 1)")))
    }
}

impl Dgp {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        let t_max = spec.n_times();
        if t_max == 0 {
            return Err(Error::InvalidSpec("spec declares no times".into()));
        }
        if spec.covariates.len() != t_max || spec.treatments.len() != t_max {
            return Err(Error::InvalidSpec(
                "covariate and treatment models must be given for every time".into(),
            ));
        }
        let layout = spec.layout().map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.snmm.check_layout(&layout)?;
        if spec.gamma.len() != spec.snmm.k() {
            return Err(Error::InvalidSpec(format!(
                "gamma has {} entries for {} basis functions",
                spec.gamma.len(),
                spec.snmm.k()
            )));
        }
        if spec.gamma.iter().any(|g| !g.is_finite()) || !spec.grand_mean.is_finite() {
            return Err(Error::InvalidSpec("gamma and grand mean must be finite".into()));
        }
        match (spec.family, spec.sigma) {
            (OutcomeFamily::Normal, Some(s)) if s > 0.0 && s.is_finite() => {}
            (OutcomeFamily::Normal, _) => {
                return Err(Error::InvalidSpec("normal family needs a positive sigma".into()));
            }
            _ => {}
        }
        let histories = all_histories(&layout);
        let mut x_rows = Vec::with_capacity(t_max);
        let mut z_rows = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            let nx = layout.x_levels(t).len();
            let mut table = HashMap::new();
            match &spec.covariates[t - 1] {
                CovariateModel::Fixed { probs } => {
                    check_distribution(probs, nx, &format!("covariate model at t={t}"))?;
                    for h in &histories[t - 1] {
                        table.insert(h.clone(), probs.clone());
                    }
                }
                CovariateModel::Table { rows } => {
                    for row in rows {
                        check_distribution(&row.probs, nx, &format!("covariate row {:?} at t={t}", row.history))?;
                        table.insert(row.history.clone(), row.probs.clone());
                    }
                    if let Some(h) = histories[t - 1].iter().find(|h| !table.contains_key(*h)) {
                        return Err(Error::InvalidSpec(format!("covariate model at t={t} lacks history {h:?}")));
                    }
                }
            }
            x_rows.push(table);
            match &spec.treatments[t - 1] {
                TreatmentModel::LatestCovariate { p } => {
                    if p.len() != nx {
                        return Err(Error::InvalidSpec(format!(
                            "treatment model at t={t}: {} probabilities for {nx} covariate levels",
                            p.len()
                        )));
                    }
                    for &v in p {
                        check_probability(v, &format!("treatment model at t={t}"))?;
                    }
                    z_rows.push(None);
                }
                TreatmentModel::History { rows } => {
                    let mut table = HashMap::new();
                    for row in rows {
                        check_probability(row.p, &format!("treatment row {:?} at t={t}", row.history))?;
                        table.insert(row.history.clone(), row.p);
                    }
                    for h in &histories[t - 1] {
                        for &x in layout.x_levels(t) {
                            let mut key = h.clone();
                            key.push(x);
                            if !table.contains_key(&key) {
                                return Err(Error::InvalidSpec(format!(
                                    "treatment model at t={t} lacks history {key:?}"
                                )));
                            }
                        }
                    }
                    z_rows.push(Some(table));
                }
            }
        }
        let mut zeta = vec![BTreeMap::new(); t_max];
        for term in &spec.zeta {
            if term.t == 0 || term.t > t_max {
                return Err(Error::InvalidSpec(format!("zeta term for time {} outside 1..={t_max}", term.t)));
            }
            let levels = layout.x_levels(term.t);
            if term.level == levels[0] || levels.binary_search(&term.level).is_err() {
                return Err(Error::InvalidSpec(format!(
                    "zeta term at t={} names level {} which is not a non-reference level",
                    term.t, term.level
                )));
            }
            if term.coefs.len() > 2 * (term.t - 1) {
                return Err(Error::InvalidSpec(format!("zeta term at t={} has too many coefficients", term.t)));
            }
            zeta[term.t - 1].insert(term.level, (term.intercept, term.coefs.clone()));
        }
        let mut dgp = Self {
            spec,
            layout,
            x_rows,
            z_rows,
            zeta,
            params: StandardParams { paths: Vec::new() },
        };
        dgp.params = dgp.construct_params()?;
        Ok(dgp)
    }

    pub fn spec(&self) -> &DgpSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &StandardParams {
        &self.params
    }

    fn n_times(&self) -> usize {
        self.layout.n_times()
    }

    /// `P(x_t | h)` in level order, `h = (x_1, z_1, …, x_{t-1}, z_{t-1})`.
    fn p_x(&self, t: usize, h: &[Level]) -> &[f64] {
        &self.x_rows[t - 1][h]
    }

    /// `P(z_t = 1 | h, x_t)`.
    fn p_treat(&self, t: usize, h: &[Level], x: Level) -> f64 {
        match &self.z_rows[t - 1] {
            None => {
                let TreatmentModel::LatestCovariate { p } = &self.spec.treatments[t - 1] else {
                    unreachable!("latest-covariate model has no history table")
                };
                let i = self.layout.x_levels(t).binary_search(&x).expect("declared level");
                p[i]
            }
            Some(table) => {
                let mut key = h.to_vec();
                key.push(x);
                table[&key]
            }
        }
    }

    fn blip(&self, t: usize, x: Level, z: Level) -> f64 {
        self.spec.snmm.blip(&self.spec.gamma, t, x, z)
    }

    fn zeta(&self, t: usize, h: &[Level], x: Level) -> f64 {
        match self.zeta[t - 1].get(&x) {
            Some((intercept, coefs)) => intercept + coefs.iter().zip(h).map(|(c, &v)| c * v as f64).sum::<f64>(),
            None => 0.0,
        }
    }

    /// `E[Σ_{s>t} φ_s(x_s, z_s) | prefix]` for a prefix ending with `z_t`.
    fn future_blips(&self, prefix: &[Level]) -> f64 {
        let t = prefix.len() / 2;
        if t >= self.n_times() {
            return 0.0;
        }
        let s = t + 1;
        let mut total = 0.0;
        let mut next = prefix.to_vec();
        for (i, &x) in self.layout.x_levels(s).iter().enumerate() {
            let px = self.p_x(s, prefix)[i];
            let p1 = self.p_treat(s, prefix, x);
            next.truncate(prefix.len());
            next.push(x);
            for (z, pz) in [(0, 1.0 - p1), (1, p1)] {
                next.truncate(prefix.len() + 1);
                next.push(z);
                total += px * pz * (self.blip(s, x, z) + self.future_blips(&next));
            }
        }
        total
    }

    /// Point effect of `z_t = 1` given the full history `(h, x_t)`.
    fn theta_full(&self, h: &[Level], x: Level) -> f64 {
        let t = h.len() / 2 + 1;
        let mut p = h.to_vec();
        p.push(x);
        p.push(1);
        let treated = self.future_blips(&p);
        *p.last_mut().expect("non-empty") = 0;
        self.blip(t, x, 1) + treated - self.future_blips(&p)
    }

    fn construct_params(&self) -> Result<StandardParams> {
        let t_max = self.n_times();
        let mut paths = Vec::new();
        let mut stack: Vec<(Vec<Level>, f64)> = vec![(Vec::new(), 1.0)];
        while let Some((prefix, prob)) = stack.pop() {
            let t = prefix.len() / 2 + 1;
            if t > t_max {
                paths.push((prefix, prob));
                continue;
            }
            for (i, &x) in self.layout.x_levels(t).iter().enumerate().rev() {
                let px = self.p_x(t, &prefix)[i];
                let p1 = self.p_treat(t, &prefix, x);
                for (z, pz) in [(1, p1), (0, 1.0 - p1)] {
                    let mut next = prefix.clone();
                    next.push(x);
                    next.push(z);
                    stack.push((next, prob * px * pz));
                }
            }
        }
        let mut out = Vec::with_capacity(paths.len());
        for (path, probability) in paths {
            let mut mean = self.spec.grand_mean;
            for t in 1..=t_max {
                let h = &path[..2 * (t - 1)];
                let (x, z) = (path[2 * t - 2], path[2 * t - 1]);
                let p1 = self.p_treat(t, h, x);
                let indicator = if z == 1 { 1.0 } else { 0.0 };
                mean -= self.theta_full(h, x) * (p1 - indicator);
                if self.layout.x_levels(t).len() > 1 {
                    let expected: f64 = self
                        .layout
                        .x_levels(t)
                        .iter()
                        .zip(self.p_x(t, h))
                        .map(|(&xs, &p)| self.zeta(t, h, xs) * p)
                        .sum();
                    mean -= expected - self.zeta(t, h, x);
                }
            }
            let x: Vec<Level> = path.iter().step_by(2).copied().collect();
            let z: Vec<Level> = path.iter().skip(1).step_by(2).copied().collect();
            let valid = match self.spec.family {
                OutcomeFamily::Normal => mean.is_finite(),
                OutcomeFamily::Bernoulli => mean > 0.0 && mean < 1.0,
                OutcomeFamily::Poisson => mean > 0.0 && mean.is_finite(),
            };
            if !valid {
                return Err(Error::InvalidSpec(format!(
                    "outcome mean {mean} on path x={x:?}, z={z:?} is invalid for the {} family",
                    self.spec.family
                )));
            }
            out.push(PathParam {
                x,
                z,
                probability,
                mean,
            });
        }
        Ok(StandardParams { paths: out })
    }

    /// All treated strata `(t, x, 1)` in layout order.
    pub fn strata(&self) -> Vec<Stratum> {
        (1..=self.n_times())
            .flat_map(|t| self.layout.x_levels(t).iter().map(move |&x| Stratum::new(t, x, 1)))
            .collect()
    }

    pub fn exact_point_effects(&self) -> ExactPointEffects {
        let strata = self.strata();
        let grand = self.spec.grand_mean;
        let mut forward = Vec::with_capacity(strata.len());
        let mut enumerated = Vec::with_capacity(strata.len());
        for s in &strata {
            let (mut w1, mut f1) = (0.0, 0.0);
            let (mut m1, mut m0, mut w0) = (0.0, 0.0, 0.0);
            for p in &self.params.paths {
                if p.x[s.t - 1] != s.x {
                    continue;
                }
                if p.z[s.t - 1] == 1 {
                    let h: Vec<Level> = interleave(&p.x[..s.t - 1], &p.z[..s.t - 1]);
                    w1 += p.probability;
                    f1 += p.probability * self.theta_full(&h, s.x);
                    m1 += p.probability * (p.mean - grand);
                } else {
                    w0 += p.probability;
                    m0 += p.probability * (p.mean - grand);
                }
            }
            forward.push(f1 / w1);
            enumerated.push(m1 / w1 - m0 / w0);
        }
        ExactPointEffects {
            strata,
            forward,
            enumerated,
        }
    }

    /// Transition probabilities implied by the path distribution.
    pub fn exact_transitions(&self) -> TransitionTable<f64> {
        let layout = &self.layout;
        let t_max = self.n_times();
        let mut joints = BTreeMap::new();
        for t in 1..=t_max {
            for s in t + 1..=t_max {
                let mut joint = Matrix::zeros(layout.cell_count(t), layout.cell_count(s));
                for p in &self.params.paths {
                    let a = layout.cell_code(t, p.x[t - 1], p.z[t - 1]).expect("declared level");
                    let b = layout.cell_code(s, p.x[s - 1], p.z[s - 1]).expect("declared level");
                    joint[(a, b)] += p.probability;
                }
                joints.insert((t, s), joint);
            }
        }
        TransitionTable::from_joint(layout.clone(), joints).expect("joint tables follow the layout")
    }

    /// Design rows from the exact transitions, one per treated stratum.
    pub fn exact_design(&self) -> Result<Matrix<f64>> {
        let tr = self.exact_transitions();
        let rows = self
            .strata()
            .into_iter()
            .map(|s| design_row(&self.spec.snmm, &tr, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_rows(&rows))
    }

    /// `‖C_exact γ − θ_exact‖∞` with `θ_exact` from path enumeration.
    pub fn decomposition_residual(&self) -> Result<f64> {
        let c = self.exact_design()?;
        let theta = self.exact_point_effects().enumerated;
        Ok(c.mul_vec(&self.spec.gamma)
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn draw_outcome<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        match self.spec.family {
            OutcomeFamily::Normal => {
                let sigma = self.spec.sigma.expect("validated");
                Normal::new(mean, sigma).expect("validated sigma").sample(rng)
            }
            OutcomeFamily::Bernoulli => {
                if rng.random::<f64>() < mean {
                    1.0
                } else {
                    0.0
                }
            }
            OutcomeFamily::Poisson => Poisson::new(mean).expect("validated mean").sample(rng),
        }
    }

    fn schema(&self) -> Schema {
        Schema::simple(
            self.n_times(),
            (1..=self.n_times()).map(|t| self.layout.x_levels(t).len() > 1).collect(),
        )
    }

    /// Draws `n` subjects; subject `i` uses random stream `i` of `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<SequentialDataset> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be at least 1".into()));
        }
        let mut cdf = Vec::with_capacity(self.params.paths.len());
        let mut acc = 0.0;
        for p in &self.params.paths {
            acc += p.probability;
            cdf.push(acc);
        }
        let records: Vec<Record> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, i as u64);
                let u = rng.random::<f64>() * acc;
                let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                let path = &self.params.paths[k];
                Record {
                    id: (i + 1).to_string(),
                    x: path.x.clone(),
                    z: path.z.clone(),
                    extras: Vec::new(),
                    y: self.draw_outcome(path.mean, &mut rng),
                }
            })
            .collect();
        SequentialDataset::new(self.spec.family, self.schema(), records)
    }

    /// Path mean for every subject of `data` (which must follow this DGP's levels).
    pub fn subject_means(&self, data: &SequentialDataset) -> Result<Vec<f64>> {
        let lookup: HashMap<(&[Level], &[Level]), f64> = self
            .params
            .paths
            .iter()
            .map(|p| ((p.x.as_slice(), p.z.as_slice()), p.mean))
            .collect();
        (0..data.n())
            .map(|i| {
                let rec = data.record(i);
                lookup
                    .get(&(rec.x.as_slice(), rec.z.as_slice()))
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("subject `{}` follows no path of the DGP", rec.id)))
            })
            .collect()
    }

    /// Redraws outcomes while keeping every subject's covariates and treatments.
    pub fn resample_outcomes(&self, data: &SequentialDataset, seed: u64) -> Result<SequentialDataset> {
        let means = self.subject_means(data)?;
        let y: Vec<f64> = means
            .par_iter()
            .enumerate()
            .map(|(i, &m)| self.draw_outcome(m, &mut stream_rng(seed, i as u64)))
            .collect();
        data.with_outcomes(y)
    }
}

fn interleave(x: &[Level], z: &[Level]) -> Vec<Level> {
    x.iter().zip(z).flat_map(|(&a, &b)| [a, b]).collect()
}

/// Histories `(x_1, z_1, …, x_{t-1}, z_{t-1})` for every `t`, index `t - 1`.
fn all_histories(layout: &Layout) -> Vec<Vec<Vec<Level>>> {
    let mut out = vec![vec![Vec::new()]];
    for t in 1..layout.n_times() {
        let mut next = Vec::new();
        for h in &out[t - 1] {
            for &x in layout.x_levels(t) {
                for &z in layout.z_levels(t) {
                    let mut e = h.clone();
                    e.push(x);
                    e.push(z);
                    next.push(e);
                }
            }
        }
        out.push(next);
    }
    out
}

pub fn build_standard_params(spec: &DgpSpec) -> Result<StandardParams> {
    Ok(Dgp::new(spec.clone())?.params)
}

pub fn exact_point_effects(spec: &DgpSpec) -> Result<ExactPointEffects> {
    Ok(Dgp::new(spec.clone())?.exact_point_effects())
}

pub fn exact_blip_decomposition_check(spec: &DgpSpec) -> Result<f64> {
    Dgp::new(spec.clone())?.decomposition_residual()
}

pub fn generate_dataset(spec: &DgpSpec, n: usize, seed: u64) -> Result<SequentialDataset> {
    Dgp::new(spec.clone())?.generate(n, seed)
}

/// Random valid normal-family spec with `T = 3` satisfying the assignment
/// condition; used by property checks of the oracle identities.
pub fn random_spec(seed: u64) -> DgpSpec {
    let mut rng = stream_rng(seed, 0);
    let mut levels = vec![if rng.random::<bool>() { vec![0, 1] } else { vec![0] }];
    for _ in 1..3 {
        let k = rng.random_range(2..=4);
        levels.push((0..k).collect());
    }
    let layout = Layout::new(levels.clone(), vec![vec![0, 1]; 3]).expect("valid layout");
    let histories = all_histories(&layout);
    let random_probs = |k: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        if k == 1 {
            return vec![1.0];
        }
        let w: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
        let s: f64 = w.iter().sum();
        let mut p: Vec<f64> = w.iter().map(|v| v / s).collect();
        let rest: f64 = p[..k - 1].iter().sum();
        p[k - 1] = 1.0 - rest;
        p
    };
    let mut covariates = vec![CovariateModel::Fixed {
        probs: random_probs(levels[0].len(), &mut rng),
    }];
    let mut treatments = Vec::new();
    for t in 1..=3 {
        if t > 1 {
            let rows = histories[t - 1]
                .iter()
                .map(|h| HistoryRow {
                    history: h.clone(),
                    probs: random_probs(levels[t - 1].len(), &mut rng),
                })
                .collect();
            covariates.push(CovariateModel::Table { rows });
        }
        treatments.push(TreatmentModel::LatestCovariate {
            p: (0..levels[t - 1].len()).map(|_| rng.random_range(0.15..0.85)).collect(),
        });
    }
    let snmm = if rng.random::<bool>() {
        SnmmSpec::per_stratum(&layout)
    } else {
        let mut g = BTreeMap::new();
        for &x in &levels[1] {
            g.insert(x.to_string(), rng.random_range(-1.0..1.0));
        }
        SnmmSpec::new(vec![
            BasisFunction::Indicator {
                t: 1,
                x_in: None,
                z_in: vec![1],
                label: None,
            },
            BasisFunction::Linear {
                t_set: vec![2, 3],
                g,
                label: None,
            },
            BasisFunction::Indicator {
                t: 3,
                x_in: Some(vec![0]),
                z_in: vec![1],
                label: None,
            },
        ])
        .expect("valid basis")
    };
    let gamma = (0..snmm.k()).map(|_| rng.random_range(-4.0..4.0)).collect();
    let mut zeta = Vec::new();
    for t in 1..=3 {
        for &level in &levels[t - 1][1..] {
            zeta.push(ZetaTerm {
                t,
                level,
                intercept: rng.random_range(-5.0..5.0),
                coefs: (0..2 * (t - 1)).map(|_| rng.random_range(-2.0..2.0)).collect(),
            });
        }
    }
    DgpSpec {
        family: OutcomeFamily::Normal,
        sigma: Some(rng.random_range(0.5..3.0)),
        grand_mean: rng.random_range(-10.0..10.0),
        covariate_levels: levels,
        covariates,
        treatments,
        snmm,
        gamma,
        zeta,
    }
}

/// The shipped normal spec with `P(z_2 = 1)` depending on `z_1` as well as `x_2`.
pub fn assignment_violating_spec() -> DgpSpec {
    let mut spec = DgpSpec::default_normal();
    let base = [0.3, 0.45, 0.55, 0.7];
    let mut rows = Vec::new();
    for z1 in 0..2 {
        for (x2, &p) in base.iter().enumerate() {
            rows.push(TreatmentRow {
                history: vec![0, z1, x2 as Level],
                p: if z1 == 1 { p + 0.25 * (1.0 - p) } else { 0.5 * p },
            });
        }
    }
    spec.treatments[1] = TreatmentModel::History { rows };
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_specs_are_valid() {
        for family in [OutcomeFamily::Normal, OutcomeFamily::Bernoulli, OutcomeFamily::Poisson] {
            let dgp = Dgp::new(DgpSpec::default_for(family)).unwrap();
            assert_eq!(dgp.params().paths.len(), 128);
            assert!((dgp.params().total_probability() - 1.0).abs() < 1e-12);
            assert_eq!(dgp.spec().snmm.k(), 9);
        }
    }

    #[test]
    fn null_effects_give_constant_mean() {
        let mut spec = DgpSpec::default_normal();
        spec.gamma = vec![0.0; 9];
        spec.zeta.clear();
        let dgp = Dgp::new(spec).unwrap();
        assert!(dgp.params().paths.iter().all(|p| (p.mean + 5.0).abs() < 1e-12));
        let theta = dgp.exact_point_effects();
        assert!(theta.enumerated.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(dgp.decomposition_residual().unwrap(), 0.0);
    }

    #[test]
    fn last_time_point_effect_is_gamma() {
        let dgp = Dgp::new(DgpSpec::default_normal()).unwrap();
        let theta = dgp.exact_point_effects();
        for j in 0..4 {
            assert!((theta.enumerated[5 + j] - dgp.spec().gamma[5 + j]).abs() < 1e-10);
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = DgpSpec::default_bernoulli();
        let back = DgpSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn invalid_bernoulli_mean_rejected() {
        let mut spec = DgpSpec::default_bernoulli();
        spec.grand_mean = 0.98;
        assert!(matches!(Dgp::new(spec), Err(Error::InvalidSpec(m)) if m.contains("path")));
    }

    #[test]
    fn missing_history_row_rejected() {
        let mut spec = DgpSpec::default_normal();
        if let CovariateModel::Table { rows } = &mut spec.covariates[2] {
            rows.pop();
        }
        assert!(Dgp::new(spec).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let dgp = Dgp::new(DgpSpec::default_poisson()).unwrap();
        let a = dgp.generate(1, 11).unwrap();
        let b = dgp.generate(1, 11).unwrap();
        assert_eq!(a, b);
        let big = dgp.generate(300, 5).unwrap();
        assert_eq!(big.n(), 300);
        assert_eq!(big.n_times(), 3);
        assert!(!big.covariate_observed(1) && big.covariate_observed(2));
    }

    #[test]
    fn random_specs_validate() {
        for seed in 0..10 {
            Dgp::new(random_spec(seed)).unwrap();
        }
    }
}
