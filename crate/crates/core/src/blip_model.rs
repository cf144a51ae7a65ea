//! Linear SNMM basis, transition proportions and the design matrix `C` that
//! maps blip parameters to point effects, `θ = C γ`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::chi2::chi2_survival;
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, singular_values, Matrix};
use crate::scalar::Scalar;
use crate::seqdata::{Layout, Level, Observations, Stratum};

/// One basis function `f_j(t, x_t, z_t)` as written in SNMM JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BasisFunction {
    /// `1` when `t` matches, `x_t ∈ x_in` (any level when absent) and `z_t ∈ z_in`.
    Indicator {
        t: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x_in: Option<Vec<Level>>,
        z_in: Vec<Level>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    /// `z_t · g(x_t)` for `t ∈ t_set`; levels missing from `g` map to 0.
    Linear {
        t_set: Vec<usize>,
        g: BTreeMap<String, f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Compiled {
    Indicator {
        t: usize,
        x_in: Option<BTreeSet<Level>>,
        z_in: BTreeSet<Level>,
    },
    Linear {
        t_set: BTreeSet<usize>,
        g: BTreeMap<Level, f64>,
    },
}

/// Linear SNMM `φ(x_t, z_t) = Σ_j γ_j f_j(t, x_t, z_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BasisFunction>", into = "Vec<BasisFunction>")]
pub struct SnmmSpec {
    basis: Vec<BasisFunction>,
    compiled: Vec<Compiled>,
}

impl TryFrom<Vec<BasisFunction>> for SnmmSpec {
    type Error = Error;

    fn try_from(basis: Vec<BasisFunction>) -> Result<Self> {
        Self::new(basis)
    }
}

impl From<SnmmSpec> for Vec<BasisFunction> {
    fn from(spec: SnmmSpec) -> Self {
        spec.basis
    }
}

impl SnmmSpec {
    pub fn new(basis: Vec<BasisFunction>) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::InvalidSpec("SNMM needs at least one basis function".into()));
        }
        let compiled = basis
            .iter()
            .enumerate()
            .map(|(j, f)| compile(j, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { basis, compiled })
    }

    /// One indicator per treated stratum `(t, x, z ≠ 0)` of the layout; the
    /// saturated SNMM used by the simulation study.
    pub fn per_stratum(layout: &Layout) -> Self {
        let mut basis = Vec::new();
        for t in 1..=layout.n_times() {
            let xs = layout.x_levels(t);
            let zs: Vec<Level> = layout.z_levels(t).iter().copied().filter(|&z| z != 0).collect();
            for &x in xs {
                for &z in &zs {
                    let label = match (xs.len(), zs.len()) {
                        (1, 1) => format!("gamma_{t}"),
                        (_, 1) => format!("gamma_{t}_{x}"),
                        _ => format!("gamma_{t}_{x}_{z}"),
                    };
                    basis.push(BasisFunction::Indicator {
                        t,
                        x_in: (xs.len() > 1).then(|| vec![x]),
                        z_in: vec![z],
                        label: Some(label),
                    });
                }
            }
        }
        Self::new(basis).expect("per-stratum basis is valid")
    }

    pub fn k(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[BasisFunction] {
        &self.basis
    }

    pub fn labels(&self) -> Vec<String> {
        self.basis
            .iter()
            .enumerate()
            .map(|(j, f)| match f {
                BasisFunction::Indicator { label: Some(l), .. } | BasisFunction::Linear { label: Some(l), .. } => {
                    l.clone()
                }
                _ => format!("f{}", j + 1),
            })
            .collect()
    }

    /// `f_j(t, x, z)`; zero whenever `z = 0`.
    pub fn eval(&self, j: usize, t: usize, x: Level, z: Level) -> f64 {
        if z == 0 {
            return 0.0;
        }
        match &self.compiled[j] {
            Compiled::Indicator { t: tj, x_in, z_in } => {
                let hit = *tj == t && x_in.as_ref().is_none_or(|s| s.contains(&x)) && z_in.contains(&z);
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
            Compiled::Linear { t_set, g } => {
                if t_set.contains(&t) {
                    z as f64 * g.get(&x).copied().unwrap_or(0.0)
                } else {
                    0.0
                }
            }
        }
    }

    /// All basis values at one cell.
    pub fn eval_all(&self, t: usize, x: Level, z: Level) -> Vec<f64> {
        (0..self.k()).map(|j| self.eval(j, t, x, z)).collect()
    }

    /// Blip `φ(t, x, z) = Σ_j γ_j f_j(t, x, z)`.
    pub fn blip(&self, gamma: &[f64], t: usize, x: Level, z: Level) -> f64 {
        (0..self.k()).map(|j| gamma[j] * self.eval(j, t, x, z)).sum()
    }

    /// Rejects basis functions addressing times beyond the layout.
    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        for (j, c) in self.compiled.iter().enumerate() {
            let late = match c {
                Compiled::Indicator { t, .. } => *t > layout.n_times(),
                Compiled::Linear { t_set, .. } => t_set.iter().any(|&t| t > layout.n_times()),
            };
            if late {
                return Err(Error::InvalidSpec(format!(
                    "basis function {} refers to a time beyond T={}",
                    j + 1,
                    layout.n_times()
                )));
            }
        }
        Ok(())
    }
}

fn compile(j: usize, f: &BasisFunction) -> Result<Compiled> {
    let bad = |msg: &str| Error::InvalidSpec(format!("basis function {}: {msg}", j + 1));
    match f {
        BasisFunction::Indicator { t, x_in, z_in, .. } => {
            if *t == 0 {
                return Err(bad("times are numbered from 1"));
            }
            if z_in.is_empty() {
                return Err(bad("z_in must list at least one treatment level"));
            }
            if z_in.contains(&0) {
                return Err(bad("z_in must not contain the control level 0"));
            }
            Ok(Compiled::Indicator {
                t: *t,
                x_in: x_in.as_ref().map(|v| v.iter().copied().collect()),
                z_in: z_in.iter().copied().collect(),
            })
        }
        BasisFunction::Linear { t_set, g, .. } => {
            if t_set.is_empty() || t_set.contains(&0) {
                return Err(bad("t_set must list times numbered from 1"));
            }
            let g = g
                .iter()
                .map(|(k, &v)| {
                    k.trim()
                        .parse::<Level>()
                        .map(|level| (level, v))
                        .map_err(|_| bad(&format!("g key `{k}` is not an integer level")))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(Compiled::Linear {
                t_set: t_set.iter().copied().collect(),
                g,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PairTable<S> {
    /// `joint[(a, b)]`: mass of cell `a` at the earlier time together with cell `b` at the later one.
    joint: Matrix<S>,
    row_total: Vec<S>,
}

/// Conditional proportions `P̂(x_s, z_s | x_t, z_t)` for every `t < s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable<S> {
    layout: Layout,
    pairs: BTreeMap<(usize, usize), PairTable<S>>,
}

impl<S: Scalar> TransitionTable<S> {
    /// Builds the table from joint masses (counts or probabilities) per time pair.
    pub fn from_joint(layout: Layout, joints: BTreeMap<(usize, usize), Matrix<S>>) -> Result<Self> {
        let t_max = layout.n_times();
        let mut pairs = BTreeMap::new();
        for t in 1..=t_max {
            for s in t + 1..=t_max {
                let joint = joints
                    .get(&(t, s))
                    .cloned()
                    .ok_or_else(|| Error::InvalidSpec(format!("missing joint table for times ({t}, {s})")))?;
                if joint.rows() != layout.cell_count(t) || joint.cols() != layout.cell_count(s) {
                    return Err(Error::InvalidSpec(format!("joint table ({t}, {s}) has wrong shape")));
                }
                let row_total = (0..joint.rows()).map(|a| joint.row(a).iter().copied().sum()).collect();
                pairs.insert((t, s), PairTable { joint, row_total });
            }
        }
        Ok(Self { layout, pairs })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Mass (subject count for empirical tables) of the conditioning cell.
    pub fn count(&self, t: usize, s: usize, from: (Level, Level)) -> Option<S> {
        let a = self.layout.cell_code(t, from.0, from.1)?;
        Some(self.pairs.get(&(t, s))?.row_total[a])
    }

    /// `P̂(x_s, z_s | x_t, z_t)`; `None` when the conditioning cell is empty.
    pub fn probability(&self, t: usize, s: usize, from: (Level, Level), to: (Level, Level)) -> Option<S> {
        let a = self.layout.cell_code(t, from.0, from.1)?;
        let b = self.layout.cell_code(s, to.0, to.1)?;
        let pair = self.pairs.get(&(t, s))?;
        let total = pair.row_total[a];
        (total > S::zero()).then(|| pair.joint[(a, b)] / total)
    }

    /// Conditional distribution over later cells (in cell-code order).
    pub fn conditional(&self, t: usize, s: usize, from_code: usize) -> Option<Vec<S>> {
        let pair = self.pairs.get(&(t, s))?;
        let total = pair.row_total[from_code];
        (total > S::zero()).then(|| pair.joint.row(from_code).iter().map(|&m| m / total).collect())
    }
}

/// Transition proportions estimated jointly from raw counts.
pub fn empirical_transitions<S: Scalar, D: Observations + ?Sized>(data: &D) -> TransitionTable<S> {
    let ds = data.dataset();
    let layout = ds.layout();
    let t_max = layout.n_times();
    let counts = data.counts();
    let mut joints = BTreeMap::new();
    for t in 1..=t_max {
        for s in t + 1..=t_max {
            let mut tally = vec![0u64; layout.cell_count(t) * layout.cell_count(s)];
            let width = layout.cell_count(s);
            let (ct, cs) = (ds.cell_codes(t), ds.cell_codes(s));
            match counts {
                None => {
                    for (&a, &b) in ct.iter().zip(cs) {
                        tally[a as usize * width + b as usize] += 1;
                    }
                }
                Some(w) => {
                    for ((&a, &b), &k) in ct.iter().zip(cs).zip(w) {
                        tally[a as usize * width + b as usize] += k as u64;
                    }
                }
            }
            let joint = Matrix::from_vec(
                layout.cell_count(t),
                width,
                tally.into_iter().map(|c| S::of(c as f64)).collect(),
            );
            joints.insert((t, s), joint);
        }
    }
    TransitionTable::from_joint(layout.clone(), joints).expect("joint tables follow the layout")
}

/// Row `c(x_t; z_t)` of the design matrix:
/// `f(t, x_t, z_t) + Σ_{s>t} Σ_cells f(s, ·) {P̂(· | x_t, z_t) − P̂(· | x_t, 0)}`.
pub fn design_row<S: Scalar>(snmm: &SnmmSpec, transitions: &TransitionTable<S>, stratum: Stratum) -> Result<Vec<S>> {
    let layout = transitions.layout();
    let Stratum { t, x, z } = stratum;
    layout.check_time(t)?;
    if z == 0 {
        return Err(Error::InvalidArgument(format!("{stratum} is a control cell")));
    }
    let treated = layout.code_of(stratum).ok_or_else(|| Error::Inestimable {
        stratum,
        reason: "cell is not among the observed levels".into(),
    })?;
    let control = layout.code_of(stratum.control()).ok_or_else(|| Error::Inestimable {
        stratum,
        reason: "control cell is not among the observed levels".into(),
    })?;
    let mut row: Vec<S> = snmm.eval_all(t, x, z).into_iter().map(S::of).collect();
    for s in t + 1..=layout.n_times() {
        let undefined = |cell: Stratum| Error::Inestimable {
            stratum,
            reason: format!("transition from {cell} to time {s} is undefined (no subjects)"),
        };
        let p1 = transitions
            .conditional(t, s, treated)
            .ok_or_else(|| undefined(stratum))?;
        let p0 = transitions
            .conditional(t, s, control)
            .ok_or_else(|| undefined(stratum.control()))?;
        for (code, (&a, &b)) in p1.iter().zip(&p0).enumerate() {
            let d = a - b;
            if d == S::zero() {
                continue;
            }
            let cell = layout.cell(s, code);
            if cell.z == 0 {
                continue;
            }
            for (j, r) in row.iter_mut().enumerate() {
                let f = snmm.eval(j, s, cell.x, cell.z);
                if f != 0.0 {
                    *r += S::of(f) * d;
                }
            }
        }
    }
    Ok(row)
}

/// Design matrix with one row per treated stratum, in point-effect order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<S> {
    pub strata: Vec<Stratum>,
    pub labels: Vec<String>,
    pub matrix: Matrix<S>,
    pub rank: usize,
    pub condition: f64,
}

fn rank_tolerance<S: Scalar>(m: usize, k: usize) -> S {
    S::of(1e-10).max(S::epsilon() * S::of_usize(10 * m.max(k)))
}

/// Stacks [`design_row`] over `strata` and checks that `C` has full column rank.
pub fn build_design_matrix<S: Scalar>(
    snmm: &SnmmSpec,
    transitions: &TransitionTable<S>,
    strata: &[Stratum],
) -> Result<DesignMatrix<S>> {
    snmm.check_layout(transitions.layout())?;
    let k = snmm.k();
    let rows = strata
        .iter()
        .map(|&s| design_row(snmm, transitions, s))
        .collect::<Result<Vec<_>>>()?;
    let matrix = if rows.is_empty() {
        Matrix::zeros(0, k)
    } else {
        Matrix::from_rows(&rows)
    };
    let labels = snmm.labels();
    let tol = rank_tolerance::<S>(strata.len(), k);
    let rank = if rows.is_empty() { 0 } else { numerical_rank(&matrix, tol) };
    if rank < k {
        return Err(Error::Identifiability {
            rank,
            k,
            dependent_column: labels[dependent_column(&matrix, tol)].clone(),
        });
    }
    let sv = singular_values(&matrix);
    let condition = (sv[0] / sv[k - 1]).as_f64();
    Ok(DesignMatrix {
        strata: strata.to_vec(),
        labels,
        matrix,
        rank,
        condition,
    })
}

/// First column that does not increase the rank of the columns before it.
fn dependent_column<S: Scalar>(a: &Matrix<S>, tol: S) -> usize {
    if a.rows() == 0 {
        return 0;
    }
    for j in 0..a.cols() {
        let cols: Vec<usize> = (0..=j).collect();
        if numerical_rank(&a.select_columns(&cols), tol) < j + 1 {
            return j;
        }
    }
    a.cols() - 1
}

/// Independence check of `z_t` against `z_{t-1}` within one level of `x_t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentTest {
    pub t: usize,
    pub x: Level,
    pub n: usize,
    /// Pearson statistic; absent when the table has fewer than two rows or columns.
    pub statistic: Option<f64>,
    pub df: Option<usize>,
    pub p_value: Option<f64>,
}

impl AssignmentTest {
    pub fn applicable(&self) -> bool {
        self.statistic.is_some()
    }
}

/// Advisory diagnostic for the assumption that treatment depends on history
/// only through the latest covariate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentReport {
    pub tests: Vec<AssignmentTest>,
}

impl AssignmentReport {
    /// Smallest p-value over the applicable tables.
    pub fn min_p_value(&self) -> Option<f64> {
        self.tests.iter().filter_map(|t| t.p_value).reduce(f64::min)
    }
}

pub fn check_assignment_condition<D: Observations + ?Sized>(data: &D) -> AssignmentReport {
    let ds = data.dataset();
    let layout = ds.layout();
    let counts = data.counts();
    let mut tests = Vec::new();
    for t in 2..=ds.n_times() {
        let zt_levels = layout.z_levels(t);
        let zp_levels = layout.z_levels(t - 1);
        for &x in layout.x_levels(t) {
            let mut table = vec![vec![0.0f64; zp_levels.len()]; zt_levels.len()];
            let mut n = 0usize;
            for i in 0..ds.n() {
                let w = counts.map_or(1, |c| c[i] as usize);
                if w == 0 || ds.x(t, i) != x {
                    continue;
                }
                let r = zt_levels.binary_search(&ds.z(t, i)).expect("observed level");
                let c = zp_levels.binary_search(&ds.z(t - 1, i)).expect("observed level");
                table[r][c] += w as f64;
                n += w;
            }
            tests.push(pearson(t, x, n, &table));
        }
    }
    AssignmentReport { tests }
}

fn pearson(t: usize, x: Level, n: usize, table: &[Vec<f64>]) -> AssignmentTest {
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..table[0].len()).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let live_rows: Vec<usize> = (0..rows.len()).filter(|&r| rows[r] > 0.0).collect();
    let live_cols: Vec<usize> = (0..cols.len()).filter(|&c| cols[c] > 0.0).collect();
    if live_rows.len() < 2 || live_cols.len() < 2 {
        return AssignmentTest {
            t,
            x,
            n,
            statistic: None,
            df: None,
            p_value: None,
        };
    }
    let total = n as f64;
    let mut stat = 0.0;
    for &r in &live_rows {
        for &c in &live_cols {
            let e = rows[r] * cols[c] / total;
            let d = table[r][c] - e;
            stat += d * d / e;
        }
    }
    let df = (live_rows.len() - 1) * (live_cols.len() - 1);
    AssignmentTest {
        t,
        x,
        n,
        statistic: Some(stat),
        df: Some(df),
        p_value: Some(chi2_survival(stat, df)),
    }
}
