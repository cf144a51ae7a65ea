//! Sequential treatment data: subjects observed as `(x1, z1, ..., xT, zT, y)`.
//!
//! Covariates used for stratification are discrete levels. Additional
//! real-valued covariates (`x{t}_{name}` columns) are carried along for the
//! regression-adjusted estimators. A time without a covariate column gets a
//! single dummy level `0`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A discrete covariate or treatment value.
pub type Level = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeFamily {
    Normal,
    Bernoulli,
    Poisson,
}

impl OutcomeFamily {
    pub fn check(self, y: f64) -> std::result::Result<(), String> {
        let ok = match self {
            OutcomeFamily::Normal => y.is_finite(),
            OutcomeFamily::Bernoulli => y == 0.0 || y == 1.0,
            OutcomeFamily::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("y={y} is not a valid {self} outcome"))
        }
    }
}

impl fmt::Display for OutcomeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeFamily::Normal => "normal",
            OutcomeFamily::Bernoulli => "bernoulli",
            OutcomeFamily::Poisson => "poisson",
        })
    }
}

impl FromStr for OutcomeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Ok(OutcomeFamily::Normal),
            "bernoulli" | "binary" | "binomial" => Ok(OutcomeFamily::Bernoulli),
            "poisson" => Ok(OutcomeFamily::Poisson),
            other => Err(Error::InvalidArgument(format!("unknown outcome family `{other}`"))),
        }
    }
}

/// The cell `(t, x_t, z_t)`; `t` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stratum {
    pub t: usize,
    pub x: Level,
    pub z: Level,
}

impl Stratum {
    pub fn new(t: usize, x: Level, z: Level) -> Self {
        Self { t, x, z }
    }

    pub fn control(self) -> Self {
        Self { z: 0, ..self }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}, x{}={}, z{}={})", self.t, self.t, self.x, self.t, self.z)
    }
}

/// Level sets per time and the dense cell coding built on them.
///
/// Cell codes at time `t` enumerate `(x, z)` pairs as `x_index * |Z_t| + z_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    x_levels: Vec<Vec<Level>>,
    z_levels: Vec<Vec<Level>>,
}

impl Layout {
    pub fn new(x_levels: Vec<Vec<Level>>, z_levels: Vec<Vec<Level>>) -> Result<Self> {
        if x_levels.is_empty() || x_levels.len() != z_levels.len() {
            return Err(Error::Schema(
                "layout needs matching covariate and treatment level sets for T >= 1 times".into(),
            ));
        }
        for levels in x_levels.iter().chain(&z_levels) {
            if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Schema("level sets must be non-empty, sorted and distinct".into()));
            }
        }
        Ok(Self { x_levels, z_levels })
    }

    pub fn n_times(&self) -> usize {
        self.x_levels.len()
    }

    pub fn x_levels(&self, t: usize) -> &[Level] {
        &self.x_levels[t - 1]
    }

    pub fn z_levels(&self, t: usize) -> &[Level] {
        &self.z_levels[t - 1]
    }

    pub fn cell_count(&self, t: usize) -> usize {
        self.x_levels(t).len() * self.z_levels(t).len()
    }

    pub fn cell_code(&self, t: usize, x: Level, z: Level) -> Option<usize> {
        let xi = self.x_levels(t).binary_search(&x).ok()?;
        let zi = self.z_levels(t).binary_search(&z).ok()?;
        Some(xi * self.z_levels(t).len() + zi)
    }

    pub fn code_of(&self, s: Stratum) -> Option<usize> {
        if s.t == 0 || s.t > self.n_times() {
            return None;
        }
        self.cell_code(s.t, s.x, s.z)
    }

    pub fn cell(&self, t: usize, code: usize) -> Stratum {
        let nz = self.z_levels(t).len();
        Stratum::new(t, self.x_levels(t)[code / nz], self.z_levels(t)[code % nz])
    }

    pub fn check_time(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.n_times() {
            Err(Error::TimeOutOfRange {
                t,
                n_times: self.n_times(),
            })
        } else {
            Ok(())
        }
    }
}

/// A real-valued covariate column `x{t}_{name}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtraColumn {
    pub t: usize,
    pub name: String,
}

impl ExtraColumn {
    pub fn header(&self) -> String {
        format!("x{}_{}", self.t, self.name)
    }
}

/// One subject, as handed to [`SequentialDataset::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub x: Vec<Level>,
    pub z: Vec<Level>,
    pub extras: Vec<f64>,
    pub y: f64,
}

/// Which columns exist besides `id`, `z1..zT` and `y`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub n_times: usize,
    /// Whether an `x{t}` column exists for each time.
    pub covariate_observed: Vec<bool>,
    pub extra_columns: Vec<ExtraColumn>,
}

impl Schema {
    /// No extra columns; covariate columns at every time but the first.
    pub fn simple(n_times: usize, covariate_observed: Vec<bool>) -> Self {
        Self {
            n_times,
            covariate_observed,
            extra_columns: Vec::new(),
        }
    }
}

/// Immutable, validated sequential dataset (column storage).
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialDataset {
    family: OutcomeFamily,
    covariate_observed: Vec<bool>,
    extra_columns: Vec<ExtraColumn>,
    layout: Layout,
    ids: Vec<String>,
    x: Vec<Vec<Level>>,
    z: Vec<Vec<Level>>,
    extras: Vec<Vec<f64>>,
    y: Vec<f64>,
    codes: Vec<Vec<u32>>,
}

impl SequentialDataset {
    pub fn new(family: OutcomeFamily, schema: Schema, records: Vec<Record>) -> Result<Self> {
        let n_times = schema.n_times;
        if n_times == 0 || schema.covariate_observed.len() != n_times {
            return Err(Error::Schema("schema must declare T >= 1 times".into()));
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut extra_order: Vec<usize> = (0..schema.extra_columns.len()).collect();
        extra_order.sort_by_key(|&c| schema.extra_columns[c].t);
        let extra_columns: Vec<ExtraColumn> = extra_order
            .iter()
            .map(|&c| schema.extra_columns[c].clone())
            .collect();
        if let Some(bad) = extra_columns.iter().find(|c| c.t == 0 || c.t > n_times) {
            return Err(Error::Schema(format!("column `{}` has no matching time", bad.header())));
        }

        let n = records.len();
        let mut ids = Vec::with_capacity(n);
        let mut seen = HashSet::with_capacity(n);
        let mut x = vec![Vec::with_capacity(n); n_times];
        let mut z = vec![Vec::with_capacity(n); n_times];
        let mut extras = vec![Vec::with_capacity(n); extra_columns.len()];
        let mut y = Vec::with_capacity(n);
        for (row, rec) in records.into_iter().enumerate() {
            if rec.x.len() != n_times || rec.z.len() != n_times {
                return Err(Error::Schema(format!(
                    "record {} has {} covariates and {} treatments, expected {n_times}",
                    row + 1,
                    rec.x.len(),
                    rec.z.len()
                )));
            }
            if rec.extras.len() != extra_columns.len() {
                return Err(Error::Schema(format!("record {} has wrong number of extra covariates", row + 1)));
            }
            family.check(rec.y).map_err(|message| Error::Domain {
                line: row + 2,
                message: format!("subject `{}`: {message}", rec.id),
            })?;
            if !seen.insert(rec.id.clone()) {
                return Err(Error::DuplicateId(rec.id));
            }
            for t in 0..n_times {
                let xv = if schema.covariate_observed[t] { rec.x[t] } else { 0 };
                x[t].push(xv);
                z[t].push(rec.z[t]);
            }
            for (slot, &col) in extra_order.iter().enumerate() {
                extras[slot].push(rec.extras[col]);
            }
            y.push(rec.y);
            ids.push(rec.id);
        }

        let distinct = |v: &[Level]| v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>();
        let layout = Layout::new(
            x.iter().map(|c| distinct(c)).collect(),
            z.iter()
                .map(|c| {
                    let mut levels: BTreeSet<Level> = c.iter().copied().collect();
                    levels.insert(0);
                    levels.into_iter().collect()
                })
                .collect(),
        )?;
        let codes = (1..=n_times)
            .map(|t| {
                (0..n)
                    .map(|i| layout.cell_code(t, x[t - 1][i], z[t - 1][i]).expect("observed level") as u32)
                    .collect()
            })
            .collect();
        Ok(Self {
            family,
            covariate_observed: schema.covariate_observed,
            extra_columns,
            layout,
            ids,
            x,
            z,
            extras,
            y,
            codes,
        })
    }

    pub fn family(&self) -> OutcomeFamily {
        self.family
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_times(&self) -> usize {
        self.layout.n_times()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn covariate_levels(&self, t: usize) -> &[Level] {
        self.layout.x_levels(t)
    }

    pub fn treatment_levels(&self, t: usize) -> &[Level] {
        self.layout.z_levels(t)
    }

    pub fn covariate_observed(&self, t: usize) -> bool {
        self.covariate_observed[t - 1]
    }

    pub fn extra_columns(&self) -> &[ExtraColumn] {
        &self.extra_columns
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn x(&self, t: usize, i: usize) -> Level {
        self.x[t - 1][i]
    }

    pub fn z(&self, t: usize, i: usize) -> Level {
        self.z[t - 1][i]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn covariates(&self, t: usize) -> &[Level] {
        &self.x[t - 1]
    }

    pub fn treatments(&self, t: usize) -> &[Level] {
        &self.z[t - 1]
    }

    /// Values of the extra covariate `name` declared at time `t`.
    pub fn extra(&self, t: usize, name: &str) -> Option<&[f64]> {
        self.extra_columns
            .iter()
            .position(|c| c.t == t && c.name == name)
            .map(|c| self.extras[c].as_slice())
    }

    /// Values of the extra covariate with the given name at any time.
    pub fn extra_by_name(&self, name: &str) -> Option<&[f64]> {
        self.extra_columns
            .iter()
            .position(|c| c.name == name)
            .map(|c| self.extras[c].as_slice())
    }

    /// Dense cell codes of all subjects at time `t`.
    pub fn cell_codes(&self, t: usize) -> &[u32] {
        &self.codes[t - 1]
    }

    pub fn record(&self, i: usize) -> Record {
        Record {
            id: self.ids[i].clone(),
            x: (1..=self.n_times()).map(|t| self.x(t, i)).collect(),
            z: (1..=self.n_times()).map(|t| self.z(t, i)).collect(),
            extras: self.extras.iter().map(|c| c[i]).collect(),
            y: self.y[i],
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            n_times: self.n_times(),
            covariate_observed: self.covariate_observed.clone(),
            extra_columns: self.extra_columns.clone(),
        }
    }

    /// Same paths, new outcomes.
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::InvalidArgument("outcome vector has wrong length".into()));
        }
        for (i, &v) in y.iter().enumerate() {
            self.family.check(v).map_err(|message| Error::Domain {
                line: i + 2,
                message: format!("subject `{}`: {message}", self.ids[i]),
            })?;
        }
        Ok(Self { y, ..self.clone() })
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["id".to_string()];
        for t in 1..=self.n_times() {
            if self.covariate_observed(t) {
                cols.push(format!("x{t}"));
            }
            cols.extend(self.extra_columns.iter().filter(|c| c.t == t).map(ExtraColumn::header));
            cols.push(format!("z{t}"));
        }
        cols.push("y".into());
        cols
    }

    /// Serializes to the CSV layout read by [`parse_dataset`], columns in temporal order.
    pub fn to_csv_string(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for i in 0..self.n() {
            let mut fields = vec![self.ids[i].clone()];
            for t in 1..=self.n_times() {
                if self.covariate_observed(t) {
                    fields.push(self.x(t, i).to_string());
                }
                for (c, col) in self.extra_columns.iter().enumerate() {
                    if col.t == t {
                        fields.push(self.extras[c][i].to_string());
                    }
                }
                fields.push(self.z(t, i).to_string());
            }
            fields.push(self.y[i].to_string());
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

enum Column {
    Id,
    Covariate(usize),
    Extra(usize),
    Treatment(usize),
    Outcome,
}

fn classify(name: &str) -> Option<(char, usize, Option<String>)> {
    let mut chars = name.chars();
    let kind = chars.next()?;
    if kind != 'x' && kind != 'z' {
        return None;
    }
    let rest = chars.as_str();
    let (num, suffix) = match rest.find('_') {
        Some(pos) => (&rest[..pos], Some(rest[pos + 1..].to_string())),
        None => (rest, None),
    };
    if kind == 'z' && suffix.is_some() {
        return None;
    }
    let t: usize = num.parse().ok()?;
    match suffix {
        Some(s) if s.is_empty() => None,
        s => Some((kind, t, s)),
    }
}

/// Parses a comma-separated dataset with header `id, x1, z1, ..., xT, zT, y`.
///
/// `x{t}` columns are optional; `x{t}_{name}` columns hold real-valued extra
/// covariates. Level sets are the distinct observed values.
pub fn parse_dataset(text: &str, family: OutcomeFamily) -> Result<SequentialDataset> {
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
    if headers.iter().all(|h| h.is_empty()) {
        return Err(Error::EmptyDataset);
    }

    let mut columns = Vec::with_capacity(headers.len());
    let mut extras = Vec::new();
    let mut max_t = 0;
    let mut z_seen = BTreeSet::new();
    let mut x_seen = BTreeSet::new();
    let (mut has_id, mut has_y) = (false, false);
    for name in headers.iter() {
        let col = match name {
            "id" if !has_id => {
                has_id = true;
                Column::Id
            }
            "y" if !has_y => {
                has_y = true;
                Column::Outcome
            }
            _ => match classify(name) {
                Some(('z', t, None)) if t >= 1 && z_seen.insert(t) => {
                    max_t = max_t.max(t);
                    Column::Treatment(t)
                }
                Some(('x', t, None)) if t >= 1 && x_seen.insert(t) => Column::Covariate(t),
                Some(('x', t, Some(extra))) if t >= 1 => {
                    if extras.iter().any(|c: &ExtraColumn| c.t == t && c.name == extra) {
                        return Err(Error::Schema(format!("duplicate column `{name}`")));
                    }
                    extras.push(ExtraColumn { t, name: extra });
                    Column::Extra(extras.len() - 1)
                }
                _ => return Err(Error::Schema(format!("unrecognized or duplicate column `{name}`"))),
            },
        };
        columns.push(col);
    }
    if !has_id || !has_y {
        return Err(Error::Schema("header must contain `id` and `y` columns".into()));
    }
    if max_t == 0 || z_seen.len() != max_t {
        return Err(Error::Schema(format!("treatment columns must be z1..z{max_t} without gaps")));
    }
    if let Some(&t) = x_seen.iter().find(|&&t| t > max_t) {
        return Err(Error::Schema(format!("covariate column x{t} has no treatment z{t}")));
    }
    if let Some(c) = extras.iter().find(|c| c.t > max_t) {
        return Err(Error::Schema(format!("column `{}` has no treatment z{}", c.header(), c.t)));
    }

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let line = row + 2;
        let rec = result.map_err(|e| Error::Parse {
            line: e.position().map_or(line, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let field_err = |name: &str, value: &str| Error::Parse {
            line,
            message: format!("column `{name}`: cannot parse `{value}`"),
        };
        let mut r = Record {
            id: String::new(),
            x: vec![0; max_t],
            z: vec![0; max_t],
            extras: vec![0.0; extras.len()],
            y: 0.0,
        };
        for ((col, value), name) in columns.iter().zip(rec.iter()).zip(headers.iter()) {
            match *col {
                Column::Id => {
                    if value.is_empty() {
                        return Err(Error::Parse {
                            line,
                            message: "empty subject id".into(),
                        });
                    }
                    r.id = value.to_string();
                }
                Column::Covariate(t) => r.x[t - 1] = value.parse().map_err(|_| field_err(name, value))?,
                Column::Treatment(t) => r.z[t - 1] = value.parse().map_err(|_| field_err(name, value))?,
                Column::Extra(c) => r.extras[c] = value.parse().map_err(|_| field_err(name, value))?,
                Column::Outcome => r.y = value.parse().map_err(|_| field_err(name, value))?,
            }
        }
        if let Err(message) = family.check(r.y) {
            return Err(Error::Domain {
                line,
                message: format!("subject `{}`: {message}", r.id),
            });
        }
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let covariate_observed = (1..=max_t).map(|t| x_seen.contains(&t)).collect();
    SequentialDataset::new(
        family,
        Schema {
            n_times: max_t,
            covariate_observed,
            extra_columns: extras,
        },
        records,
    )
}

pub fn read_dataset(path: impl AsRef<Path>, family: OutcomeFamily) -> Result<SequentialDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, family)
}

/// Subjects with multiplicities: the dataset itself or a bootstrap resample of it.
pub trait Observations: Sync {
    fn dataset(&self) -> &SequentialDataset;

    /// Multiplicity of every subject; `None` means each subject counts once.
    fn counts(&self) -> Option<&[u32]>;

    fn total(&self) -> usize {
        match self.counts() {
            Some(c) => c.iter().map(|&w| w as usize).sum(),
            None => self.dataset().n(),
        }
    }
}

impl Observations for SequentialDataset {
    fn dataset(&self) -> &SequentialDataset {
        self
    }

    fn counts(&self) -> Option<&[u32]> {
        None
    }
}

/// A nonparametric bootstrap resample stored as per-subject draw counts.
#[derive(Debug, Clone)]
pub struct Resample<'a> {
    data: &'a SequentialDataset,
    counts: Vec<u32>,
}

impl<'a> Resample<'a> {
    /// Draws `n` subjects with replacement.
    pub fn draw<R: Rng + ?Sized>(data: &'a SequentialDataset, rng: &mut R) -> Self {
        let n = data.n();
        let mut counts = vec![0u32; n];
        for _ in 0..n {
            counts[rng.random_range(0..n)] += 1;
        }
        Self { data, counts }
    }

    pub fn from_counts(data: &'a SequentialDataset, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != data.n() {
            return Err(Error::InvalidArgument("count vector has wrong length".into()));
        }
        Ok(Self { data, counts })
    }
}

impl Observations for Resample<'_> {
    fn dataset(&self) -> &SequentialDataset {
        self.data
    }

    fn counts(&self) -> Option<&[u32]> {
        Some(&self.counts)
    }
}

/// Partition of the (resampled) subjects by `(x_t, z_t)`.
pub fn stratum_cells<D: Observations + ?Sized>(data: &D, t: usize) -> Result<BTreeMap<Stratum, Vec<usize>>> {
    let ds = data.dataset();
    ds.layout().check_time(t)?;
    let counts = data.counts();
    let mut cells: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, &code) in ds.cell_codes(t).iter().enumerate() {
        if counts.is_some_and(|c| c[i] == 0) {
            continue;
        }
        cells
            .entry(ds.layout().cell(t, code as usize))
            .or_default()
            .push(i);
    }
    Ok(cells)
}
