//! Monte Carlo study of the Wald test: type I and II error rates over a
//! battery of hypotheses, and the mean and variance of `γ̂` with and without
//! the equality constraint between the last two times.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blip_model::BasisFunction;
use crate::error::{Error, Result};
use crate::estimator::{restricted_gls, wald, Hypothesis, HypothesisJson};
use crate::linalg::Matrix;
use crate::oracle_dgp::{Dgp, DgpSpec};
use crate::output::stable_json;
use crate::pipeline::{fit_with_bootstrap, PipelineOptions};
use crate::rng::derive_seed;
use crate::seqdata::OutcomeFamily;

/// Where a study family takes its data-generating process from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DgpRef {
    Inline(Box<DgpSpec>),
    /// `normal`, `bernoulli` or `poisson` for a shipped spec, otherwise a
    /// path relative to the config file.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyEntry {
    pub dgp: DgpRef,
    /// Shift `c` of the alternatives; 1 for normal and poisson, 0.1 for bernoulli by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

fn default_b() -> usize {
    500
}

fn default_reps() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub families: Vec<FamilyEntry>,
    pub n_list: Vec<usize>,
    #[serde(default = "default_reps")]
    pub mc_reps: usize,
    #[serde(default = "default_b", alias = "bootstrap_B")]
    pub bootstrap_b: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    /// Include the single-component and equality battery.
    #[serde(default = "default_true")]
    pub battery: bool,
    /// Further hypotheses, tested at `ρ`, `ρ + c` and `ρ + 2c` for every family.
    #[serde(default)]
    pub hypotheses: Vec<HypothesisJson>,
    #[serde(default)]
    pub pipeline: PipelineOptions,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config; named DGP paths resolve against the file's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let config = Self::from_json(&std::fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((config, base))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.mc_reps == 0 {
            return bad("mc_reps must be at least 1");
        }
        if self.bootstrap_b < 2 {
            return bad("bootstrap_b must be at least 2");
        }
        if self.families.is_empty() || self.n_list.is_empty() {
            return bad("families and n_list must be non-empty");
        }
        if self.n_list.contains(&0) {
            return bad("sample sizes must be positive");
        }
        for h in &self.hypotheses {
            h.clone().into_hypothesis()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = stable_json(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The paper-sized study for one shipped family.
    pub fn paper(family: OutcomeFamily) -> Self {
        Self {
            families: vec![FamilyEntry {
                dgp: DgpRef::Named(family.to_string()),
                shift: None,
                name: None,
            }],
            n_list: vec![1000, 2000, 3000],
            mc_reps: 1000,
            bootstrap_b: 500,
            alpha: 0.05,
            seed: 0,
            battery: true,
            hypotheses: Vec::new(),
            pipeline: PipelineOptions::default(),
        }
    }
}

/// Resolves a DGP reference.
pub fn resolve_dgp(dgp: &DgpRef, base: &Path) -> Result<DgpSpec> {
    match dgp {
        DgpRef::Inline(spec) => Ok((**spec).clone()),
        DgpRef::Named(name) => match name.parse::<OutcomeFamily>() {
            Ok(family) => Ok(DgpSpec::default_for(family)),
            Err(_) => DgpSpec::read(base.join(name)),
        },
    }
}

pub fn default_shift(family: OutcomeFamily) -> f64 {
    match family {
        OutcomeFamily::Bernoulli => 0.1,
        OutcomeFamily::Normal | OutcomeFamily::Poisson => 1.0,
    }
}

/// A hypothesis with its null value; alternative `s` tests `ρ + s·c`.
#[derive(Debug, Clone)]
pub struct BatteryEntry {
    pub name: String,
    pub hypothesis: Hypothesis<f64>,
}

impl BatteryEntry {
    pub fn shifted(&self, shift: f64) -> Result<Hypothesis<f64>> {
        let rho = self.hypothesis.rho().iter().map(|r| r + shift).collect();
        Hypothesis::new(self.hypothesis.h().clone(), rho)
    }
}

fn letter(i: usize) -> String {
    char::from_u32('A' as u32 + i as u32)
        .filter(|_| i < 26)
        .map_or_else(|| format!("H{}", i + 1), String::from)
}

/// Name of the equality hypothesis between the last two times.
pub const EQUALITY_NAME: &str = "J";

/// One hypothesis per component (`γ_j = γ_{j,0}`), named `A`, `B`, ... in
/// component order, plus the equality of matching indicator components at
/// the last two times (named `J` after nine components, otherwise the next
/// letter).
pub fn battery(spec: &DgpSpec) -> Result<Vec<BatteryEntry>> {
    let k = spec.snmm.k();
    let mut out = Vec::with_capacity(k + 1);
    for j in 0..k {
        out.push(BatteryEntry {
            name: letter(j),
            hypothesis: Hypothesis::single(k, j, spec.gamma[j])?,
        });
    }
    let t_last = spec.n_times();
    if t_last >= 2 {
        let basis = spec.snmm.basis();
        let mut rows = Vec::new();
        let mut rho = Vec::new();
        for (a, fa) in basis.iter().enumerate() {
            let BasisFunction::Indicator { t, x_in, z_in, .. } = fa else { continue };
            if *t != t_last - 1 {
                continue;
            }
            let partner = basis.iter().position(|fb| {
                matches!(fb, BasisFunction::Indicator { t, x_in: xb, z_in: zb, .. }
                    if *t == t_last && xb == x_in && zb == z_in)
            });
            if let Some(b) = partner {
                let mut row = vec![0.0; k];
                row[a] = 1.0;
                row[b] = -1.0;
                rows.push(row);
                rho.push(spec.gamma[a] - spec.gamma[b]);
            }
        }
        if !rows.is_empty() {
            let name = if k == 9 { EQUALITY_NAME.to_string() } else { letter(k) };
            out.push(BatteryEntry {
                name,
                hypothesis: Hypothesis::new(Matrix::from_rows(&rows), rho)?,
            });
        }
    }
    Ok(out)
}

/// Outcome of one Monte Carlo replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub family: String,
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub bootstrap_failed: usize,
    /// Names like `A0`, `J2` of the hypotheses rejected at shift 0, 1, 2.
    pub rejected: Vec<String>,
    #[serde(skip)]
    pub statistics: Vec<[f64; 3]>,
    #[serde(skip)]
    pub gamma: Option<Vec<f64>>,
    #[serde(skip)]
    pub gamma_restricted: Option<Vec<f64>>,
}

impl ReplicateRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Rejection summary of one hypothesis at one family and sample size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRateRow {
    pub family: String,
    pub n: usize,
    pub hypothesis: String,
    pub df: usize,
    pub reps: usize,
    /// Rejection rate at shift 0 (type I error).
    pub rate0: f64,
    /// Non-rejection rate at shift `c` (type II error).
    pub rate1: f64,
    /// Non-rejection rate at shift `2c` (type II error).
    pub rate2: f64,
    /// Rejection rates at shifts 0, `c`, `2c`.
    pub reject: [f64; 3],
    /// `sqrt(r(1 − r)/reps)` for each rejection rate.
    pub mc_se: [f64; 3],
}

/// Monte Carlo mean and variance of one component of `γ̂`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub family: String,
    pub n: usize,
    pub component: String,
    pub truth: f64,
    pub mean: f64,
    pub variance: f64,
    /// Monte Carlo standard error of `mean`.
    pub mean_se: f64,
    /// Under the equality constraint, when the battery has one.
    pub restricted_mean: Option<f64>,
    pub restricted_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub config_hash: String,
    pub error_rates: Vec<ErrorRateRow>,
    pub estimates: Vec<EstimateRow>,
    pub replicates: Vec<ReplicateRecord>,
}

struct FamilyPlan {
    name: String,
    dgp: Dgp,
    shift: f64,
    hypotheses: Vec<BatteryEntry>,
    restricted: Option<Hypothesis<f64>>,
}

fn plan(config: &StudyConfig, base: &Path) -> Result<Vec<FamilyPlan>> {
    config
        .families
        .iter()
        .map(|entry| {
            let spec = resolve_dgp(&entry.dgp, base)?;
            let shift = entry.shift.unwrap_or_else(|| default_shift(spec.family));
            let name = entry.name.clone().unwrap_or_else(|| spec.family.to_string());
            let mut hypotheses = if config.battery { battery(&spec)? } else { Vec::new() };
            let restricted = hypotheses
                .iter()
                .find(|h| h.name == EQUALITY_NAME && config.battery)
                .map(|h| h.hypothesis.clone());
            for (i, h) in config.hypotheses.iter().enumerate() {
                let hypothesis = h.clone().into_hypothesis()?;
                if hypothesis.h().cols() != spec.snmm.k() {
                    return Err(Error::InvalidHypothesis(format!(
                        "hypothesis {} has {} columns but the SNMM has {} parameters",
                        i + 1,
                        hypothesis.h().cols(),
                        spec.snmm.k()
                    )));
                }
                hypotheses.push(BatteryEntry {
                    name: h.name.clone().unwrap_or_else(|| format!("custom{}", i + 1)),
                    hypothesis,
                });
            }
            Ok(FamilyPlan {
                name,
                dgp: Dgp::new(spec)?,
                shift,
                hypotheses,
                restricted,
            })
        })
        .collect()
}

fn run_replicate(plan: &FamilyPlan, config: &StudyConfig, n: usize, rep: usize, seed: u64) -> ReplicateRecord {
    let mut record = ReplicateRecord {
        family: plan.name.clone(),
        n,
        rep,
        seed,
        error: None,
        bootstrap_failed: 0,
        rejected: Vec::new(),
        statistics: Vec::new(),
        gamma: None,
        gamma_restricted: None,
    };
    let outcome = (|| -> Result<()> {
        let data = plan.dgp.generate(n, derive_seed(seed, &[0]))?;
        let snmm = &plan.dgp.spec().snmm;
        let (fit, boot) =
            fit_with_bootstrap::<f64>(&data, snmm, config.pipeline, config.bootstrap_b, derive_seed(seed, &[1]))?;
        record.bootstrap_failed = boot.failed;
        for entry in &plan.hypotheses {
            let mut stats = [0.0; 3];
            for (s, stat) in stats.iter_mut().enumerate() {
                let hyp = entry.shifted(s as f64 * plan.shift)?;
                let result = wald(&fit.estimate, &hyp, config.alpha)?;
                *stat = result.statistic;
                if result.reject {
                    record.rejected.push(format!("{}{s}", entry.name));
                }
            }
            record.statistics.push(stats);
        }
        if let Some(h) = &plan.restricted {
            record.gamma_restricted = Some(restricted_gls(&fit.estimate, h)?.gamma);
        }
        record.gamma = Some(fit.estimate.gamma);
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
        record.rejected.clear();
        record.statistics.clear();
        record.gamma = None;
        record.gamma_restricted = None;
    }
    record
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Runs the study. Replicate `rep` of family `f` at size `n` uses seed
/// `derive_seed(seed, [f, n, rep])`; results do not depend on the thread count.
pub fn run_study(config: &StudyConfig, base: &Path) -> Result<StudyResult> {
    config.validate()?;
    let plans = plan(config, base)?;
    let mut error_rates = Vec::new();
    let mut estimates = Vec::new();
    let mut replicates = Vec::new();
    for (f, plan) in plans.iter().enumerate() {
        for &n in &config.n_list {
            let records: Vec<ReplicateRecord> = (0..config.mc_reps)
                .into_par_iter()
                .map(|rep| {
                    let seed = derive_seed(config.seed, &[f as u64, n as u64, rep as u64]);
                    run_replicate(plan, config, n, rep, seed)
                })
                .collect();
            let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.ok()).collect();
            let failed = records.len() - ok.len();
            if failed * 10 > config.mc_reps || ok.is_empty() {
                return Err(Error::Study {
                    failed,
                    total: config.mc_reps,
                });
            }
            let used = ok.len() as f64;
            for entry in &plan.hypotheses {
                let mut reject = [0.0; 3];
                for (s, r) in reject.iter_mut().enumerate() {
                    let tag = format!("{}{s}", entry.name);
                    *r = ok.iter().filter(|rec| rec.rejected.contains(&tag)).count() as f64 / used;
                }
                error_rates.push(ErrorRateRow {
                    family: plan.name.clone(),
                    n,
                    hypothesis: entry.name.clone(),
                    df: entry.hypothesis.df(),
                    reps: ok.len(),
                    rate0: reject[0],
                    rate1: 1.0 - reject[1],
                    rate2: 1.0 - reject[2],
                    reject,
                    mc_se: reject.map(|r| (r * (1.0 - r) / used).sqrt()),
                });
            }
            let spec = plan.dgp.spec();
            for (j, label) in spec.snmm.labels().into_iter().enumerate() {
                let values: Vec<f64> = ok.iter().map(|r| r.gamma.as_ref().expect("ok replicate")[j]).collect();
                let (mean, variance) = mean_var(&values);
                let restricted: Option<Vec<f64>> =
                    ok.iter().map(|r| r.gamma_restricted.as_ref().map(|g| g[j])).collect();
                let restricted = restricted.map(|v| mean_var(&v));
                estimates.push(EstimateRow {
                    family: plan.name.clone(),
                    n,
                    component: label,
                    truth: spec.gamma[j],
                    mean,
                    variance,
                    mean_se: (variance / used).sqrt(),
                    restricted_mean: restricted.map(|r| r.0),
                    restricted_variance: restricted.map(|r| r.1),
                });
            }
            replicates.extend(records);
        }
    }
    Ok(StudyResult {
        config: config.clone(),
        config_hash: config.hash(),
        error_rates,
        estimates,
        replicates,
    })
}

fn csv_float(v: f64) -> String {
    if v.is_finite() {
        format!("{}", crate::output::round_significant(v))
    } else {
        String::new()
    }
}

impl StudyResult {
    pub fn error_rates_csv(&self) -> String {
        let mut out = String::from("family,n,hypothesis,df,reps,rate0,rate1,rate2,se0,se1,se2\n");
        for r in &self.error_rates {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.family,
                r.n,
                r.hypothesis,
                r.df,
                r.reps,
                csv_float(r.rate0),
                csv_float(r.rate1),
                csv_float(r.rate2),
                csv_float(r.mc_se[0]),
                csv_float(r.mc_se[1]),
                csv_float(r.mc_se[2]),
            ));
        }
        out
    }

    pub fn estimates_csv(&self) -> String {
        let mut out =
            String::from("family,n,component,truth,mean,variance,mean_se,restricted_mean,restricted_variance\n");
        for r in &self.estimates {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.family,
                r.n,
                r.component,
                csv_float(r.truth),
                csv_float(r.mean),
                csv_float(r.variance),
                csv_float(r.mean_se),
                r.restricted_mean.map_or(String::new(), csv_float),
                r.restricted_variance.map_or(String::new(), csv_float),
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        stable_json(self)
    }

    /// Writes `error_rates.csv`, `estimates.csv` and `study.json` into `dir`.
    pub fn write_artifacts(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("error_rates.csv"), self.error_rates_csv())?;
        std::fs::write(dir.join("estimates.csv"), self.estimates_csv())?;
        std::fs::write(dir.join("study.json"), self.to_json()?)?;
        Ok(())
    }

    pub fn error_rate(&self, family: &str, n: usize, hypothesis: &str) -> Option<&ErrorRateRow> {
        self.error_rates
            .iter()
            .find(|r| r.family == family && r.n == n && r.hypothesis == hypothesis)
    }
}
