//! Subcommand implementations; each returns the text to print on stdout.

use std::path::Path;

use bliptest::blip_model::{check_assignment_condition, AssignmentReport, SnmmSpec};
use bliptest::estimator::{parse_hypotheses, wald, BootstrapOutcome, WaldResult};
use bliptest::medical::{generate_medical, medical_csv, parse_medical, run_medical, MedicalOptions, MedicalReport, MedicalTruth};
use bliptest::oracle_dgp::{Dgp, DgpSpec};
use bliptest::output::stable_json;
use bliptest::pipeline::{fit, fit_with_bootstrap, PipelineOptions};
use bliptest::point_effects::EstimabilityPolicy;
use bliptest::seqdata::{parse_dataset, SequentialDataset};
use bliptest::study::{run_study, StudyConfig, StudyResult};
use bliptest::{Error, Fit64, Result};
use serde_json::{json, Value};

use crate::table::{num, p_value, Table};
use crate::{DataArgs, GenerateArgs, MedicalArgs, OutputArgs, SimulateArgs, TestArgs};

const Z_975: f64 = 1.959963984540054;

/// Reads a file, naming it in the error.
fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load(args: &DataArgs) -> Result<(SequentialDataset, SnmmSpec, PipelineOptions)> {
    let data = parse_dataset(&read_text(&args.data)?, args.family)?;
    let snmm = match &args.snmm {
        Some(path) => serde_json::from_str(&read_text(path)?)?,
        None => SnmmSpec::per_stratum(data.layout()),
    };
    let options = PipelineOptions {
        variance_mode: args.variance_mode,
        policy: if args.exclude_inestimable {
            EstimabilityPolicy::Exclude
        } else {
            EstimabilityPolicy::Strict
        },
    };
    Ok((data, snmm, options))
}

/// Writes `file` into `--out` and picks JSON or text for stdout.
fn emit(value: &Value, output: &OutputArgs, file: &str, text: impl FnOnce() -> String) -> Result<String> {
    let json = stable_json(value)?;
    if let Some(dir) = &output.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(file), &json)?;
    }
    Ok(if output.json { json } else { text() })
}

fn estimate_value(data: &SequentialDataset, f: &Fit64, assignment: &AssignmentReport, options: PipelineOptions) -> Value {
    let est = &f.estimate;
    let se = est.conditional_se();
    let pe = &f.point_effects;
    let mut point_effects = Vec::new();
    for block in pe.blocks() {
        for (i, s) in block.strata.iter().enumerate() {
            point_effects.push(json!({
                "t": s.t, "x": s.x, "z": s.z,
                "theta": block.theta[i],
                "se": block.cov[(i, i)].max(0.0).sqrt(),
            }));
        }
    }
    json!({
        "n": data.n(),
        "family": data.family().to_string(),
        "variance_mode": options.variance_mode.to_string(),
        "gamma": est.labels.iter().enumerate().map(|(j, l)| json!({
            "label": l, "estimate": est.gamma[j], "se_conditional": se[j],
        })).collect::<Vec<_>>(),
        "cov_conditional": est.cov_conditional.to_rows(),
        "point_effects": point_effects,
        "excluded": pe.excluded(),
        "design": {
            "rank": f.design.rank,
            "k": est.k(),
            "condition": f.design.condition,
            "labels": f.design.labels,
            "strata": f.design.strata.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            "matrix": f.design.matrix.to_rows(),
        },
        "assignment": assignment,
    })
}

fn estimate_text(data: &SequentialDataset, f: &Fit64, assignment: &AssignmentReport) -> String {
    let est = &f.estimate;
    let mut out = format!("n = {}, family = {}, T = {}\n\n", data.n(), data.family(), data.n_times());
    out.push_str("Point effects\n");
    let mut t = Table::new(&["stratum", "theta", "se"]);
    for block in f.point_effects.blocks() {
        for (i, s) in block.strata.iter().enumerate() {
            t.row(vec![s.to_string(), num(block.theta[i]), num(block.cov[(i, i)].max(0.0).sqrt())]);
        }
    }
    out.push_str(&t.render());
    for e in f.point_effects.excluded() {
        out.push_str(&format!("excluded {}: {}\n", e.stratum, e.reason));
    }
    out.push_str(&format!(
        "\nDesign: rank {} of {}, condition number {}\n\nBlip parameter (conditional covariance)\n",
        f.design.rank,
        est.k(),
        num(f.design.condition)
    ));
    let mut t = Table::new(&["parameter", "estimate", "se"]);
    for ((l, g), s) in est.labels.iter().zip(&est.gamma).zip(est.conditional_se()) {
        t.row(vec![l.clone(), num(*g), num(s)]);
    }
    out.push_str(&t.render());
    out.push_str(&assignment_text(assignment));
    out
}

fn assignment_text(a: &AssignmentReport) -> String {
    match a.min_p_value() {
        Some(p) => format!(
            "\nAssignment check (advisory): smallest p-value {} for dependence of z_t on z_(t-1) given x_t\n",
            p_value(p)
        ),
        None => "\nAssignment check (advisory): no testable strata\n".into(),
    }
}

pub fn estimate(args: &DataArgs, output: &OutputArgs) -> Result<String> {
    let (data, snmm, options) = load(args)?;
    let f = fit::<f64, _>(&data, &snmm, options)?;
    let assignment = check_assignment_condition(&data);
    let value = estimate_value(&data, &f, &assignment, options);
    emit(&value, output, "estimate.json", || estimate_text(&data, &f, &assignment))
}

fn coefficient_rows(f: &Fit64) -> Vec<(String, f64, f64)> {
    let se = f.estimate.marginal_se().unwrap_or_default();
    f.estimate
        .labels
        .iter()
        .zip(&f.estimate.gamma)
        .zip(se)
        .map(|((l, &g), s)| (l.clone(), g, s))
        .collect()
}

fn test_value(f: &Fit64, boot: &BootstrapOutcome<f64>, args: &TestArgs, tests: &[(String, WaldResult)]) -> Value {
    json!({
        "n": f.estimate.n,
        "alpha": args.alpha,
        "bootstrap": {"replicates": args.boot, "used": boot.used, "failed": boot.failed, "seed": args.seed},
        "coefficients": coefficient_rows(f).into_iter().map(|(l, g, s)| json!({
            "label": l, "estimate": g, "se": s,
            "ci_lower": g - Z_975 * s, "ci_upper": g + Z_975 * s,
        })).collect::<Vec<_>>(),
        "cov_marginal": f.estimate.cov_marginal.as_ref().map(|c| c.to_rows()),
        "cov_conditional": f.estimate.cov_conditional.to_rows(),
        "tests": tests.iter().map(|(name, w)| {
            let mut v = serde_json::to_value(w).expect("wald result serializes");
            v["name"] = json!(name);
            v
        }).collect::<Vec<_>>(),
    })
}

fn test_text(f: &Fit64, boot: &BootstrapOutcome<f64>, args: &TestArgs, tests: &[(String, WaldResult)]) -> String {
    let mut out = format!(
        "n = {}, bootstrap replicates = {} ({} used, {} failed), seed = {}\n\nBlip parameter (bootstrap covariance)\n",
        f.estimate.n, args.boot, boot.used, boot.failed, args.seed
    );
    let mut t = Table::new(&["parameter", "estimate", "se", "95% CI"]);
    for (l, g, s) in coefficient_rows(f) {
        t.row(vec![l, num(g), num(s), format!("[{}, {}]", num(g - Z_975 * s), num(g + Z_975 * s))]);
    }
    out.push_str(&t.render());
    out.push_str(&format!("\nWald tests at alpha = {}\n", args.alpha));
    let mut t = Table::new(&["hypothesis", "W", "df", "p-value", "critical", "decision"]);
    for (name, w) in tests {
        t.row(vec![
            name.clone(),
            num(w.statistic),
            w.df.to_string(),
            p_value(w.p_value),
            num(w.critical_value),
            if w.reject { "reject" } else { "accept" }.into(),
        ]);
    }
    out.push_str(&t.render());
    out
}

pub fn test(args: &TestArgs) -> Result<String> {
    let (data, snmm, options) = load(&args.data)?;
    let hypotheses = parse_hypotheses(&read_text(&args.hypothesis)?)?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let (f, boot) = fit_with_bootstrap::<f64>(&data, &snmm, options, args.boot, args.seed)?;
    let tests = hypotheses
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let name = h.name.clone().unwrap_or_else(|| format!("H{}", i + 1));
            Ok((name, wald(&f.estimate, h, args.alpha)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let value = test_value(&f, &boot, args, &tests);
    emit(&value, &args.output, "test.json", || test_text(&f, &boot, args, &tests))
}

fn study_text(result: &StudyResult) -> String {
    let c = &result.config;
    let mut out = format!(
        "Monte Carlo study: {} replicates, B = {}, alpha = {}, seed = {}, config {}\n\n",
        c.mc_reps,
        c.bootstrap_b,
        c.alpha,
        c.seed,
        &result.config_hash[..12]
    );
    out.push_str("Error rates (rate0 = type I; rate1, rate2 = type II at shifts c, 2c)\n");
    let mut t = Table::new(&["family", "n", "hypothesis", "df", "reps", "rate0", "rate1", "rate2", "se0"]);
    for r in &result.error_rates {
        t.row(vec![
            r.family.clone(),
            r.n.to_string(),
            r.hypothesis.clone(),
            r.df.to_string(),
            r.reps.to_string(),
            format!("{:.3}", r.rate0),
            format!("{:.3}", r.rate1),
            format!("{:.3}", r.rate2),
            format!("{:.3}", r.mc_se[0]),
        ]);
    }
    out.push_str(&t.render());
    out.push_str("\nEstimates (unconstrained and under the equality constraint)\n");
    let mut t = Table::new(&["family", "n", "component", "truth", "mean", "variance", "restricted mean", "restricted var"]);
    for r in &result.estimates {
        t.row(vec![
            r.family.clone(),
            r.n.to_string(),
            r.component.clone(),
            num(r.truth),
            num(r.mean),
            num(r.variance),
            r.restricted_mean.map_or("-".into(), num),
            r.restricted_variance.map_or("-".into(), num),
        ]);
    }
    out.push_str(&t.render());
    let failed = result.replicates.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        out.push_str(&format!("\n{failed} replicates failed; see study.json\n"));
    }
    out
}

pub fn simulate(args: &SimulateArgs) -> Result<String> {
    let mut config = StudyConfig::from_json(&read_text(&args.config)?)?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(b) = args.boot {
        config.bootstrap_b = b;
    }
    if let Some(reps) = args.reps {
        config.mc_reps = reps;
    }
    let result = run_study(&config, &base)?;
    if let Some(dir) = &args.output.out {
        result.write_artifacts(dir)?;
    }
    Ok(if args.output.json { result.to_json()? } else { study_text(&result) })
}

fn medical_text(r: &MedicalReport) -> String {
    let mut out = format!(
        "n = {}, bootstrap replicates = {} ({} used), seed = {}\nz1 model covariates: {}\nz2 model covariates: {}\n",
        r.n,
        r.bootstrap.replicates,
        r.bootstrap.used,
        r.bootstrap.seed,
        list(&r.covariates_t1),
        list(&r.covariates_t2)
    );
    out.push_str(&format!(
        "\nCovariate significance (selection at p <= 0.1{})\n",
        if r.auto_select { ", applied" } else { ", not applied" }
    ));
    let mut t = Table::new(&["covariate", "p (z1 model)", "p (z2 models)", "kept z1", "kept z2"]);
    for d in &r.diagnostics {
        t.row(vec![
            d.covariate.clone(),
            d.p_value_t1.map_or("-".into(), p_value),
            d.p_value_t2.map_or("-".into(), p_value),
            yes_no(d.kept_t1),
            yes_no(d.kept_t2),
        ]);
    }
    out.push_str(&t.render());
    out.push_str(&format!("\nc20 = {}, c21 = {}\n\n", num(r.c20), num(r.c21)));
    let mut t = Table::new(&["effect", "estimate", "se", "95% CI", "p-value"]);
    for row in r.blip_effects.iter().chain(&r.point_effects) {
        t.row(vec![
            row.label.clone(),
            num(row.estimate),
            num(row.se),
            format!("[{}, {}]", num(row.ci_lower), num(row.ci_upper)),
            p_value(row.p_value),
        ]);
    }
    out.push_str(&t.render());
    out.push_str(&format!(
        "\nJoint test of zero blip effects: W = {}, df = {}, p = {}\n",
        num(r.joint_test.statistic),
        r.joint_test.df,
        p_value(r.joint_test.p_value)
    ));
    for w in &r.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        "(none)".into()
    } else {
        items.join(", ")
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.into()
}

pub fn medical(args: &MedicalArgs) -> Result<String> {
    let data = parse_medical(&read_text(&args.data)?)?;
    let options = MedicalOptions {
        t1_covariates: args.t1_covariates.clone(),
        t2_covariates: args.t2_covariates.clone(),
        auto_select: args.auto_select,
        boot: args.boot,
        seed: args.seed,
        alpha: args.alpha,
        ..MedicalOptions::default()
    };
    let report = run_medical(&data, &options)?;
    let value = serde_json::to_value(&report)?;
    emit(&value, &args.output, "medical.json", || medical_text(&report))
}

fn write_or_return(text: String, out: Option<&Path>) -> Result<String> {
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

pub fn generate(args: &GenerateArgs) -> Result<String> {
    if args.medical {
        let truth = if args.null { MedicalTruth::null() } else { MedicalTruth::default() };
        let data = generate_medical(&truth, args.n, args.seed)?;
        return write_or_return(medical_csv(&data)?, args.out.as_deref());
    }
    let spec = match &args.config {
        Some(path) => DgpSpec::from_json(&read_text(path)?)?,
        None => DgpSpec::default_for(args.family),
    };
    if args.print_spec {
        return write_or_return(spec.to_json() + "\n", args.out.as_deref());
    }
    let data = Dgp::new(spec)?.generate(args.n, args.seed)?;
    write_or_return(data.to_csv_string(), args.out.as_deref())
}
