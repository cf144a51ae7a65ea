//! Acceptance suite: one PASS/FAIL line per criterion and a summary line.
//!
//! Run with `cargo test -p bliptest-core --test acceptance -- --nocapture`.
//! `BLIPTEST_ACCEPTANCE=smoke` runs the reduced Monte Carlo variant
//! (200 replicates, B = 200) of the study-based criteria, and
//! `BLIPTEST_ACCEPTANCE_STRICT=1` turns any failed criterion into a nonzero exit.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use bliptest::chi2::chi2_survival;
use bliptest::estimator::wald_statistic;
use bliptest::linalg::Matrix;
use bliptest::medical::{calibrate, generate_medical, run_medical, MedicalOptions, MedicalTruth};
use bliptest::oracle_dgp::{random_spec, Dgp, DgpSpec};
use bliptest::pipeline::{fit, PipelineOptions};
use bliptest::point_effects::{estimate_all_point_effects, EstimabilityPolicy, VarianceMode};
use bliptest::rng::derive_seed;
use bliptest::seqdata::{OutcomeFamily, SequentialDataset};
use bliptest::study::{battery, run_study, DgpRef, FamilyEntry, StudyConfig, StudyResult, EQUALITY_NAME};
use rayon::prelude::*;

const SEED: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

#[derive(Clone, Copy)]
struct Sizes {
    reps: usize,
    boot: usize,
    smoke: bool,
}

fn study(families: &[OutcomeFamily], n_list: &[usize], sizes: Sizes, seed: u64) -> StudyResult {
    let config = StudyConfig {
        families: families
            .iter()
            .map(|f| FamilyEntry {
                dgp: DgpRef::Named(f.to_string()),
                shift: None,
                name: None,
            })
            .collect(),
        n_list: n_list.to_vec(),
        mc_reps: sizes.reps,
        bootstrap_b: sizes.boot,
        seed,
        ..StudyConfig::paper(OutcomeFamily::Normal)
    };
    run_study(&config, Path::new(".")).expect("study runs")
}

fn shipped() -> [DgpSpec; 3] {
    [DgpSpec::default_normal(), DgpSpec::default_bernoulli(), DgpSpec::default_poisson()]
}

fn c1() -> Outcome {
    let start = Instant::now();
    let specs = 60;
    let worst = (0..specs)
        .map(|i| {
            let dgp = Dgp::new(random_spec(derive_seed(SEED, &[1, i]))).expect("random spec is valid");
            dgp.decomposition_residual().expect("exact design exists")
        })
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-10 && secs < 10.0,
        format!("{specs} random specs, max |C·γ − θ| = {worst:.2e}, {secs:.2} s"),
    )
}

fn c2() -> Outcome {
    let mut specs: Vec<DgpSpec> = shipped().into();
    specs.extend((0..20).map(|i| random_spec(derive_seed(SEED, &[2, i]))));
    let worst = specs
        .iter()
        .map(|s| Dgp::new(s.clone()).unwrap().exact_point_effects().max_route_difference())
        .fold(0.0, f64::max);
    outcome(worst < 1e-10, format!("3 shipped + 20 random specs, max route difference {worst:.2e}"))
}

fn c3() -> Outcome {
    let targets = [-5.0, 0.55, 20.0];
    let mut pass = true;
    let mut parts = Vec::new();
    for (spec, target) in shipped().into_iter().zip(targets) {
        let family = spec.family;
        let dgp = Dgp::new(spec).unwrap();
        let paths = &dgp.params().paths;
        let mean: f64 = paths.iter().map(|p| p.mean * p.probability).sum();
        let err = (mean - target).abs();
        pass &= err < 1e-10;
        parts.push(format!("{family} {mean:.12} (err {err:.1e})"));
    }
    outcome(pass, parts.join(", "))
}

fn c4(normal: &StudyResult, sizes: Sizes) -> Outcome {
    let (lo, hi) = if sizes.smoke { (0.02, 0.09) } else { (0.035, 0.065) };
    let mut pass = true;
    let mut parts = Vec::new();
    for h in ["A", EQUALITY_NAME] {
        let row = normal.error_rate("normal", 1000, h).expect("battery row");
        pass &= (lo..=hi).contains(&row.rate0);
        parts.push(format!("{h}0 {:.3} ± {:.3}", row.rate0, row.mc_se[0]));
    }
    outcome(
        pass,
        format!(
            "normal n=1000, {} reps, B={}: {} in [{lo}, {hi}]",
            sizes.reps,
            sizes.boot,
            parts.join(", ")
        ),
    )
}

fn c5(normal: &StudyResult) -> Outcome {
    // `a` must not fall below `b` by more than two Monte Carlo SE of the difference
    let at_least = |a: f64, sa: f64, b: f64, sb: f64| a - b > -2.0 * (sa * sa + sb * sb).sqrt();
    let mut pass = true;
    let mut parts = Vec::new();
    for h in ["A", EQUALITY_NAME] {
        let small = normal.error_rate("normal", 1000, h).unwrap();
        let large = normal.error_rate("normal", 3000, h).unwrap();
        for row in [small, large] {
            let (r, s) = (row.reject, row.mc_se);
            pass &= at_least(r[2], s[2], r[1], s[1]) && at_least(r[1], s[1], r[0], s[0]);
        }
        for shift in 1..3 {
            pass &= at_least(large.reject[shift], large.mc_se[shift], small.reject[shift], small.mc_se[shift]);
        }
        let fmt = |r: [f64; 3]| format!("{:.3}/{:.3}/{:.3}", r[0], r[1], r[2]);
        parts.push(format!("{h}: n=1000 {} n=3000 {}", fmt(small.reject), fmt(large.reject)));
    }
    outcome(pass, format!("rejection at shift 0/c/2c, {}", parts.join("; ")))
}

fn c6(results: &[&StudyResult]) -> Outcome {
    let mut pass = true;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut count = 0;
    for result in results {
        for row in result.estimates.iter().filter(|r| r.n == 1000) {
            count += 1;
            let bound = (0.05 * row.truth.abs()).max(4.0 * row.mean_se);
            let bias = (row.mean - row.truth).abs();
            worst = worst.max(bias / bound);
            if bias >= bound {
                pass = false;
                failures.push(format!("{} {}", row.family, row.component));
            }
        }
    }
    pass &= count == 27;
    let mut detail = format!("{count} components over 3 families, max |bias|/bound = {worst:.3}");
    if !failures.is_empty() {
        detail.push_str(&format!(", exceeded: {}", failures.join(", ")));
    }
    outcome(pass, detail)
}

fn c7(normal: &StudyResult) -> Outcome {
    let spec = DgpSpec::default_normal();
    let j = battery(&spec)
        .unwrap()
        .into_iter()
        .find(|e| e.name == EQUALITY_NAME)
        .expect("equality hypothesis");
    let h = j.hypothesis.h();
    let labels = spec.snmm.labels();
    let constrained: Vec<&String> = (0..spec.snmm.k())
        .filter(|&c| (0..h.rows()).any(|r| h[(r, c)] != 0.0))
        .map(|c| &labels[c])
        .collect();
    let mut pass = constrained.len() == 8;
    let mut ratios = Vec::new();
    for row in normal.estimates.iter().filter(|r| r.n == 1000 && constrained.contains(&&r.component)) {
        let restricted = row.restricted_variance.unwrap_or(f64::INFINITY);
        pass &= restricted < row.variance;
        ratios.push(restricted / row.variance);
    }
    pass &= ratios.len() == 8;
    let max = ratios.iter().copied().fold(0.0, f64::max);
    outcome(
        pass,
        format!("{} constrained components, max restricted/unconstrained variance {max:.3}", ratios.len()),
    )
}

/// Contrast vectors `l` with `θ̂ = l'y` for every treated-vs-control point
/// effect at every time, grouping subjects by `key(t, i)`.
fn contrasts(data: &SequentialDataset, key: impl Fn(usize, usize) -> Vec<i64>) -> Vec<(usize, Vec<f64>)> {
    let n = data.n();
    let mut out = Vec::new();
    for t in 1..=data.n_times() {
        let mut groups: BTreeMap<Vec<i64>, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for i in 0..n {
            let g = groups.entry(key(t, i)).or_default();
            if data.z(t, i) == 0 { g.0.push(i) } else { g.1.push(i) }
        }
        for (control, treated) in groups.into_values() {
            if control.is_empty() || treated.is_empty() {
                continue;
            }
            let mut l = vec![0.0; n];
            treated.iter().for_each(|&i| l[i] += 1.0 / treated.len() as f64);
            control.iter().for_each(|&i| l[i] -= 1.0 / control.len() as f64);
            out.push((t, l));
        }
    }
    out
}

/// Largest `|σ² l_a'l_b|` over point effects at different times, relative to
/// the Monte Carlo SE of a covariance estimated from `resamples` draws.
fn exact_cross_time(rows: &[(usize, Vec<f64>)], sigma2: f64, resamples: f64) -> (f64, f64) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() * sigma2;
    let (mut abs, mut ratio) = (0.0f64, 0.0f64);
    for (a, (ta, la)) in rows.iter().enumerate() {
        for (tb, lb) in &rows[a + 1..] {
            if ta == tb {
                continue;
            }
            let c = dot(la, lb);
            abs = abs.max(c.abs());
            ratio = ratio.max(c.abs() / ((dot(la, la) * dot(lb, lb) + c * c) / resamples).sqrt());
        }
    }
    (abs, ratio)
}

fn c8() -> Outcome {
    let spec = DgpSpec::default_normal();
    let sigma2 = spec.sigma.unwrap().powi(2);
    let dgp = Dgp::new(spec).unwrap();
    let resamples = 2000;
    // exact zero for strata defined by the full history (the proven lemma)
    let small = dgp.generate(1000, derive_seed(SEED, &[8, 2])).unwrap();
    let history = |t: usize, i: usize| {
        let mut key: Vec<i64> = (1..=t).map(|s| small.x(s, i)).collect();
        key.extend((1..t).map(|s| small.z(s, i)));
        key
    };
    let (lemma, _) = exact_cross_time(&contrasts(&small, history), sigma2, resamples as f64);
    // strata defined by x_t alone are uncorrelated only as n grows
    let (_, ratio_1000) = exact_cross_time(&contrasts(&small, |t, i| vec![small.x(t, i)]), sigma2, resamples as f64);

    let n = 50_000;
    let base = dgp.generate(n, derive_seed(SEED, &[8, 0])).unwrap();
    let thetas: Vec<Vec<f64>> = (0..resamples as u64)
        .into_par_iter()
        .map(|r| {
            let data = dgp.resample_outcomes(&base, derive_seed(SEED, &[8, 1, r])).unwrap();
            estimate_all_point_effects::<f64, _>(&data, VarianceMode::PooledNormal, EstimabilityPolicy::Strict)
                .unwrap()
                .theta()
        })
        .collect();
    let strata = estimate_all_point_effects::<f64, _>(&base, VarianceMode::PooledNormal, EstimabilityPolicy::Strict)
        .unwrap()
        .strata();
    let m = strata.len();
    let count = resamples as f64;
    let mean: Vec<f64> = (0..m).map(|a| thetas.iter().map(|t| t[a]).sum::<f64>() / count).collect();
    let mut worst = 0.0f64;
    let (mut pairs, mut within) = (0, 0);
    for a in 0..m {
        for b in a + 1..m {
            if strata[a].t == strata[b].t {
                continue;
            }
            pairs += 1;
            let products: Vec<f64> = thetas.iter().map(|t| (t[a] - mean[a]) * (t[b] - mean[b])).collect();
            let cov = products.iter().sum::<f64>() / count;
            let var = products.iter().map(|p| (p - cov).powi(2)).sum::<f64>() / (count - 1.0);
            let z = cov.abs() / (var / count).sqrt();
            worst = worst.max(z);
            within += usize::from(z < 3.0);
        }
    }
    outcome(
        within == pairs && lemma < 1e-12,
        format!(
            "n={n}, {resamples} outcome resamples, {within}/{pairs} cross-time pairs within 3 MC SE (max {worst:.2}); \
             full-history strata exact max |cov| = {lemma:.1e}; x_t strata at n=1000 exact |cov|/MC SE = {ratio_1000:.2}"
        ),
    )
}

fn c9() -> Outcome {
    let spec = DgpSpec::default_normal();
    let dgp = Dgp::new(spec.clone()).unwrap();
    let n = 1000;
    let fit_gamma = |seed: u64| {
        let data = dgp.generate(n, seed).unwrap();
        fit::<f64, _>(&data, &spec.snmm, PipelineOptions::default()).map(|f| f.estimate.gamma)
    };
    // marginal covariance of γ̂ from an independent pilot run
    let pilot: Vec<Vec<f64>> = (0..5000u64)
        .into_par_iter()
        .filter_map(|r| fit_gamma(derive_seed(SEED, &[9, 0, r])).ok())
        .collect();
    let k = spec.snmm.k();
    let count = pilot.len() as f64;
    let mean: Vec<f64> = (0..k).map(|a| pilot.iter().map(|g| g[a]).sum::<f64>() / count).collect();
    let cov = Matrix::from_fn(k, k, |a, b| {
        pilot.iter().map(|g| (g[a] - mean[a]) * (g[b] - mean[b])).sum::<f64>() / (count - 1.0)
    });
    let hyp = battery(&spec)
        .unwrap()
        .into_iter()
        .find(|e| e.name == EQUALITY_NAME)
        .unwrap()
        .hypothesis;
    let df = hyp.df();
    let (meta, per) = (20u64, 1000u64);
    let critical = 1.628 / (per as f64).sqrt();
    let mut passed = 0;
    let mut worst = 0.0f64;
    for m in 0..meta {
        let mut w: Vec<f64> = (0..per)
            .into_par_iter()
            .filter_map(|r| fit_gamma(derive_seed(SEED, &[9, 1 + m, r])).ok())
            .map(|g| wald_statistic(&g, &cov, &hyp).unwrap())
            .collect();
        w.sort_by(f64::total_cmp);
        let len = w.len() as f64;
        let d = w
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - chi2_survival(x, df);
                (f - i as f64 / len).max((i + 1) as f64 / len - f)
            })
            .fold(0.0, f64::max);
        worst = worst.max(d);
        passed += usize::from(d < critical);
    }
    outcome(
        passed >= 19,
        format!("J0 (df={df}): {passed}/{meta} meta-replicates pass KS at 0.01, max D = {worst:.4} (critical {critical:.4})"),
    )
}

/// Nodes and weights of `points`-point Gauss–Legendre quadrature on [-1, 1].
fn gauss_legendre(points: usize) -> Vec<(f64, f64)> {
    (1..=points)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (points as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for j in 2..=points {
                    let j = j as f64;
                    (p0, p1) = (p1, ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j);
                }
                dp = points as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// `P(χ²_l > w)` by quadrature of the density after substituting `x = u²`,
/// which removes the singularity at zero for `l = 1`.
fn survival_by_quadrature(w: f64, l: usize, gamma_half_l: f64, rule: &[(f64, f64)]) -> f64 {
    if w == 0.0 {
        return 1.0;
    }
    let half = l as f64 / 2.0;
    let norm = 2.0 / (2f64.powf(half) * gamma_half_l);
    let density = |u: f64| norm * u.powi(l as i32 - 1) * (-u * u / 2.0).exp();
    let upper = w.sqrt();
    let panels = 64;
    let width = upper / panels as f64;
    let mut cdf = 0.0;
    for p in 0..panels {
        let (a, b) = (p as f64 * width, (p + 1) as f64 * width);
        let (mid, half_width) = ((a + b) / 2.0, (b - a) / 2.0);
        cdf += rule.iter().map(|&(x, wt)| wt * density(mid + half_width * x)).sum::<f64>() * half_width;
    }
    1.0 - cdf
}

fn c10() -> Outcome {
    let pi_sqrt = std::f64::consts::PI.sqrt();
    // Γ(l/2) for l = 1, 2, 5, 10
    let cases = [(1, pi_sqrt), (2, 1.0), (5, 0.75 * pi_sqrt), (10, 24.0)];
    let rule = gauss_legendre(20);
    let mut worst = 0.0f64;
    for (l, g) in cases {
        for i in 0..50 {
            let w = 50.0 * i as f64 / 49.0;
            worst = worst.max((chi2_survival(w, l) - survival_by_quadrature(w, l, g, &rule)).abs());
        }
    }
    let worst_df2 = (0..50)
        .map(|i| {
            let w = 50.0 * i as f64 / 49.0;
            (chi2_survival(w, 2) - (-w / 2.0).exp()).abs()
        })
        .fold(0.0, f64::max);
    outcome(
        worst < 1e-10 && worst_df2 < 1e-12,
        format!("max error vs quadrature {worst:.2e}, df=2 vs exp(−w/2) {worst_df2:.2e}"),
    )
}

fn c11() -> Outcome {
    let config = StudyConfig {
        n_list: vec![400],
        mc_reps: 24,
        bootstrap_b: 60,
        seed: SEED,
        ..StudyConfig::paper(OutcomeFamily::Normal)
    };
    let json = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_study(&config, Path::new(".")).unwrap().to_json().unwrap())
    };
    let one = json(1);
    let same = [4, 8].iter().all(|&t| json(t) == one);
    outcome(same, format!("study JSON ({} bytes) identical on 1, 4 and 8 threads", one.len()))
}

fn c12() -> Outcome {
    let truth = MedicalTruth::default();
    let data = generate_medical(&truth, 1070, derive_seed(SEED, &[12, 0])).unwrap();
    let report = run_medical(
        &data,
        &MedicalOptions {
            seed: derive_seed(SEED, &[12, 1]),
            ..MedicalOptions::default()
        },
    )
    .unwrap();
    let z: Vec<f64> = report
        .blip_effects
        .iter()
        .zip(truth.gamma())
        .map(|(r, g)| (r.estimate - g) / r.se)
        .collect();
    let recovered = z.iter().all(|v| v.abs() < 3.0);
    let identity = report.gamma()[1] == report.theta()[1] && report.gamma()[2] == report.theta()[2];
    let boot = 200;
    let summary = calibrate(
        &MedicalTruth::null(),
        1070,
        500,
        &MedicalOptions {
            boot,
            ..MedicalOptions::default()
        },
        derive_seed(SEED, &[12, 2]),
    )
    .unwrap();
    let rate = summary.joint_rate();
    let ind = summary.individual_rates();
    outcome(
        recovered && identity && (0.03..=0.07).contains(&rate),
        format!(
            "n=1070 planted z = ({:.2}, {:.2}, {:.2}), last-period identity {identity}; null joint rejection {rate:.3} over {} datasets (B={boot}, individual {:.3}/{:.3}/{:.3})",
            z[0],
            z[1],
            z[2],
            summary.datasets - summary.failed,
            ind[0],
            ind[1],
            ind[2]
        ),
    )
}

fn main() -> ExitCode {
    let smoke = std::env::var("BLIPTEST_ACCEPTANCE").is_ok_and(|v| v == "smoke");
    let sizes = if smoke {
        Sizes {
            reps: 200,
            boot: 200,
            smoke,
        }
    } else {
        Sizes {
            reps: 1000,
            boot: 500,
            smoke,
        }
    };
    let mut results = Vec::new();
    let mut report = |id: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "C{id:<2} {status}  {name}: {} [{:.1} s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        results.push(o.pass);
    };
    report(1, "decomposition identity", &mut c1);
    report(2, "dual-route point effects", &mut c2);
    report(3, "grand means", &mut c3);
    let normal = study(&[OutcomeFamily::Normal], &[1000, 3000], sizes, derive_seed(SEED, &[4]));
    report(4, "type I error", &mut || c4(&normal, sizes));
    report(5, "power monotonicity", &mut || c5(&normal));
    let others = study(
        &[OutcomeFamily::Bernoulli, OutcomeFamily::Poisson],
        &[1000],
        sizes,
        derive_seed(SEED, &[6]),
    );
    report(6, "negligible bias", &mut || c6(&[&normal, &others]));
    report(7, "constrained variance reduction", &mut || c7(&normal));
    report(8, "cross-time decorrelation", &mut c8);
    report(9, "chi-square distribution of Wald statistics", &mut c9);
    report(10, "chi-square survival function", &mut c10);
    report(11, "thread-count determinism", &mut c11);
    report(12, "two-period workflow", &mut c12);
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    // failures are reported above; they fail the run only in strict mode
    let strict = std::env::var("BLIPTEST_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
