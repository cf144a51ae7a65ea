//! End-to-end behavior of the stratified pipeline on simulated and hand-built data.

use bliptest::blip_model::{BasisFunction, SnmmSpec};
use bliptest::estimator::{restricted_gls, wald_with_covariance, Hypothesis};
use bliptest::linalg::Matrix;
use bliptest::oracle_dgp::{Dgp, DgpSpec};
use bliptest::pipeline::{fit, fit_with_bootstrap, PipelineOptions};
use bliptest::point_effects::{estimate_all_point_effects, EstimabilityPolicy, VarianceMode};
use bliptest::seqdata::{parse_dataset, OutcomeFamily, Stratum};
use bliptest::study::battery;
use bliptest::Error;

fn normal_data(n: usize, seed: u64) -> (DgpSpec, bliptest::seqdata::SequentialDataset) {
    let spec = DgpSpec::default_normal();
    let data = Dgp::new(spec.clone()).unwrap().generate(n, seed).unwrap();
    (spec, data)
}

#[test]
fn point_effects_converge_to_the_exact_values() {
    for family in [OutcomeFamily::Normal, OutcomeFamily::Bernoulli, OutcomeFamily::Poisson] {
        let dgp = Dgp::new(DgpSpec::default_for(family)).unwrap();
        let data = dgp.generate(40_000, 11).unwrap();
        let est = estimate_all_point_effects::<f64, _>(&data, VarianceMode::Sample, EstimabilityPolicy::Strict).unwrap();
        let exact = dgp.exact_point_effects();
        let se: Vec<f64> = est.covariance().diagonal().iter().map(|v| v.sqrt()).collect();
        for (i, s) in est.strata().iter().enumerate() {
            let j = exact.strata.iter().position(|e| e == s).unwrap();
            let z = (est.theta()[i] - exact.enumerated[j]) / se[i];
            assert!(z.abs() < 4.0, "{family} {s}: z = {z}");
        }
    }
}

#[test]
fn bootstrap_is_independent_of_thread_count() {
    let (spec, data) = normal_data(600, 3);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| fit_with_bootstrap::<f64>(&data, &spec.snmm, PipelineOptions::default(), 100, 42).unwrap())
    };
    let (_, one) = run(1);
    for threads in [4, 8] {
        let (_, many) = run(threads);
        assert_eq!(one, many, "{threads} threads");
    }
}

#[test]
fn single_precision_agrees_with_double() {
    let (spec, data) = normal_data(2000, 5);
    let a = fit::<f64, _>(&data, &spec.snmm, PipelineOptions::default()).unwrap();
    let b = fit::<f32, _>(&data, &spec.snmm, PipelineOptions::default()).unwrap();
    for (x, y) in a.estimate.gamma.iter().zip(&b.estimate.gamma) {
        assert!((x - *y as f64).abs() < 1e-3 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn restricted_estimate_satisfies_the_constraint() {
    let (spec, data) = normal_data(1500, 8);
    let est = fit::<f64, _>(&data, &spec.snmm, PipelineOptions::default()).unwrap().estimate;
    let j = battery(&spec).unwrap().into_iter().find(|e| e.name == "J").unwrap();
    let hyp = j.shifted(0.0).unwrap();
    let r = restricted_gls(&est, &hyp).unwrap();
    let hg = hyp.h().mul_vec(&r.gamma);
    for (a, b) in hg.iter().zip(hyp.rho()) {
        assert!((a - b).abs() < 1e-9);
    }
    let (before, after) = (est.cov_conditional.diagonal(), r.cov_conditional.diagonal());
    let touched: Vec<usize> = (0..est.k()).filter(|&c| (0..hyp.df()).any(|l| hyp.h()[(l, c)] != 0.0)).collect();
    assert!(!touched.is_empty());
    for c in touched {
        assert!(after[c] < before[c], "component {c}");
    }
}

#[test]
fn hypothesis_at_the_estimate_gives_zero_statistic() {
    let (spec, data) = normal_data(800, 9);
    let est = fit::<f64, _>(&data, &spec.snmm, PipelineOptions::default()).unwrap().estimate;
    let k = est.k();
    let h = Matrix::from_fn(2, k, |r, c| if c == r || c == r + 3 { 1.0 } else { 0.0 });
    let rho = h.mul_vec(&est.gamma);
    let w = wald_with_covariance(&est.gamma, &est.cov_conditional, &Hypothesis::new(h, rho).unwrap(), 0.05).unwrap();
    assert!(w.statistic < 1e-18);
    assert!((w.p_value - 1.0).abs() < 1e-12);
    assert!(!w.reject);
}

const EMPTY_CONTROL: &str = "\
id,z1,x2,z2,y
1,0,0,0,1.0
2,1,0,1,2.0
3,0,0,1,1.5
4,1,0,0,0.5
5,0,1,1,3.0
6,1,1,1,2.5
7,0,0,0,1.2
8,1,0,1,2.2
";

#[test]
fn empty_control_cell_names_the_stratum() {
    let data = parse_dataset(EMPTY_CONTROL, OutcomeFamily::Normal).unwrap();
    let snmm = SnmmSpec::per_stratum(data.layout());
    let err = fit::<f64, _>(&data, &snmm, PipelineOptions::default()).unwrap_err();
    assert!(err.is_statistical());
    match err {
        Error::Inestimable { stratum, .. } => assert_eq!(stratum, Stratum::new(2, 1, 1)),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn exclude_policy_drops_the_stratum() {
    let data = parse_dataset(EMPTY_CONTROL, OutcomeFamily::Normal).unwrap();
    let options = PipelineOptions {
        variance_mode: VarianceMode::PooledNormal,
        policy: EstimabilityPolicy::Exclude,
    };
    let est = estimate_all_point_effects::<f64, _>(&data, options.variance_mode, options.policy).unwrap();
    assert_eq!(est.excluded().len(), 1);
    assert_eq!(est.excluded()[0].stratum, Stratum::new(2, 1, 1));
    assert!(!est.strata().contains(&Stratum::new(2, 1, 1)));
    // the per-stratum model now has a column no remaining stratum informs
    let snmm = SnmmSpec::per_stratum(data.layout());
    assert!(matches!(
        fit::<f64, _>(&data, &snmm, options),
        Err(Error::Identifiability { .. })
    ));
}

#[test]
fn collinear_basis_is_not_identified() {
    let (_, data) = normal_data(500, 1);
    let basis = vec![
        BasisFunction::Indicator {
            t: 1,
            x_in: None,
            z_in: vec![1],
            label: Some("a".into()),
        },
        BasisFunction::Linear {
            t_set: vec![1],
            g: [("0".to_string(), 2.0)].into_iter().collect(),
            label: Some("b".into()),
        },
    ];
    let snmm = SnmmSpec::new(basis).unwrap();
    match fit::<f64, _>(&data, &snmm, PipelineOptions::default()) {
        Err(Error::Identifiability { rank, k, dependent_column }) => {
            assert_eq!((rank, k), (1, 2));
            assert_eq!(dependent_column, "b");
        }
        other => panic!("unexpected {other:?}"),
    }
}
