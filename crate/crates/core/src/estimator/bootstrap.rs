use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::seqdata::{Resample, SequentialDataset};

/// Sample covariance of bootstrap replicates of a statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutcome<S> {
    pub cov: Matrix<S>,
    pub mean: Vec<S>,
    pub used: usize,
    pub failed: usize,
}

/// Runs `statistic` on `b` subject resamples drawn with replacement.
///
/// Replicate `r` draws from stream `r` of `seed` and results are reduced in
/// replicate order, so the outcome does not depend on the thread count.
/// Failed replicates are dropped; more than 10% failures is an error.
pub fn bootstrap_replicates<S, F>(data: &SequentialDataset, b: usize, seed: u64, statistic: F) -> Result<BootstrapOutcome<S>>
where
    S: Scalar,
    F: Fn(&Resample<'_>) -> Result<Vec<S>> + Sync,
{
    if b < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs B >= 2, got {b}")));
    }
    let results: Vec<Option<Vec<S>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let sample = Resample::draw(data, &mut rng);
            statistic(&sample).ok().filter(|v| v.iter().all(|x| x.is_finite()))
        })
        .collect();
    let ok: Vec<&Vec<S>> = results.iter().flatten().collect();
    let failed = b - ok.len();
    if failed * 10 > b || ok.len() < 2 {
        return Err(Error::Bootstrap { failed, total: b });
    }
    let k = ok[0].len();
    if ok.iter().any(|v| v.len() != k) {
        return Err(Error::InvalidArgument("bootstrap replicates differ in length".into()));
    }
    let count = S::of_usize(ok.len());
    let mut mean = vec![S::zero(); k];
    for v in &ok {
        for (m, &x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut cov = Matrix::zeros(k, k);
    for v in &ok {
        for i in 0..k {
            let di = v[i] - mean[i];
            for j in i..k {
                cov[(i, j)] += di * (v[j] - mean[j]);
            }
        }
    }
    let denom = S::of_usize(ok.len() - 1);
    for i in 0..k {
        for j in i..k {
            let c = cov[(i, j)] / denom;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    Ok(BootstrapOutcome {
        cov,
        mean,
        used: ok.len(),
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::{parse_dataset, Observations, OutcomeFamily};

    #[test]
    fn constant_statistic_gives_zero_covariance() {
        let d = parse_dataset("id,z1,y\n1,1,3.0\n", OutcomeFamily::Normal).unwrap();
        let out = bootstrap_replicates(&d, 2, 7, |s| {
            let w = s.counts().unwrap()[0] as f64;
            Ok(vec![w, 2.0 * w])
        })
        .unwrap();
        assert_eq!(out.cov.max_abs(), 0.0);
        assert_eq!(out.used, 2);
    }

    #[test]
    fn too_many_failures() {
        let d = parse_dataset("id,z1,y\n1,1,3.0\n2,0,1.0\n", OutcomeFamily::Normal).unwrap();
        let res = bootstrap_replicates::<f64, _>(&d, 20, 1, |s| {
            if s.counts().unwrap()[0] == 2 {
                Err(Error::DegenerateTest)
            } else {
                Ok(vec![1.0])
            }
        });
        assert!(matches!(res, Err(Error::Bootstrap { total: 20, .. })));
        assert!(bootstrap_replicates::<f64, _>(&d, 1, 1, |_| Ok(vec![1.0])).is_err());
    }

    #[test]
    fn mean_of_resampled_mean() {
        let mut text = String::from("id,z1,y\n");
        for i in 0..50 {
            text.push_str(&format!("{i},0,{}\n", i as f64));
        }
        let d = parse_dataset(&text, OutcomeFamily::Normal).unwrap();
        let stat = |s: &Resample<'_>| {
            let w = s.counts().unwrap();
            let total: f64 = w.iter().zip(s.dataset().outcomes()).map(|(&c, &y)| c as f64 * y).sum();
            Ok(vec![total / 50.0])
        };
        let out = bootstrap_replicates(&d, 400, 3, stat).unwrap();
        // population variance of 0..49 over n
        let var = (50.0 * 50.0 - 1.0) / 12.0 / 50.0;
        assert!((out.cov[(0, 0)] / var - 1.0).abs() < 0.25, "{}", out.cov[(0, 0)]);
        let again = bootstrap_replicates(&d, 400, 3, stat).unwrap();
        assert_eq!(out, again);
    }
}
