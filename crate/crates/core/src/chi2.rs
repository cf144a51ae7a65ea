//! Central and noncentral chi-square tail probabilities.

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn lower_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..10_000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

fn upper_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - lower_series(a, x)
    } else {
        upper_fraction(a, x)
    }
}

/// `P(χ²_l > w)`.
pub fn chi2_survival(w: f64, l: usize) -> f64 {
    if w <= 0.0 {
        return 1.0;
    }
    if w.is_infinite() {
        return 0.0;
    }
    gamma_q(l as f64 / 2.0, w / 2.0).clamp(0.0, 1.0)
}

/// Upper quantile: the `w` with `P(χ²_l > w) = alpha`.
pub fn chi2_upper_quantile(alpha: f64, l: usize) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    let mut hi = l as f64 + 10.0;
    while chi2_survival(hi, l) > alpha {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_survival(mid, l) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// `P(χ²_{l,λ} > w)` as a Poisson(λ/2) mixture of central tails, truncated
/// once the accumulated mixture mass reaches `1 - 1e-12`.
pub fn noncentral_chi2_survival(w: f64, l: usize, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return chi2_survival(w, l);
    }
    let half = lambda / 2.0;
    let log_pmf = |k: usize| -half + k as f64 * half.ln() - ln_gamma(k as f64 + 1.0);
    let term = |k: usize| {
        let p = log_pmf(k).exp();
        (p, p * chi2_survival(w, l + 2 * k))
    };
    // walk outward from the mode, always taking the heavier neighbour
    let mode = half.floor() as usize;
    let (mut mass, mut total) = term(mode);
    let mut up = mode + 1;
    let mut down = mode.checked_sub(1);
    while mass < 1.0 - 1e-12 {
        let p_up = log_pmf(up).exp();
        let p_down = down.map(|k| log_pmf(k).exp()).unwrap_or(0.0);
        if p_up == 0.0 && p_down == 0.0 {
            break;
        }
        let k = if p_up >= p_down {
            up += 1;
            up - 1
        } else {
            let k = down.expect("positive mass below the mode");
            down = k.checked_sub(1);
            k
        };
        let (p, t) = term(k);
        mass += p;
        total += t;
    }
    total.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn df2_closed_form() {
        for &w in &[0.0, 0.5, 2.0, 7.3, 40.0] {
            assert!((chi2_survival(w, 2) - (-w / 2.0f64).exp()).abs() < 1e-13);
        }
    }

    #[test]
    fn known_quantiles() {
        assert!((chi2_survival(3.841_458_820_694_124, 1) - 0.05).abs() < 1e-12);
        assert!((chi2_upper_quantile(0.05, 1) - 3.841_458_820_694_124).abs() < 1e-9);
        assert!((chi2_upper_quantile(0.05, 8) - 15.507_313_055_865_453).abs() < 1e-9);
    }

    #[test]
    fn ln_gamma_integers() {
        let mut f = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - f.ln()).abs() < 1e-12, "{n}");
            f *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn noncentral_limits() {
        let crit = chi2_upper_quantile(0.05, 3);
        assert!((noncentral_chi2_survival(crit, 3, 0.0) - 0.05).abs() < 1e-12);
        assert!(noncentral_chi2_survival(chi2_upper_quantile(0.05, 1), 1, 100.0) > 0.999);
        // λ = 1, l = 1 at the 5% critical value, reference value 0.1700
        let p = noncentral_chi2_survival(chi2_upper_quantile(0.05, 1), 1, 1.0);
        assert!((p - 0.170_075).abs() < 1e-4, "{p}");
    }

    #[test]
    fn noncentral_mass_below_mode() {
        // large λ exercises both directions of the walk
        let a = noncentral_chi2_survival(900.0, 4, 800.0);
        let b = noncentral_chi2_survival(700.0, 4, 800.0);
        assert!(a > 0.0 && a < 0.5 && b > 0.5 && b < 1.0, "{a} {b}");
    }
}
