//! Statistical test harness used by the verification suites: chi-square and
//! Kolmogorov-Smirnov goodness of fit, two-sample location test, quantiles,
//! and least-squares fits.

use crate::special::{gamma_q, normal_cdf};

/// Chi-square statistic and p-value for observed counts against expected
/// (Poisson or multinomial cell) means.
pub fn chi_square_pvalue(observed: &[f64], expected: &[f64]) -> (f64, f64) {
    assert_eq!(observed.len(), expected.len());
    assert!(!observed.is_empty());
    let mut stat = 0.0;
    let mut dof = 0usize;
    for (&o, &e) in observed.iter().zip(expected) {
        assert!(e > 0.0, "expected cell mass must be positive");
        stat += (o - e) * (o - e) / e;
        dof += 1;
    }
    let p = gamma_q(dof as f64 / 2.0, stat / 2.0);
    (stat, p)
}

/// One-sample Kolmogorov-Smirnov test against a reference CDF.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> (f64, f64) {
    assert!(!samples.is_empty());
    samples.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let c = cdf(x);
        let hi = (i as f64 + 1.0) / n - c;
        let lo = c - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    let p = ks_pvalue(d, n);
    (d, p)
}

/// Asymptotic KS p-value with the finite-sample argument correction.
pub fn ks_pvalue(d: f64, n: f64) -> f64 {
    let sqrt_n = n.sqrt();
    let z = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    kolmogorov_complement(z)
}

/// Q(z) = P(K > z) for the Kolmogorov distribution.
fn kolmogorov_complement(z: f64) -> f64 {
    if z <= 0.0 {
        return 1.0;
    }
    if z < 1.18 {
        let factor = (2.0 * std::f64::consts::PI).sqrt() / z;
        let t = (-std::f64::consts::PI * std::f64::consts::PI / (8.0 * z * z)).exp();
        1.0 - factor * (t + t.powi(9) + t.powi(25) + t.powi(49))
    } else {
        let t = (-2.0 * z * z).exp();
        2.0 * (t - t.powi(4) + t.powi(9))
    }
}

/// Welch's two-sample z/t test p-value (two sided); suitable for the sample
/// sizes used here, where the t distribution is indistinguishable from normal.
pub fn welch_pvalue(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, vx) = mean_var(xs);
    let (my, vy) = mean_var(ys);
    let se = (vx / xs.len() as f64 + vy / ys.len() as f64).sqrt();
    if se == 0.0 {
        return if mx == my { 1.0 } else { 0.0 };
    }
    let z = (mx - my) / se;
    2.0 * (1.0 - normal_cdf(z.abs()))
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty());
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Quantile of an unsorted sample by linear interpolation of order statistics.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty());
    assert!((0.0..=1.0).contains(&q));
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    quantile_sorted(&s, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Ordinary least squares y = intercept + slope * x.
/// Returns (slope, intercept, slope standard error).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    assert!(sxx > 0.0, "degenerate abscissa");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut rss = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let r = y - intercept - slope * x;
        rss += r * r;
    }
    let se = if xs.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, intercept, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{purpose, RandomStream, RootSeed, StreamKey};
    use approx::assert_relative_eq;

    #[test]
    fn chi_square_detects_and_accepts() {
        // Counts exactly equal to expectation: stat 0, p = 1.
        let (stat, p) = chi_square_pvalue(&[10.0, 20.0, 30.0], &[10.0, 20.0, 30.0]);
        assert_eq!(stat, 0.0);
        assert_relative_eq!(p, 1.0, max_relative = 1e-12);
        // Grossly wrong counts: p near 0.
        let (_, p) = chi_square_pvalue(&[100.0, 0.0, 0.0], &[10.0, 45.0, 45.0]);
        assert!(p < 1e-10);
    }

    #[test]
    fn ks_uniform_samples_pass() {
        let root = RootSeed::from_u64(11);
        let mut s = RandomStream::derive(&root, &StreamKey::simple(purpose::FIELD, 99));
        let mut xs: Vec<f64> = (0..5000).map(|_| s.uniform()).collect();
        let (_, p) = ks_test(&mut xs, |x| x.clamp(0.0, 1.0));
        assert!(p > 0.01, "p = {p}");
        // Biased samples fail.
        let mut ys: Vec<f64> = xs.iter().map(|x| x.powf(1.3)).collect();
        let (_, p) = ks_test(&mut ys, |x| x.clamp(0.0, 1.0));
        assert!(p < 1e-6, "p = {p}");
    }

    #[test]
    fn linear_fit_recovers_line() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 2.0).collect();
        let (slope, intercept, se) = linear_fit(&xs, &ys);
        assert_relative_eq!(slope, 3.0, max_relative = 1e-12);
        assert_relative_eq!(intercept, -2.0, max_relative = 1e-10);
        assert!(se < 1e-12);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_relative_eq!(quantile(&xs, 0.0), 1.0);
        assert_relative_eq!(quantile(&xs, 1.0), 4.0);
        assert_relative_eq!(quantile(&xs, 0.5), 2.5);
    }

    #[test]
    fn welch_same_distribution_high_p() {
        let root = RootSeed::from_u64(5);
        let mut s = RandomStream::derive(&root, &StreamKey::simple(purpose::FIELD, 3));
        let xs: Vec<f64> = (0..800).map(|_| s.gaussian()).collect();
        let ys: Vec<f64> = (0..900).map(|_| s.gaussian()).collect();
        assert!(welch_pvalue(&xs, &ys) > 0.01);
        let zs: Vec<f64> = ys.iter().map(|y| y + 1.0).collect();
        assert!(welch_pvalue(&xs, &zs) < 1e-8);
    }
}
