//! Special functions used by the lattice kernels and samplers: exponentially
//! scaled modified Bessel functions, normal CDF and quantile, regularized
//! incomplete gamma, and stable log-combinatorics.

use std::f64::consts::PI;

/// e^{-x} I_0(x) for x >= 0.
///
/// Power series below 15 (all terms positive, no cancellation), asymptotic
/// expansion of the scaled function above, truncated at its smallest term.
pub fn bessel_i0_scaled(x: f64) -> f64 {
    assert!(x >= 0.0, "bessel argument must be nonnegative");
    if x <= 15.0 {
        let q = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-18 * sum {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
        }
        sum * (-x).exp()
    } else {
        // a_k = a_{k-1} * (2k-1)^2 / (8k); divergent series, stop when the
        // terms stop shrinking.
        let mut a = 1.0;
        let mut sum = 1.0;
        let mut prev = f64::INFINITY;
        for k in 1..=30 {
            let kf = k as f64;
            a *= (2.0 * kf - 1.0) * (2.0 * kf - 1.0) / (8.0 * kf);
            let term = a / x.powi(k);
            if term >= prev || term < 1e-18 {
                break;
            }
            sum += term;
            prev = term;
        }
        sum / (2.0 * PI * x).sqrt()
    }
}

/// ln(e^{-x} I_0(x)); finite for all x up to ~1e300.
pub fn ln_bessel_i0_scaled(x: f64) -> f64 {
    bessel_i0_scaled(x).ln()
}

/// The family e^{-x} I_k(x) for k = 0..=k_max, by Miller's backward
/// recurrence with the normalization sum I_0 + 2 * sum_k I_k = e^x.
pub fn bessel_i_scaled_family(x: f64, k_max: usize) -> Vec<f64> {
    assert!(x >= 0.0);
    if x == 0.0 {
        let mut out = vec![0.0; k_max + 1];
        out[0] = 1.0;
        return out;
    }
    // Starting order comfortably above both k_max and the turnover k ~ x.
    let start =
        k_max + 16 + (2.0 * (x + 40.0).sqrt() + 0.6 * x.max(k_max as f64).sqrt() * 4.0) as usize;
    let start = start.max(k_max + 20).max((1.2 * x) as usize + 40);
    let mut high = 0.0_f64;
    let mut cur = 1e-280_f64;
    let mut norm = 0.0_f64;
    let mut out = vec![0.0; k_max + 1];
    for k in (0..=start).rev() {
        // I_{k-1} = I_{k+1} + (2k/x) I_k, run downward.
        let next = high + (2.0 * (k as f64 + 1.0) / x) * cur;
        high = cur;
        cur = next;
        if cur > 1e260 {
            let scale = 1e-260;
            cur *= scale;
            high *= scale;
            norm *= scale;
            for v in out.iter_mut() {
                *v *= scale;
            }
        }
        if k <= k_max {
            out[k] = cur;
        }
        norm += 2.0 * cur;
    }
    // norm currently counts 2*I_0 + 2*I_1 + ...; the identity needs I_0 once.
    norm -= cur;
    for v in out.iter_mut() {
        *v /= norm;
    }
    out
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: rational initial guess polished with one Halley
/// step against `normal_cdf`; accurate to a few ulps across (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must be in (0,1)");
    let x = acklam_quantile(p);
    // Halley refinement.
    let e = normal_cdf(x) - p;
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    let u = e / pdf;
    x - u / (1.0 + 0.5 * x * u)
}

fn acklam_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -acklam_quantile(1.0 - p)
    }
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_cf(a, x)
    }
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let ln_ga = libm::lgamma(a);
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..500 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_ga).exp()
}

fn gamma_cf(a: f64, x: f64) -> f64 {
    let ln_ga = libm::lgamma(a);
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_ga).exp() * h
}

/// ln k!, exact table for small k, Stirling series beyond.
pub fn ln_factorial(k: u64) -> f64 {
    const CUT: u64 = 256;
    thread_local! {
        static SMALL: Vec<f64> = {
            let mut t = vec![0.0; CUT as usize + 1];
            let mut acc = 0.0f64;
            let mut comp = 0.0f64;
            for (k, slot) in t.iter_mut().enumerate().skip(1) {
                // Kahan-compensated running sum of ln k.
                let y = (k as f64).ln() - comp;
                let s = acc + y;
                comp = (s - acc) - y;
                acc = s;
                *slot = acc;
            }
            t
        };
    }
    if k <= CUT {
        SMALL.with(|t| t[k as usize])
    } else {
        stirling_ln_factorial(k as f64)
    }
}

fn stirling_ln_factorial(n: f64) -> f64 {
    let inv = 1.0 / n;
    let inv2 = inv * inv;
    (n + 0.5) * n.ln() - n
        + 0.5 * (2.0 * PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
}

/// ln C(n, k).
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    assert!(k <= n);
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// The central binomial ratio C(2n, n) / 4^n, computed as the stable product
/// of (2j-1)/(2j). Relative error stays near machine precision because the
/// accumulation runs over logarithms of near-unit factors.
pub fn central_binomial_ratio(n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    if n <= 40 {
        let mut p = 1.0;
        for j in 1..=n {
            p *= (2 * j - 1) as f64 / (2 * j) as f64;
        }
        return p;
    }
    ln_central_binomial_ratio(n).exp()
}

/// ln(C(2n, n) / 4^n) by Kahan-compensated summation of ln((2j-1)/(2j)).
pub fn ln_central_binomial_ratio(n: u64) -> f64 {
    if n <= 10_000 {
        let mut acc = 0.0f64;
        let mut comp = 0.0f64;
        for j in 1..=n {
            let term = libm::log1p(-1.0 / (2.0 * j as f64));
            let y = term - comp;
            let s = acc + y;
            comp = (s - acc) - y;
            acc = s;
        }
        acc
    } else {
        // Stirling with correction terms; relative error < 1e-14 here.
        let nf = n as f64;
        -0.5 * (PI * nf).ln()
            + libm::log1p(
                -1.0 / (8.0 * nf) + 1.0 / (128.0 * nf * nf) + 5.0 / (1024.0 * nf * nf * nf),
            )
    }
}

/// Exact inverse-transform Poisson quantile: smallest k with CDF(k) >= u.
///
/// Accumulates pmf terms outward from the mode so the cost is O(sqrt(mean)).
pub fn poisson_inverse(mean: f64, u: f64) -> u64 {
    debug_assert!(mean > 0.0);
    if mean < 30.0 {
        // Plain forward accumulation is exact and fast for small means.
        let mut k = 0u64;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while cdf < u && k < 10_000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        return k;
    }
    // Forward accumulation from a safe left edge (mode - 12 sigma).
    let sigma = mean.sqrt();
    let lo = (mean - 12.0 * sigma).floor().max(0.0) as u64;
    let mut k = lo;
    let lp = -mean + lo as f64 * mean.ln() - ln_factorial(lo);
    let mut p = lp.exp();
    let mut cdf = p;
    // Left tail below `lo` is < 1e-30; fold it in as zero.
    let cap = (mean + 14.0 * sigma) as u64 + 16;
    while cdf < u && k < cap {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}
