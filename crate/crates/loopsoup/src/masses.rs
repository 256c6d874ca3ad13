//! Lattice heat kernels and loop-measure masses for the two random-walk
//! variants.
//!
//! The continuous-time walk on Z^d (rate-1 holding, uniform neighbor jumps)
//! decomposes into d independent one-dimensional walks run at rate 1/d, so
//! its return probability is a d-th power of a scaled Bessel value:
//! p_t(0,0) = (e^{-t/d} I_0(t/d))^d. The mass density is q_d(t) = p_t(0,0)/t
//! and the per-cell masses are Q_d(n) = int_{2n}^{2n+2} q_d. The discrete-time
//! masses are q~_d(n) = (2n)^{-1} P(S_{2n} = 0).

use crate::error::{Error, Result};
use crate::quad;
use crate::special::{
    bessel_i0_scaled, central_binomial_ratio, ln_binomial, ln_central_binomial_ratio,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Which random-walk loop family a quantity belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Discrete,
    Continuous,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Discrete => "discrete",
            Variant::Continuous => "continuous",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Variant::Discrete),
            "continuous" => Ok(Variant::Continuous),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected \"discrete\" or \"continuous\""
            ))),
        }
    }
}

/// Return probability p_t(0,0) of the rate-1 continuous-time walk on Z^d.
///
/// Evaluated through the exponentially scaled Bessel function, so it neither
/// overflows nor underflows for t up to 1e6 and beyond; absolute error is
/// far below 1e-12.
pub fn heat_kernel_return(d: u32, t: f64) -> Result<f64> {
    check_dim(d)?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!(
            "time must be finite and >= 0, got {t}"
        )));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let s = t / d as f64;
    Ok((d as f64 * bessel_i0_scaled(s).ln()).exp())
}

/// Mass density of continuous-time loops: q_d(t) = p_t(0,0) / t.
pub fn q_continuous(d: u32, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("time must be > 0, got {t}")));
    }
    Ok(heat_kernel_return(d, t)? / t)
}

/// Per-cell mass Q_d(n) = int_{2n}^{2n+2} q_d(t) dt by adaptive quadrature.
/// Returns the value and the recorded error bound (absolute, <= 1e-12 target).
pub fn q_cell_continuous(d: u32, n: u64) -> Result<(f64, f64)> {
    check_dim(d)?;
    if n < 1 {
        return Err(Error::Domain("cell index must be >= 1".into()));
    }
    let a = 2.0 * n as f64;
    let f = |t: f64| q_continuous(d, t).expect("positive time");
    let (val, err) = quad::adaptive(a, a + 2.0, 1e-12, &f);
    Ok((val, err))
}

/// Discrete-walk loop mass q~_d(n) = (2n)^{-1} P(S_{2n} = 0).
pub fn q_discrete(d: u32, n: u64) -> Result<f64> {
    check_dim(d)?;
    if n < 1 {
        return Err(Error::Domain("cell index must be >= 1".into()));
    }
    Ok(return_prob_discrete(d, 2 * n)? / (2 * n) as f64)
}

/// Exact rational value of q~_d(n) as (numerator, denominator), available for
/// small n where u128 arithmetic suffices. Used as a test oracle.
pub fn q_discrete_rational(d: u32, n: u64) -> Option<(u128, u128)> {
    let limit = match d {
        1 => 45,
        2 => 30,
        3 => 15,
        _ => return None,
    };
    if n == 0 || n > limit {
        return None;
    }
    let binom = |n: u64, k: u64| -> u128 {
        let mut acc: u128 = 1;
        for i in 0..k {
            acc = acc * (n - i) as u128 / (i + 1) as u128;
        }
        acc
    };
    // paths = number of closed 2n-step paths; q~ = paths / (2n * (2d)^{2n}).
    let paths: u128 = match d {
        1 => binom(2 * n, n),
        2 => {
            let c = binom(2 * n, n);
            c * c
        }
        3 => {
            // (2n)! / (i! j! k!)^2 summed over i+j+k = n, via multinomials.
            let mut total: u128 = 0;
            for i in 0..=n {
                for j in 0..=(n - i) {
                    let k = n - i - j;
                    // C(2n, 2i) C(2n-2i, 2j) * C(2i,i) C(2j,j) C(2k,k)
                    let t = binom(2 * n, 2 * i)
                        * binom(2 * n - 2 * i, 2 * j)
                        * binom(2 * i, i)
                        * binom(2 * j, j)
                        * binom(2 * k, k);
                    total += t;
                }
            }
            total
        }
        _ => unreachable!(),
    };
    let den = (2 * n) as u128 * (2 * d as u128).pow(2 * n as u32);
    Some((paths, den))
}

/// Return probability of the discrete-time simple random walk after the given
/// number of steps. Odd step counts return 0 (the walk has period 2).
///
/// d = 1, 2 use the central-binomial closed forms; d = 3 sums the coordinate
/// partition terms over a window around the mode; d >= 4 falls back to a
/// log-space convolution over coordinate weights.
pub fn return_prob_discrete(d: u32, steps: u64) -> Result<f64> {
    check_dim(d)?;
    if steps % 2 == 1 {
        return Ok(0.0);
    }
    if steps == 0 {
        return Ok(1.0);
    }
    let n = steps / 2;
    Ok(match d {
        1 => central_binomial_ratio(n),
        2 => {
            let r = central_binomial_ratio(n);
            r * r
        }
        3 => {
            let ln_p = ln_central_binomial_ratio(n) - 2.0 * n as f64 * 3.0f64.ln() + ln_w3(n);
            ln_p.exp()
        }
        _ => {
            let ln_w = ln_w_general(d as usize, n);
            (ln_central_binomial_ratio(n) - 2.0 * n as f64 * (d as f64).ln() + ln_w[n as usize])
                .exp()
        }
    })
}

/// ln of w_3(n) = sum_j C(n,j)^2 C(2(n-j), n-j), summed outward from the mode
/// (j near n/3) until terms fall below e^{-70} of the peak.
fn ln_w3(n: u64) -> f64 {
    let term = |j: u64| -> f64 { 2.0 * ln_binomial(n, j) + ln_binomial(2 * (n - j), n - j) };
    let mut jm = ((n as f64) / 3.0).round() as u64;
    jm = jm.min(n);
    // Local ascent to the true mode.
    loop {
        let cur = term(jm);
        let up = if jm < n {
            term(jm + 1)
        } else {
            f64::NEG_INFINITY
        };
        let down = if jm > 0 {
            term(jm - 1)
        } else {
            f64::NEG_INFINITY
        };
        if up > cur {
            jm += 1;
        } else if down > cur {
            jm -= 1;
        } else {
            break;
        }
    }
    let peak = term(jm);
    let mut sum = 1.0;
    let mut j = jm;
    while j > 0 {
        j -= 1;
        let t = (term(j) - peak).exp();
        sum += t;
        if t < 1e-31 {
            break;
        }
    }
    let mut j = jm;
    while j < n {
        j += 1;
        let t = (term(j) - peak).exp();
        sum += t;
        if t < 1e-31 {
            break;
        }
    }
    peak + sum.ln()
}

/// Log-space DP for w_d(r) = sum_j C(r,j)^2 w_{d-1}(r-j), w_1 = 1.
fn ln_w_general(d: usize, n: u64) -> Vec<f64> {
    let n = n as usize;
    let mut prev = vec![0.0f64; n + 1]; // ln w_1 = 0
    for _ in 2..=d {
        let cur: Vec<f64> = (0..=n)
            .map(|r| {
                let mut max = f64::NEG_INFINITY;
                let terms: Vec<f64> = (0..=r)
                    .map(|j| {
                        let t = 2.0 * ln_binomial(r as u64, j as u64) + prev[r - j];
                        if t > max {
                            max = t;
                        }
                        t
                    })
                    .collect();
                max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
            })
            .collect();
        prev = cur;
    }
    prev
}

/// Leading-order mass asymptotics and the first correction, per variant.
///
/// Discrete: q~_d(n) = A n^{-d/2-1} (1 - d/(8n) + O(n^{-2})), A = (d/4pi)^{d/2}.
/// Continuous (density at t): q_d(t) = B t^{-d/2-1} (1 + d^2/(8t) + O(t^{-2})),
/// B = (d/2)^{d/2} pi^{-d/2}.
pub fn asymptotic_residual(d: u32, variant: Variant, n_range: &[u64]) -> Result<Vec<(u64, f64)>> {
    check_dim(d)?;
    if n_range.is_empty() {
        return Err(Error::Domain("empty range".into()));
    }
    let df = d as f64;
    let mut out = Vec::with_capacity(n_range.len());
    for &n in n_range {
        if n < 1 {
            return Err(Error::Domain("cell index must be >= 1".into()));
        }
        let residual = match variant {
            Variant::Discrete => {
                let mass = q_discrete(d, n)?;
                let lead = (df / (4.0 * PI)).powf(df / 2.0) * (n as f64).powf(-df / 2.0 - 1.0);
                mass / lead - (1.0 - df / (8.0 * n as f64))
            }
            Variant::Continuous => {
                let t = 2.0 * n as f64 + 1.0;
                let mass = q_continuous(d, t)?;
                let lead = (df / 2.0).powf(df / 2.0) * PI.powf(-df / 2.0) * t.powf(-df / 2.0 - 1.0);
                mass / lead - (1.0 + df * df / (8.0 * t))
            }
        };
        out.push((n, residual));
    }
    Ok(out)
}

/// Tabulated per-cell masses with per-entry error bounds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MassTable {
    pub d: u32,
    pub variant: Variant,
    pub n_max: u64,
    /// `entries[k]` = mass(k + 1).
    pub entries: Vec<f64>,
    pub abs_err: Vec<f64>,
}

impl MassTable {
    /// Build masses for n = 1..=n_max. Parallelizes over n with deterministic
    /// output.
    pub fn build(d: u32, variant: Variant, n_max: u64) -> Result<MassTable> {
        check_dim(d)?;
        if n_max < 1 {
            return Err(Error::Domain("n_max must be >= 1".into()));
        }
        let (entries, abs_err) = match variant {
            Variant::Continuous => {
                let pairs: Vec<(f64, f64)> = (1..=n_max)
                    .into_par_iter()
                    .map(|n| q_cell_continuous(d, n).expect("valid cell"))
                    .collect();
                pairs.into_iter().unzip()
            }
            Variant::Discrete => match d {
                1 | 2 => {
                    // Incremental central-binomial ratio; O(1) per entry.
                    let mut entries = Vec::with_capacity(n_max as usize);
                    let mut errs = Vec::with_capacity(n_max as usize);
                    let mut r1 = 1.0f64;
                    for n in 1..=n_max {
                        r1 *= (2 * n - 1) as f64 / (2 * n) as f64;
                        let p = if d == 1 { r1 } else { r1 * r1 };
                        let mass = p / (2 * n) as f64;
                        entries.push(mass);
                        errs.push(mass * 1e-13);
                    }
                    (entries, errs)
                }
                _ => {
                    let pairs: Vec<(f64, f64)> = (1..=n_max)
                        .into_par_iter()
                        .map(|n| {
                            let mass = q_discrete(d, n).expect("valid cell");
                            (mass, mass * 1e-10)
                        })
                        .collect();
                    pairs.into_iter().unzip()
                }
            },
        };
        Ok(MassTable {
            d,
            variant,
            n_max,
            entries,
            abs_err,
        })
    }

    pub fn mass(&self, n: u64) -> f64 {
        self.entries[(n - 1) as usize]
    }

    /// Total tabulated mass sum_{n=1}^{n_max}.
    pub fn total(&self) -> f64 {
        self.entries.iter().sum()
    }
}

/// Total mass of all cells n >= from_n, i.e. sum_{k >= from_n} mass(k),
/// with a recorded error bound.
///
/// Continuous variant: this telescopes to int_{2 from_n}^inf q_d(t) dt, which
/// is split at T* into adaptive quadrature plus the closed-form integral of
/// the three-term kernel asymptotic. Discrete variant: exact summation up to a
/// cut, then Euler-Maclaurin on the two-term asymptotic with a fitted n^{-2}
/// correction.
pub fn mass_tail_sum(d: u32, variant: Variant, from_n: u64) -> Result<(f64, f64)> {
    check_dim(d)?;
    if from_n < 1 {
        return Err(Error::Domain("cell index must be >= 1".into()));
    }
    let df = d as f64;
    match variant {
        Variant::Continuous => {
            let lo = 2.0 * from_n as f64;
            let t_star = (1.0e4_f64).max(lo + 2.0);
            let f = |t: f64| q_continuous(d, t).expect("positive time");
            let (head, head_err) = if lo < t_star {
                quad::adaptive(lo, t_star, 1e-13, &f)
            } else {
                (0.0, 0.0)
            };
            let kcoef = (df / (2.0 * PI)).powf(df / 2.0);
            let alpha = df * df / 8.0;
            let beta = df.powi(3) * (df + 8.0) / 128.0;
            let tail = kcoef
                * ((2.0 / df) * t_star.powf(-df / 2.0)
                    + alpha * (2.0 / (df + 2.0)) * t_star.powf(-df / 2.0 - 1.0)
                    + beta * (2.0 / (df + 4.0)) * t_star.powf(-df / 2.0 - 2.0));
            // Crude bound on the dropped t^{-3} coefficient of the kernel.
            let gamma = df.powi(3) * (75.0 * df + 9.0 * df * (df - 1.0) + df.powi(3)) / 512.0;
            let tail_err = kcoef * gamma * (2.0 / (df + 6.0)) * t_star.powf(-df / 2.0 - 3.0);
            Ok((head + tail, head_err + tail_err))
        }
        Variant::Discrete => {
            let cut = 20_000u64.max(from_n);
            let mut head = 0.0f64;
            let mut comp = 0.0f64;
            let mut head_err = 0.0f64;
            if d <= 2 {
                let mut lr = ln_central_binomial_ratio(from_n.saturating_sub(1));
                if from_n == 1 {
                    lr = 0.0;
                }
                let mut r1 = lr.exp();
                for k in from_n..cut {
                    r1 *= (2 * k - 1) as f64 / (2 * k) as f64;
                    let p = if d == 1 { r1 } else { r1 * r1 };
                    let mass = p / (2 * k) as f64;
                    kahan_add(&mut head, &mut comp, mass);
                    head_err += mass * 1e-13;
                }
            } else {
                for k in from_n..cut {
                    let mass = q_discrete(d, k)?;
                    kahan_add(&mut head, &mut comp, mass);
                    head_err += mass * 1e-10;
                }
            }
            // Asymptotic closure from `cut`: g(k) = A k^{-d/2-1}(1 - d/8k + c2/k^2).
            let acoef = (df / (4.0 * PI)).powf(df / 2.0);
            let g_exact = q_discrete(d, cut)?;
            let lead = acoef * (cut as f64).powf(-df / 2.0 - 1.0);
            let c2 = (g_exact / lead - 1.0 + df / (8.0 * cut as f64)) * (cut as f64).powi(2);
            let kf = cut as f64;
            let integral = acoef
                * ((2.0 / df) * kf.powf(-df / 2.0)
                    - (df / 8.0) * (2.0 / (df + 2.0)) * kf.powf(-df / 2.0 - 1.0)
                    + c2 * (2.0 / (df + 4.0)) * kf.powf(-df / 2.0 - 2.0));
            let g = |k: f64| -> f64 {
                acoef * k.powf(-df / 2.0 - 1.0) * (1.0 - df / (8.0 * k) + c2 / (k * k))
            };
            let gprime = -(df / 2.0 + 1.0) * acoef * kf.powf(-df / 2.0 - 2.0);
            let tail = integral + 0.5 * g(kf) - gprime / 12.0;
            // Fitted-correction residual is O(k^{-3}) relative to g.
            let tail_err = tail * 30.0 * (1.0 + c2.abs()) / kf.powi(3) + g(kf) * 1e-10;
            Ok((head + tail, head_err + tail_err))
        }
    }
}

#[inline]
fn kahan_add(acc: &mut f64, comp: &mut f64, x: f64) {
    let y = x - *comp;
    let s = *acc + y;
    *comp = (s - *acc) - y;
    *acc = s;
}

fn check_dim(d: u32) -> Result<()> {
    if d < 1 {
        return Err(Error::Domain("dimension must be >= 1".into()));
    }
    if d > 8 {
        return Err(Error::Domain("dimension capped at 8".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Brute-force closed-walk count by stepping through all (2d)^steps paths,
    /// feasible for tiny sizes; independent of every formula above.
    fn count_closed_walks(d: usize, steps: usize) -> u64 {
        fn rec(d: usize, left: usize, pos: &mut [i64]) -> u64 {
            if left == 0 {
                return if pos.iter().all(|&c| c == 0) { 1 } else { 0 };
            }
            let mut total = 0;
            for axis in 0..d {
                for sign in [-1i64, 1] {
                    pos[axis] += sign;
                    total += rec(d, left - 1, pos);
                    pos[axis] -= sign;
                }
            }
            total
        }
        let mut pos = vec![0i64; d];
        rec(d, steps, &mut pos)
    }

    #[test]
    fn small_return_probabilities_exact() {
        // d=3, 2 steps: 6 of 36.
        assert_relative_eq!(
            return_prob_discrete(3, 2).unwrap(),
            1.0 / 6.0,
            max_relative = 1e-14
        );
        // d=2 rotation identity at a few small sizes.
        for n in 1..=30u64 {
            let lhs = return_prob_discrete(2, 2 * n).unwrap();
            let r = central_binomial_ratio(n);
            assert_relative_eq!(lhs, r * r, max_relative = 1e-13);
        }
        // Exhaustive counts up to 8 steps.
        for d in 1..=3u32 {
            for steps in [2u64, 4, 6] {
                let exact = count_closed_walks(d as usize, steps as usize) as f64
                    / (2.0 * d as f64).powi(steps as i32);
                assert_relative_eq!(
                    return_prob_discrete(d, steps).unwrap(),
                    exact,
                    max_relative = 1e-12
                );
            }
        }
        assert_eq!(return_prob_discrete(3, 3).unwrap(), 0.0);
        assert_eq!(return_prob_discrete(3, 0).unwrap(), 1.0);
    }

    #[test]
    fn loop_mass_small_values() {
        assert_relative_eq!(q_discrete(2, 1).unwrap(), 0.125, max_relative = 1e-14);
        assert_relative_eq!(q_discrete(1, 1).unwrap(), 0.25, max_relative = 1e-14);
        assert_relative_eq!(q_discrete(3, 1).unwrap(), 1.0 / 12.0, max_relative = 1e-13);
    }

    /// Return probability by dynamic programming over the position
    /// distribution in a box, independent of every closed form.
    fn return_prob_dp(d: usize, steps: usize) -> f64 {
        let span = steps as i64;
        let width = (2 * span + 1) as usize;
        let total: usize = width.pow(d as u32);
        let index = |pos: &[i64]| -> usize {
            pos.iter()
                .fold(0usize, |acc, &c| acc * width + (c + span) as usize)
        };
        let mut dist = vec![0.0f64; total];
        dist[index(&vec![0; d])] = 1.0;
        for _ in 0..steps {
            let mut next = vec![0.0f64; total];
            let mut pos = vec![-span; d];
            'outer: loop {
                let p = dist[index(&pos)];
                if p > 0.0 {
                    let w = p / (2 * d) as f64;
                    for axis in 0..d {
                        for sgn in [-1i64, 1] {
                            pos[axis] += sgn;
                            if pos[axis].abs() <= span {
                                next[index(&pos)] += w;
                            }
                            pos[axis] -= sgn;
                        }
                    }
                }
                let mut axis = 0;
                loop {
                    pos[axis] += 1;
                    if pos[axis] <= span {
                        break;
                    }
                    pos[axis] = -span;
                    axis += 1;
                    if axis == d {
                        break 'outer;
                    }
                }
            }
            dist = next;
        }
        dist[index(&vec![0; d])]
    }

    #[test]
    fn q_discrete_matches_dp_enumeration_to_n30() {
        for d in 1..=3u32 {
            for n in [5u64, 17, 30] {
                let dp = return_prob_dp(d as usize, 2 * n as usize) / (2 * n) as f64;
                let got = q_discrete(d, n).unwrap();
                assert_relative_eq!(got, dp, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn rational_oracle_agrees() {
        for d in 1..=3u32 {
            for n in 1..=10u64 {
                let (num, den) = q_discrete_rational(d, n).unwrap();
                let exact = num as f64 / den as f64;
                assert_relative_eq!(q_discrete(d, n).unwrap(), exact, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn d4_general_path_matches_enumeration() {
        let exact = count_closed_walks(4, 4) as f64 / 8.0f64.powi(4);
        assert_relative_eq!(
            return_prob_discrete(4, 4).unwrap(),
            exact,
            max_relative = 1e-11
        );
    }

    #[test]
    fn heat_kernel_basic_values() {
        assert_eq!(heat_kernel_return(2, 0.0).unwrap(), 1.0);
        assert!(heat_kernel_return(2, -1.0).is_err());
        // Monotone decreasing on a grid, always in (0, 1].
        for d in 1..=3u32 {
            let mut prev = 1.0;
            for i in 0..200 {
                let t = 0.05 * i as f64;
                let p = heat_kernel_return(d, t).unwrap();
                assert!(p > 0.0 && p <= 1.0);
                assert!(p <= prev + 1e-15, "not decreasing at d={d} t={t}");
                prev = p;
            }
        }
    }

    #[test]
    fn heat_kernel_leading_asymptotics() {
        // p_t ~ (d / 2 pi t)^{d/2} at large t.
        for d in 1..=3u32 {
            let t = 1e4;
            let p = heat_kernel_return(d, t).unwrap();
            let lead = (d as f64 / (2.0 * PI * t)).powf(d as f64 / 2.0);
            assert_relative_eq!(p, lead, max_relative = 1e-3);
        }
    }

    #[test]
    fn q_cell_two_rules_agree() {
        for d in 1..=3u32 {
            for n in [1u64, 2, 7, 100] {
                let (val, err) = q_cell_continuous(d, n).unwrap();
                let oracle = quad::fixed_panel_32(2.0 * n as f64, 2.0 * n as f64 + 2.0, |t| {
                    q_continuous(d, t).unwrap()
                });
                assert!(err < 1e-10);
                assert_relative_eq!(val, oracle, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn cell_masses_telescope_to_tail_integral() {
        // sum_{n=1..N} Q_d(n) + tail = int_2^inf q_d.
        let d = 2;
        let mut partial = 0.0;
        for n in 1..=50u64 {
            partial += q_cell_continuous(d, n).unwrap().0;
        }
        let (tail, _) = mass_tail_sum(d, Variant::Continuous, 51).unwrap();
        let (total, _) = mass_tail_sum(d, Variant::Continuous, 1).unwrap();
        assert_relative_eq!(partial + tail, total, max_relative = 1e-11);
    }

    #[test]
    fn discrete_tail_extends_exact_sums() {
        for d in 1..=3u32 {
            let (a, _) = mass_tail_sum(d, Variant::Discrete, 1).unwrap();
            let mut head = 0.0;
            for k in 1..300u64 {
                head += q_discrete(d, k).unwrap();
            }
            let (b, err) = mass_tail_sum(d, Variant::Discrete, 300).unwrap();
            assert_relative_eq!(a, head + b, max_relative = 1e-12);
            assert!(err < 1e-12, "recorded bound too large: {err}");
        }
    }

    #[test]
    fn discrete_total_mass_d1_is_log2() {
        // sum_n (2n)^{-1} 4^{-n} C(2n,n) = log 2.
        let (total, err) = mass_tail_sum(1, Variant::Discrete, 1).unwrap();
        assert!(err < 1e-11);
        assert_relative_eq!(total, std::f64::consts::LN_2, max_relative = 1e-11);
    }

    #[test]
    fn mass_table_matches_pointwise() {
        for variant in [Variant::Discrete, Variant::Continuous] {
            for d in 1..=3u32 {
                let table = MassTable::build(d, variant, 40).unwrap();
                assert_eq!(table.entries.len(), 40);
                for n in [1u64, 3, 17, 40] {
                    let direct = match variant {
                        Variant::Discrete => q_discrete(d, n).unwrap(),
                        Variant::Continuous => q_cell_continuous(d, n).unwrap().0,
                    };
                    assert_relative_eq!(table.mass(n), direct, max_relative = 1e-11);
                    assert!(table.mass(n) > 0.0);
                }
                // Strictly decreasing.
                for w in table.entries.windows(2) {
                    assert!(w[1] < w[0]);
                }
            }
        }
    }

    #[test]
    fn paper_expansion_d2_discrete() {
        // q~_2(n) = 1/(2 pi n^2) - 1/(8 pi n^3) + O(n^{-4}).
        let n = 100u64;
        let nf = n as f64;
        let expansion = 1.0 / (2.0 * PI * nf * nf) - 1.0 / (8.0 * PI * nf * nf * nf);
        let mass = q_discrete(2, n).unwrap();
        assert!((mass - expansion).abs() < 5.0 / nf.powi(4));
    }

    #[test]
    fn q_continuous_limit_on_grid() {
        // q_d(t) t^{d/2+1} -> (d/2)^{d/2} pi^{-d/2}, with the residual
        // decaying monotonically over a logarithmic grid in [1e2, 1e5].
        for d in 1..=3u32 {
            let df = d as f64;
            let limit = (df / 2.0).powf(df / 2.0) * PI.powf(-df / 2.0);
            let mut prev = f64::INFINITY;
            for i in 0..=12 {
                let t = 100.0 * 10f64.powf(i as f64 / 4.0);
                let v = q_continuous(d, t).unwrap() * t.powf(df / 2.0 + 1.0);
                let resid = (v / limit - 1.0).abs();
                assert!(
                    resid < prev * 1.0001,
                    "residual not decaying at d={d} t={t}"
                );
                prev = resid;
            }
            // The first correction is d^2/(8t), about 1.1e-5 for d = 3 at
            // t = 1e5.
            assert!(prev < 1.3 * df * df / (8.0 * 1e5));
        }
    }

    #[test]
    fn residuals_shrink_at_rate() {
        // Discrete residual (after the 1 - d/8n correction) is O(n^{-2}).
        for d in 1..=3u32 {
            let res = asymptotic_residual(d, Variant::Discrete, &[50, 100, 200, 400]).unwrap();
            for &(n, r) in &res {
                assert!(
                    r.abs() * (n as f64).powi(2) < 2.0,
                    "d={d} n={n} scaled residual {}",
                    r.abs() * (n as f64).powi(2)
                );
            }
        }
        // Continuous residual is O(t^{-2}); d=1 case doubles as the
        // q_1(t) t^{3/2} sqrt(pi) / sqrt(1/2) -> 1 example.
        let res = asymptotic_residual(1, Variant::Continuous, &[100, 400]).unwrap();
        for &(n, r) in &res {
            let t = 2.0 * n as f64 + 1.0;
            assert!(r.abs() * t * t < 2.0, "t={t} r={r}");
        }
        let t = 801.0;
        let q = q_continuous(1, t).unwrap();
        let normalized = q * t.powf(1.5) * PI.sqrt() / 0.5f64.sqrt();
        assert_relative_eq!(normalized, 1.0, max_relative = 1e-2);
    }
}
