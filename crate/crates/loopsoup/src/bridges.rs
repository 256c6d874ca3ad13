//! Exact samplers for the three bridge families: d-dimensional Brownian
//! bridges on a dyadic grid, discrete-time simple-random-walk loops on Z^d,
//! and continuous-time random-walk loops on Z^d.

use crate::error::{Error, Result};
use crate::loops::{dyadic_levels_for, Flavor, Path, RootedLoop};
use crate::rng::RandomStream;
use crate::special::{bessel_i0_scaled, ln_binomial, ln_factorial};

/// Unit-time, unit-variance Brownian bridge values on the dyadic grid with
/// 2^levels + 1 points, d coordinates interleaved, by midpoint bisection.
pub fn unit_brownian_values(d: u32, levels: u32, stream: &mut RandomStream) -> Vec<f64> {
    let d = d as usize;
    let len = (1usize << levels) + 1;
    let mut values = vec![0.0f64; len * d];
    for lvl in 1..=levels {
        let stride = 1usize << (levels - lvl);
        // Midpoint of an interval of length 2^{-(lvl-1)} has conditional
        // variance (interval length)/4.
        let sigma = 0.5 * (1.0 / (1u64 << (lvl - 1)) as f64).sqrt();
        let mut idx = stride;
        while idx < len {
            for i in 0..d {
                let mean = 0.5 * (values[(idx - stride) * d + i] + values[(idx + stride) * d + i]);
                values[idx * d + i] = mean + sigma * stream.gaussian();
            }
            idx += 2 * stride;
        }
    }
    values
}

/// Standard d-dimensional Brownian bridge from 0 to 0 on [0, t_len], sampled
/// at 2^levels + 1 dyadic points. Stored as a unit bridge with spatial scale
/// sqrt(t_len), which is exactly the same process.
pub fn sample_brownian_bridge(
    d: u32,
    t_len: f64,
    levels: u32,
    stream: &mut RandomStream,
) -> Result<RootedLoop> {
    if !(t_len > 0.0) {
        return Err(Error::Domain("time length must be positive".into()));
    }
    if levels < 1 {
        return Err(Error::Domain("levels must be >= 1".into()));
    }
    let values = unit_brownian_values(d, levels, stream);
    Ok(RootedLoop {
        flavor: Flavor::Brownian,
        d,
        root: vec![0.0; d as usize],
        t_len,
        spatial_scale: t_len.sqrt(),
        path: Path::Dyadic { levels, values },
    })
}

/// Sample from a unimodal discrete distribution given its normalized log-pmf,
/// enumerating outward from the mode against a single uniform. Exact up to
/// f64: every atom receives exactly its own probability.
pub fn sample_mode_outward<F: Fn(i64) -> f64>(
    u: f64,
    mode: i64,
    lo: i64,
    hi: i64,
    ln_pmf: F,
) -> i64 {
    debug_assert!((lo..=hi).contains(&mode));
    let mut acc = ln_pmf(mode).exp();
    if acc >= u {
        return mode;
    }
    let mut left = mode;
    let mut right = mode;
    let mut last = mode;
    while left > lo || right < hi {
        if right < hi {
            right += 1;
            acc += ln_pmf(right).exp();
            last = right;
            if acc >= u {
                return right;
            }
        }
        if left > lo {
            left -= 1;
            acc += ln_pmf(left).exp();
            last = left;
            if acc >= u {
                return left;
            }
        }
    }
    // Float leakage at the far tails; the remaining mass is ~1e-16.
    last
}

/// Coordinate step-count vector (k_1, ..., k_d) with sum n, distributed
/// proportionally to the multinomial weight (2n)! / prod (k_i!)^2, drawn by
/// sequential conditional sampling with closed-form normalizers.
pub fn sample_coordinate_counts(d: u32, n: u64, stream: &mut RandomStream) -> Vec<u64> {
    let mut counts = Vec::with_capacity(d as usize);
    let mut remaining = n;
    for coords_left in (1..=d).rev() {
        if coords_left == 1 {
            counts.push(remaining);
            break;
        }
        let k = sample_first_count(coords_left, remaining, stream);
        counts.push(k);
        remaining -= k;
    }
    counts
}

/// Draw k_1 for `m` coordinates sharing `r` half-steps:
/// P(k_1 = j) = C(r, j)^2 w_{m-1}(r - j) / w_m(r) with w_1 = 1,
/// w_2(r) = C(2r, r), and w_3 summed on demand.
fn sample_first_count(m: u32, r: u64, stream: &mut RandomStream) -> u64 {
    if r == 0 {
        return 0;
    }
    let u = stream.uniform_open();
    let ri = r as i64;
    match m {
        2 => {
            // ln P(j) = 2 ln C(r,j) - ln C(2r,r).
            let ln_norm = ln_binomial(2 * r, r);
            let ln_pmf = |j: i64| -> f64 { 2.0 * ln_binomial(r, j as u64) - ln_norm };
            sample_mode_outward(u, ri / 2, 0, ri, ln_pmf) as u64
        }
        3 => {
            let term = |j: i64| -> f64 {
                let j = j as u64;
                2.0 * ln_binomial(r, j) + ln_binomial(2 * (r - j), r - j)
            };
            let mode = mode_of(term, (ri as f64 / 3.0).round() as i64, 0, ri);
            // Normalize by summing outward from the mode.
            let peak = term(mode);
            let mut z = 0.0;
            let mut j = mode;
            while j >= 0 {
                let t = (term(j) - peak).exp();
                z += t;
                if t < 1e-30 {
                    break;
                }
                j -= 1;
            }
            let mut j = mode + 1;
            while j <= ri {
                let t = (term(j) - peak).exp();
                z += t;
                if t < 1e-30 {
                    break;
                }
                j += 1;
            }
            let ln_norm = peak + z.ln();
            sample_mode_outward(u, mode, 0, ri, |j| term(j) - ln_norm) as u64
        }
        _ => {
            // General m: w_{m-1} by log-space convolution, built per call.
            let ln_w_prev = ln_w_table(m - 1, r);
            let term = |j: i64| -> f64 {
                2.0 * ln_binomial(r, j as u64) + ln_w_prev[(r - j as u64) as usize]
            };
            let mode = mode_of(term, (ri as f64 / m as f64).round() as i64, 0, ri);
            let peak = term(mode);
            let mut z = 0.0;
            for j in 0..=ri {
                z += (term(j) - peak).exp();
            }
            let ln_norm = peak + z.ln();
            sample_mode_outward(u, mode, 0, ri, |j| term(j) - ln_norm) as u64
        }
    }
}

fn mode_of<F: Fn(i64) -> f64>(f: F, start: i64, lo: i64, hi: i64) -> i64 {
    let mut j = start.clamp(lo, hi);
    loop {
        let cur = f(j);
        if j < hi && f(j + 1) > cur {
            j += 1;
        } else if j > lo && f(j - 1) > cur {
            j -= 1;
        } else {
            return j;
        }
    }
}

/// ln w_m(r) for all r' <= r, where w_m(r) = sum_j C(r,j)^2 w_{m-1}(r-j).
fn ln_w_table(m: u32, r: u64) -> Vec<f64> {
    let r = r as usize;
    let mut prev = vec![0.0f64; r + 1];
    for _ in 2..=m {
        prev = (0..=r)
            .map(|rr| {
                let mut max = f64::NEG_INFINITY;
                let terms: Vec<f64> = (0..=rr)
                    .map(|j| {
                        let t = 2.0 * ln_binomial(rr as u64, j as u64) + prev[rr - j];
                        if t > max {
                            max = t;
                        }
                        t
                    })
                    .collect();
                max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
            })
            .collect();
    }
    prev
}

/// Uniform sample among all closed 2n-step lattice paths rooted at 0:
/// coordinate counts first, then a uniform shuffle of the signed unit steps.
pub fn sample_discrete_bridge(d: u32, n: u64, stream: &mut RandomStream) -> Result<RootedLoop> {
    if n < 1 {
        return Err(Error::Domain("n must be >= 1".into()));
    }
    let counts = sample_coordinate_counts(d, n, stream);
    let mut steps: Vec<(u32, i64)> = Vec::with_capacity(2 * n as usize);
    for (i, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            steps.push((i as u32, 1));
            steps.push((i as u32, -1));
        }
    }
    stream.shuffle(&mut steps);
    let dd = d as usize;
    let mut verts = Vec::with_capacity((2 * n as usize + 1) * dd);
    let mut pos = vec![0i64; dd];
    verts.extend_from_slice(&pos);
    for (axis, sign) in steps {
        pos[axis as usize] += sign;
        verts.extend_from_slice(&pos);
    }
    Ok(RootedLoop {
        flavor: Flavor::RwDiscrete,
        d,
        root: vec![0.0; dd],
        t_len: 2.0 * n as f64,
        spatial_scale: 1.0,
        path: Path::Verts { verts },
    })
}

/// Conditional jump-count pmf normalizer for a one-dimensional bridge at
/// Poisson parameter s: P(K = 2m | return) = (s/2)^{2m} / ((m!)^2 I_0(s)).
pub fn bridge_jump_count(s: f64, stream: &mut RandomStream) -> u64 {
    if s == 0.0 {
        return 0;
    }
    let ln_i0 = s + bessel_i0_scaled(s).ln();
    let ln_pmf = |m: i64| -> f64 {
        let m = m as u64;
        2.0 * m as f64 * (s / 2.0).ln() - 2.0 * ln_factorial(m) - ln_i0
    };
    let mode = ((s / 2.0).floor() as i64).max(0);
    let u = stream.uniform_open();
    let hi = (s + 12.0 * s.sqrt() + 40.0) as i64;
    2 * sample_mode_outward(u, mode_of(ln_pmf, mode, 0, hi), 0, hi, ln_pmf) as u64
}

/// Continuous-time random-walk loop of time length t_len on Z^d: each
/// coordinate independently draws its conditioned jump count at rate 1/d,
/// jump times as uniform order statistics, signs as a balanced shuffle; the
/// coordinates are then merged by time.
pub fn sample_continuous_bridge(
    d: u32,
    t_len: f64,
    stream: &mut RandomStream,
) -> Result<RootedLoop> {
    if !(t_len > 0.0) {
        return Err(Error::Domain("time length must be positive".into()));
    }
    let rate = 1.0 / d as f64;
    let mut events: Vec<(f64, u32, i64)> = Vec::new();
    for axis in 0..d {
        let s = rate * t_len;
        let k = bridge_jump_count(s, stream);
        let m = (k / 2) as usize;
        let mut times: Vec<f64> = (0..k).map(|_| t_len * stream.uniform_open()).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut signs: Vec<i64> = std::iter::repeat_n(1, m)
            .chain(std::iter::repeat_n(-1, m))
            .collect();
        stream.shuffle(&mut signs);
        for (t, sgn) in times.into_iter().zip(signs) {
            events.push((t, axis, sgn));
        }
    }
    events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(assemble_jump_loop(d, t_len, &events))
}

/// Build a continuous-time loop from time-sorted (time, axis, sign) events.
pub fn assemble_jump_loop(d: u32, t_len: f64, events: &[(f64, u32, i64)]) -> RootedLoop {
    let dd = d as usize;
    let mut times = Vec::with_capacity(events.len());
    let mut verts = Vec::with_capacity(events.len() * dd);
    let mut pos = vec![0i64; dd];
    for &(t, axis, sign) in events {
        pos[axis as usize] += sign;
        times.push(t);
        verts.extend_from_slice(&pos);
    }
    RootedLoop {
        flavor: Flavor::RwContinuous,
        d,
        root: vec![0.0; dd],
        t_len,
        spatial_scale: 1.0,
        path: Path::Jumps {
            times,
            verts,
            native_t: t_len,
        },
    }
}

/// Default dyadic resolution when pairing a Brownian loop with a walk whose
/// half-step scale is n.
pub fn default_levels(n_hint: u64) -> u32 {
    dyadic_levels_for(n_hint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{purpose, RootSeed, StreamKey};
    use approx::assert_relative_eq;
    use std::collections::HashMap;

    fn stream(tag: u64) -> RandomStream {
        let root = RootSeed::from_u64(20_240 + tag);
        RandomStream::derive(&root, &StreamKey::simple(purpose::BRIDGE_SAMPLER, tag))
    }

    #[test]
    fn brownian_bridge_endpoints_and_shape() {
        let mut s = stream(1);
        let b = sample_brownian_bridge(3, 2.5, 6, &mut s).unwrap();
        b.validate().unwrap();
        assert_eq!(b.evaluate(0.0), vec![0.0; 3]);
        assert_eq!(b.evaluate(1.0), vec![0.0; 3]);
        assert_eq!(b.dyadic_levels(), Some(6));
    }

    #[test]
    fn brownian_bridge_covariance() {
        // Per-coordinate Cov(B_{st}, B_{ut}) = t (min(s,u) - s u).
        let mut s = stream(2);
        let t_len = 3.0;
        let reps = 60_000;
        let (sa, sb) = (0.25, 0.625);
        let mut prods = Vec::with_capacity(reps);
        for _ in 0..reps {
            let b = sample_brownian_bridge(2, t_len, 5, &mut s).unwrap();
            let xa = b.evaluate(sa)[1];
            let xb = b.evaluate(sb)[1];
            prods.push(xa * xb);
        }
        let (mean, var) = crate::stats::mean_var(&prods);
        let theo = t_len * (sa.min(sb) - sa * sb);
        let se = (var / reps as f64).sqrt();
        assert!(
            (mean - theo).abs() < 3.0 * se,
            "cov {mean} vs {theo} (se {se})"
        );
    }

    #[test]
    fn brownian_refinement_consistency() {
        // The level-L sample restricted to the level-(L-1) grid must have the
        // level-(L-1) law; check the variance at an odd coarse grid point.
        let mut s = stream(3);
        let reps = 40_000;
        let mut vals = Vec::with_capacity(reps);
        for _ in 0..reps {
            let b = sample_brownian_bridge(1, 1.0, 4, &mut s).unwrap();
            vals.push(b.evaluate(0.25)[0]);
        }
        let (mean, var) = crate::stats::mean_var(&vals);
        assert!(mean.abs() < 4.0 * (var / reps as f64).sqrt());
        // Var B_{1/4} = 1/4 * 3/4 = 3/16.
        let se_var = var * (2.0 / (reps as f64 - 1.0)).sqrt();
        assert!((var - 3.0 / 16.0).abs() < 4.0 * se_var);
    }

    #[test]
    fn discrete_bridge_structure() {
        let mut s = stream(4);
        for d in 1..=4u32 {
            for n in [1u64, 2, 7] {
                let b = sample_discrete_bridge(d, n, &mut s).unwrap();
                b.validate().unwrap();
                if let Path::Verts { verts } = &b.path {
                    assert_eq!(verts.len(), ((2 * n + 1) * d as u64) as usize);
                } else {
                    panic!("wrong path kind");
                }
            }
        }
    }

    #[test]
    fn discrete_bridge_d1_n1_frequencies() {
        // Two closed paths, each with probability 1/2.
        let mut s = stream(5);
        let reps = 10_000;
        let mut ups = 0;
        for _ in 0..reps {
            let b = sample_discrete_bridge(1, 1, &mut s).unwrap();
            if let Path::Verts { verts } = &b.path {
                if verts[1] == 1 {
                    ups += 1;
                }
            }
        }
        let p = ups as f64 / reps as f64;
        assert!(
            (p - 0.5).abs() < 3.0 * 0.5 / (reps as f64).sqrt(),
            "p = {p}"
        );
    }

    #[test]
    fn discrete_bridge_d2_n1_frequencies() {
        // Four loops of length 2, each with probability 1/4.
        let mut s = stream(6);
        let reps = 20_000;
        let mut freq: HashMap<(i64, i64), usize> = HashMap::new();
        for _ in 0..reps {
            let b = sample_discrete_bridge(2, 1, &mut s).unwrap();
            if let Path::Verts { verts } = &b.path {
                *freq.entry((verts[2], verts[3])).or_default() += 1;
            }
        }
        assert_eq!(freq.len(), 4);
        let expected = vec![reps as f64 / 4.0; 4];
        let observed: Vec<f64> = freq.values().map(|&c| c as f64).collect();
        let (_, p) = crate::stats::chi_square_pvalue(&observed, &expected);
        assert!(p > 0.01, "p = {p}");
    }

    /// Exact midpoint pmf P(S_n = x | S_{2n} = 0) for SRW on Z^d by dynamic
    /// programming over position distributions; independent of all formulas
    /// in the sampler.
    fn midpoint_law_dp(d: usize, n: usize) -> HashMap<Vec<i64>, f64> {
        let span = n as i64;
        let dim_size = (2 * span + 1) as usize;
        let index = |pos: &[i64]| -> usize {
            pos.iter()
                .fold(0usize, |acc, &c| acc * dim_size + (c + span) as usize)
        };
        let total = dim_size.pow(d as u32);
        let mut dist = vec![0.0f64; total];
        dist[index(&vec![0; d])] = 1.0;
        let step = |dist: &Vec<f64>| -> Vec<f64> {
            let mut next = vec![0.0f64; total];
            let mut pos = vec![-span; d];
            loop {
                let p = dist[index(&pos)];
                if p > 0.0 {
                    for axis in 0..d {
                        for sgn in [-1i64, 1] {
                            let mut q = pos.clone();
                            q[axis] += sgn;
                            if q[axis].abs() <= span {
                                next[index(&q)] += p / (2 * d) as f64;
                            }
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
                        return next;
                    }
                }
            }
        };
        let mut half = dist.clone();
        for _ in 0..n {
            half = step(&half);
        }
        // P(mid = x | end = 0) = P_n(x) * P_n(-x) / P_{2n}(0), and P_n(-x) =
        // P_n(x) by symmetry.
        let mut back = half.clone();
        for _ in 0..n {
            back = step(&back);
        }
        let p_end = back[index(&vec![0; d])];
        let mut law = HashMap::new();
        let mut pos = vec![-span; d];
        loop {
            let p = half[index(&pos)];
            if p > 0.0 {
                law.insert(pos.clone(), p * p / p_end);
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
                    return law;
                }
            }
        }
    }

    #[test]
    fn discrete_bridge_midpoint_chi_square() {
        for (d, n, reps) in [(1usize, 6usize, 60_000usize), (2, 4, 60_000)] {
            let law = midpoint_law_dp(d, n);
            let mut s = stream(7 + d as u64);
            let mut counts: HashMap<Vec<i64>, usize> = HashMap::new();
            for _ in 0..reps {
                let b = sample_discrete_bridge(d as u32, n as u64, &mut s).unwrap();
                if let Path::Verts { verts } = &b.path {
                    let mid: Vec<i64> = (0..d).map(|i| verts[n * d + i]).collect();
                    *counts.entry(mid).or_default() += 1;
                }
            }
            let mut observed = Vec::new();
            let mut expected = Vec::new();
            for (x, &p) in &law {
                let e = p * reps as f64;
                if e >= 5.0 {
                    observed.push(counts.get(x).copied().unwrap_or(0) as f64);
                    expected.push(e);
                }
            }
            let (_, p) = crate::stats::chi_square_pvalue(&observed, &expected);
            assert!(p > 0.01, "d={d} n={n}: p = {p}");
        }
    }

    #[test]
    fn continuous_bridge_structure_and_balance() {
        let mut s = stream(9);
        for d in 1..=3u32 {
            for t in [0.3, 2.0, 17.0] {
                let b = sample_continuous_bridge(d, t, &mut s).unwrap();
                b.validate().unwrap(); // includes per-coordinate balance
                assert_eq!(b.evaluate(1.0), vec![0.0; d as usize]);
            }
        }
    }

    #[test]
    fn continuous_bridge_no_jump_probability() {
        // P(no jumps) = prod_i 1 / I_0(t/d) = (e^{-t/d} / i0s(t/d))^d.
        let d = 2u32;
        let t = 3.0;
        let s_par = t / d as f64;
        let p_theo = ((-s_par).exp() / bessel_i0_scaled(s_par)).powi(d as i32);
        let mut s = stream(10);
        let reps = 40_000;
        let mut empty = 0;
        for _ in 0..reps {
            let b = sample_continuous_bridge(d, t, &mut s).unwrap();
            if let Path::Jumps { times, .. } = &b.path {
                if times.is_empty() {
                    empty += 1;
                }
            }
        }
        let p_emp = empty as f64 / reps as f64;
        let se = (p_theo * (1.0 - p_theo) / reps as f64).sqrt();
        assert!((p_emp - p_theo).abs() < 3.0 * se, "{p_emp} vs {p_theo}");
    }

    #[test]
    fn continuous_bridge_jump_rate() {
        // Conditioned mean jump count is s I_1(s)/I_0(s); per unit time this
        // approaches the walk rate for long loops.
        let t = 400.0;
        let mut s = stream(11);
        let reps = 2_000;
        let mut counts = Vec::with_capacity(reps);
        for _ in 0..reps {
            let b = sample_continuous_bridge(1, t, &mut s).unwrap();
            if let Path::Jumps { times, .. } = &b.path {
                counts.push(times.len() as f64);
            }
        }
        let fam = crate::special::bessel_i_scaled_family(t, 1);
        let mean_theo = t * fam[1] / fam[0];
        let (mean_emp, var) = crate::stats::mean_var(&counts);
        let se = (var / reps as f64).sqrt();
        assert!(
            (mean_emp - mean_theo).abs() < 3.5 * se,
            "{mean_emp} vs {mean_theo} (se {se})"
        );
        assert_relative_eq!(mean_theo / t, 1.0, max_relative = 2e-3);
    }

    #[test]
    fn coordinate_counts_distribution() {
        // d=2: P(k_1 = j) = C(n,j)^2 / C(2n,n).
        let n = 6u64;
        let mut s = stream(12);
        let reps = 40_000;
        let mut counts = vec![0usize; n as usize + 1];
        for _ in 0..reps {
            let c = sample_coordinate_counts(2, n, &mut s);
            assert_eq!(c.iter().sum::<u64>(), n);
            counts[c[0] as usize] += 1;
        }
        let ln_norm = ln_binomial(2 * n, n);
        let observed: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let expected: Vec<f64> = (0..=n)
            .map(|j| (2.0 * ln_binomial(n, j) - ln_norm).exp() * reps as f64)
            .collect();
        let (_, p) = crate::stats::chi_square_pvalue(&observed, &expected);
        assert!(p > 0.01, "p = {p}");
        // d=3 counts against the rational oracle at n=2:
        // w_3(2) = sum_j C(2,j)^2 C(4-2j, 2-j): j=0:6, j=1:8, j=2:1 -> 15.
        let mut c3 = [0usize; 3];
        for _ in 0..reps {
            let c = sample_coordinate_counts(3, 2, &mut s);
            c3[c[0] as usize] += 1;
        }
        let probs = [6.0 / 15.0, 8.0 / 15.0, 1.0 / 15.0];
        for j in 0..3 {
            let p_emp = c3[j] as f64 / reps as f64;
            let se = (probs[j] * (1.0 - probs[j]) / reps as f64).sqrt();
            assert!((p_emp - probs[j]).abs() < 4.0 * se, "j={j}");
        }
    }

    #[test]
    fn mode_outward_sampler_is_inverse_cdf() {
        // Compare against direct inverse CDF on a small distribution.
        let probs = [0.05f64, 0.2, 0.5, 0.15, 0.1];
        let lnp = |j: i64| probs[j as usize].ln();
        for u in [0.01, 0.04999, 0.051, 0.3, 0.74, 0.7501, 0.95, 0.999] {
            let got = sample_mode_outward(u, 2, 0, 4, lnp);
            // Enumeration order: 2, 3, 1, 4, 0.
            let order = [2usize, 3, 1, 4, 0];
            let mut acc = 0.0;
            let mut want = 0usize;
            for &j in &order {
                acc += probs[j];
                if acc >= u {
                    want = j;
                    break;
                }
            }
            assert_eq!(got as usize, want, "u = {u}");
        }
    }
}
