//! Coupled construction of a random-walk bridge and a Brownian bridge from
//! shared randomness, so that their uniform distance is small while both
//! marginals stay exactly correct.
//!
//! The scheme is dyadic quantile coupling: walking down the dyadic tree of
//! the time interval, each midpoint draws one shared uniform; the walk pins
//! its value through the exact conditional CDF (binomial bridge kernel in the
//! discrete case, Bessel-ratio kernel in the continuous case) and the
//! Brownian bridge pins its midpoint through the Gaussian quantile of the
//! same uniform. Below the resolution where the walk has structure left, the
//! walk is completed by exact conditional simulation and the Brownian grid by
//! plain midpoint bisection, each from its own private stream. Because the
//! two private streams are keyed separately from the shared one, either
//! member can be re-derived alone, bit for bit.

use crate::bridges::{sample_coordinate_counts, sample_mode_outward, unit_brownian_values};
use crate::error::{Error, Result};
use crate::loops::{dyadic_levels_for, Flavor, Path, RootedLoop};
use crate::masses::Variant;
use crate::rng::{purpose, RandomStream, RootSeed, StreamKey};
use crate::special::{bessel_i_scaled_family, ln_binomial, ln_factorial, normal_quantile};

/// A random-walk loop and a Brownian loop built from the same randomness.
///
/// `walk` lives in native lattice coordinates with root 0; `brownian` is the
/// unit-time, unit-variance bridge with root 0. `sup_dist` is
/// sup_s |walk(s t~) - sqrt(t~/d) brownian(s)| with t~ the walk time length.
#[derive(Clone, Debug)]
pub struct CoupledBridgePair {
    pub walk: RootedLoop,
    pub brownian: RootedLoop,
    pub sup_dist: f64,
}

/// Which bridge family and size to couple.
#[derive(Clone, Copy, Debug)]
pub enum BridgeSpec {
    /// Discrete-time walk with 2n steps.
    Steps(u64),
    /// Continuous-time walk of the given duration.
    Duration(f64),
}

const SENTINEL: i64 = i64::MIN;

fn role_stream(root: &RootSeed, key: &StreamKey, role: u32, coord: u32) -> RandomStream {
    RandomStream::derive(root, &key.with_purpose(role).with_sub(coord))
}

/// One-dimensional discrete-time coupling core. Returns the walk values at
/// integer times 0..=2n and, unless suppressed, the unit Brownian bridge on
/// the dyadic grid.
fn couple_1d_discrete_raw(
    n: u64,
    levels: u32,
    root: &RootSeed,
    key: &StreamKey,
    coord: u32,
    want_brownian: bool,
) -> (Vec<i64>, Option<Vec<f64>>) {
    let m = 2 * n;
    let mut shared = role_stream(root, key, purpose::COUPLE_SHARED, coord);
    let mut walk_priv = role_stream(root, key, purpose::WALK_ONLY, coord);
    let mut brown_priv = role_stream(root, key, purpose::BROWNIAN_ONLY, coord);

    let len = (1usize << levels) + 1;
    let mut bro = if want_brownian {
        vec![0.0f64; len]
    } else {
        Vec::new()
    };
    let mut walk = vec![SENTINEL; m as usize + 1];
    if m == 0 {
        if want_brownian {
            let vals = unit_brownian_values(1, levels, &mut brown_priv);
            return (vec![0], Some(vals));
        }
        return (vec![0], None);
    }
    walk[0] = 0;
    walk[m as usize] = 0;

    // Walk time attached to grid index i (monotone, endpoints exact).
    let grid_to_time =
        |i: usize| -> u64 { ((i as u128 * m as u128 + (1u128 << (levels - 1))) >> levels) as u64 };

    // Iterative preorder over dyadic intervals.
    let mut stack: Vec<(usize, usize)> = vec![(0, len - 1)];
    while let Some((il, ir)) = stack.pop() {
        if ir - il < 2 {
            continue;
        }
        let mid = (il + ir) / 2;
        let (wl, wr) = (grid_to_time(il), grid_to_time(ir));
        let wm = grid_to_time(mid);
        let pin = wm > wl && wm < wr;
        // Brownian conditional midpoint: mean of neighbors, variance h/4.
        let sigma = 0.5 * ((ir - il) as f64 / (len - 1) as f64).sqrt();
        if pin {
            let u = shared.uniform_open();
            let x = walk[wl as usize];
            let y = walk[wr as usize];
            debug_assert!(x != SENTINEL && y != SENTINEL);
            walk[wm as usize] = binomial_bridge_quantile(wm - wl, wr - wm, x, y, u);
            if want_brownian {
                let mean = 0.5 * (bro[il] + bro[ir]);
                bro[mid] = mean + sigma * normal_quantile(u);
            }
        } else if want_brownian {
            let mean = 0.5 * (bro[il] + bro[ir]);
            bro[mid] = mean + sigma * brown_priv.gaussian();
        }
        // Right pushed first so the left child is processed first.
        stack.push((mid, ir));
        stack.push((il, mid));
    }

    // Complete any walk times the grid did not pin (possible when the grid is
    // coarser than the walk).
    let mut last = 0usize;
    for t in 1..=m as usize {
        if walk[t] != SENTINEL {
            if t - last > 1 {
                fill_discrete_gap(&mut walk, last, t, &mut walk_priv);
            }
            last = t;
        }
    }

    (walk, if want_brownian { Some(bro) } else { None })
}

/// Exact sequential fill of a discrete bridge between pinned times s < u.
fn fill_discrete_gap(walk: &mut [i64], s: usize, u: usize, stream: &mut RandomStream) {
    let mut cur = walk[s];
    let end = walk[u];
    for t in s..u - 1 {
        let steps_left = (u - t) as i64;
        let gap = end - cur;
        let p_up = (steps_left + gap) as f64 / (2 * steps_left) as f64;
        cur += if stream.uniform() < p_up { 1 } else { -1 };
        walk[t + 1] = cur;
    }
}

/// Inverse CDF of the binomial bridge midpoint: value v at l1 steps from x
/// and l2 steps from y, pmf(v) proportional to C(l1, (l1+v-x)/2) C(l2, (l2+y-v)/2).
fn binomial_bridge_quantile(l1: u64, l2: u64, x: i64, y: i64, u: f64) -> i64 {
    debug_assert!(l1 > 0 && l2 > 0);
    let lo_sup = (x - l1 as i64).max(y - l2 as i64);
    let hi_sup = (x + l1 as i64).min(y + l2 as i64);
    // Parity of reachable values.
    let parity = (x + l1 as i64).rem_euclid(2);
    let mean = x as f64 + (y - x) as f64 * l1 as f64 / (l1 + l2) as f64;
    let sd = ((l1 as f64 * l2 as f64) / (l1 + l2) as f64).sqrt();
    let mut lo = ((mean - 10.0 * sd - 4.0).floor() as i64).max(lo_sup);
    let mut hi = ((mean + 10.0 * sd + 4.0).ceil() as i64).min(hi_sup);
    if lo.rem_euclid(2) != parity {
        lo += 1;
    }
    if hi.rem_euclid(2) != parity {
        hi -= 1;
    }
    debug_assert!(lo <= hi);
    let ln_pmf = |v: i64| -> f64 {
        let k1 = ((l1 as i64 + v - x) / 2) as u64;
        let k2 = ((l2 as i64 + y - v) / 2) as u64;
        ln_binomial(l1, k1) + ln_binomial(l2, k2)
    };
    quantile_from_window(lo, hi, 2, u, ln_pmf)
}

/// Inverse CDF over an ascending lattice window with the pmf given in logs up
/// to a constant; normalizes within the window (truncated mass < 1e-18).
fn quantile_from_window<F: Fn(i64) -> f64>(lo: i64, hi: i64, step: i64, u: f64, ln_pmf: F) -> i64 {
    let count = ((hi - lo) / step + 1) as usize;
    let mut lnp = Vec::with_capacity(count);
    let mut max = f64::NEG_INFINITY;
    let mut v = lo;
    while v <= hi {
        let t = ln_pmf(v);
        if t > max {
            max = t;
        }
        lnp.push(t);
        v += step;
    }
    let mut total = 0.0;
    for t in &mut lnp {
        *t = (*t - max).exp();
        total += *t;
    }
    let target = u * total;
    let mut acc = 0.0;
    for (i, t) in lnp.iter().enumerate() {
        acc += t;
        if acc >= target {
            return lo + i as i64 * step;
        }
    }
    hi
}

/// One-dimensional continuous-time coupling core. Returns the walk as
/// (jump time, new value) events on [0, t_len] plus the unit Brownian bridge.
///
/// Dyadic midpoints are pinned by quantile coupling while the cell holds at
/// least 4 expected jumps; below that resolution each cell is filled by exact
/// conditional simulation of the walk bridge.
fn couple_1d_continuous_raw(
    t_len: f64,
    rate: f64,
    levels: u32,
    root: &RootSeed,
    key: &StreamKey,
    coord: u32,
    want_brownian: bool,
) -> (Vec<(f64, i64)>, Option<Vec<f64>>) {
    let mut shared = role_stream(root, key, purpose::COUPLE_SHARED, coord);
    let mut walk_priv = role_stream(root, key, purpose::WALK_ONLY, coord);
    let mut brown_priv = role_stream(root, key, purpose::BROWNIAN_ONLY, coord);

    let len = (1usize << levels) + 1;
    let mut bro = if want_brownian {
        vec![0.0f64; len]
    } else {
        Vec::new()
    };
    // Pinned walk values at grid indices.
    let mut pinned = vec![SENTINEL; len];
    pinned[0] = 0;
    pinned[len - 1] = 0;

    struct Ctx<'a> {
        t_len: f64,
        rate: f64,
        len: usize,
        pinned: &'a mut Vec<i64>,
        bro: &'a mut Vec<f64>,
        want_brownian: bool,
        events: Vec<(f64, i64)>,
    }

    fn refine(
        ctx: &mut Ctx,
        il: usize,
        ir: usize,
        shared: &mut RandomStream,
        walk_priv: &mut RandomStream,
        brown_priv: &mut RandomStream,
    ) {
        let width = (ir - il) as f64 / (ctx.len - 1) as f64 * ctx.t_len;
        let splittable = ir - il >= 2;
        if splittable && ctx.rate * width >= 4.0 {
            let mid = (il + ir) / 2;
            let u = shared.uniform_open();
            let x = ctx.pinned[il];
            let y = ctx.pinned[ir];
            let h = 0.5 * ctx.rate * width;
            ctx.pinned[mid] = bessel_bridge_quantile(h, h, x, y, u);
            if ctx.want_brownian {
                let sigma = 0.5 * ((ir - il) as f64 / (ctx.len - 1) as f64).sqrt();
                let mean = 0.5 * (ctx.bro[il] + ctx.bro[ir]);
                ctx.bro[mid] = mean + sigma * normal_quantile(u);
            }
            refine(ctx, il, mid, shared, walk_priv, brown_priv);
            refine(ctx, mid, ir, shared, walk_priv, brown_priv);
        } else {
            // Leaf: exact conditional fill of the walk on this cell.
            let t0 = il as f64 / (ctx.len - 1) as f64 * ctx.t_len;
            let x = ctx.pinned[il];
            let y = ctx.pinned[ir];
            fill_continuous_cell(ctx.rate, t0, width, x, y, walk_priv, &mut ctx.events);
            if ctx.want_brownian {
                bisect_brownian_range(ctx.bro, il, ir, ctx.len, brown_priv);
            }
        }
    }

    let mut ctx = Ctx {
        t_len,
        rate,
        len,
        pinned: &mut pinned,
        bro: &mut bro,
        want_brownian,
        events: Vec::new(),
    };
    refine(
        &mut ctx,
        0,
        len - 1,
        &mut shared,
        &mut walk_priv,
        &mut brown_priv,
    );
    let events = ctx.events;

    (events, if want_brownian { Some(bro) } else { None })
}

/// Finish the Brownian grid inside [il, ir] by plain midpoint bisection.
fn bisect_brownian_range(
    bro: &mut [f64],
    il: usize,
    ir: usize,
    len: usize,
    stream: &mut RandomStream,
) {
    if ir - il < 2 {
        return;
    }
    let mid = (il + ir) / 2;
    let sigma = 0.5 * ((ir - il) as f64 / (len - 1) as f64).sqrt();
    let mean = 0.5 * (bro[il] + bro[ir]);
    bro[mid] = mean + sigma * stream.gaussian();
    bisect_brownian_range(bro, il, mid, len, stream);
    bisect_brownian_range(bro, mid, ir, len, stream);
}

/// Inverse CDF of the continuous-time bridge midpoint: kernels
/// p_{h}(x, v) = e^{-h} I_{|v-x|}(h) on both sides, in Poisson parameters
/// h1 = rate * dt1, h2 = rate * dt2.
fn bessel_bridge_quantile(h1: f64, h2: f64, x: i64, y: i64, u: f64) -> i64 {
    let mean = x as f64 + (y - x) as f64 * h1 / (h1 + h2);
    let sd = (h1 * h2 / (h1 + h2)).sqrt().max(1.0);
    let lo = (mean - 10.0 * sd - 8.0).floor() as i64;
    let hi = (mean + 10.0 * sd + 8.0).ceil() as i64;
    let ord1 = (x - lo).abs().max((x - hi).abs()) as usize;
    let ord2 = (y - lo).abs().max((y - hi).abs()) as usize;
    let fam1 = bessel_i_scaled_family(h1, ord1);
    let fam2 = bessel_i_scaled_family(h2, ord2);
    let ln_pmf = |v: i64| -> f64 {
        let k1 = (v - x).unsigned_abs() as usize;
        let k2 = (y - v).unsigned_abs() as usize;
        let p = fam1[k1] * fam2[k2];
        if p > 0.0 {
            p.ln()
        } else {
            -750.0
        }
    };
    quantile_from_window(lo, hi, 1, u, ln_pmf)
}

/// Exact conditional simulation of the continuous-time walk bridge on a cell
/// [t0, t0 + width] from value x to value y: jump count from the conditioned
/// Poisson law, jump times as uniform order statistics, signs as a balanced
/// shuffle.
fn fill_continuous_cell(
    rate: f64,
    t0: f64,
    width: f64,
    x: i64,
    y: i64,
    stream: &mut RandomStream,
    events: &mut Vec<(f64, i64)>,
) {
    let g = y - x;
    let ga = g.unsigned_abs();
    let h = rate * width;
    let k = conditioned_jump_count(h, ga, stream);
    if k == 0 {
        return;
    }
    let mut times: Vec<f64> = (0..k).map(|_| t0 + width * stream.uniform_open()).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ups = (k as i64 + g) / 2;
    let mut signs: Vec<i64> = std::iter::repeat_n(1, ups as usize)
        .chain(std::iter::repeat_n(-1, (k as i64 - ups) as usize))
        .collect();
    stream.shuffle(&mut signs);
    let mut cur = x;
    for (t, s) in times.into_iter().zip(signs) {
        cur += s;
        events.push((t, cur));
    }
    debug_assert_eq!(cur, y);
}

/// Jump count of a rate-h cell conditioned to displace by +-ga:
/// P(K = k) proportional to h^k / k! * C(k, (k+ga)/2) 2^{-k}, k >= ga,
/// k = ga (mod 2).
fn conditioned_jump_count(h: f64, ga: u64, stream: &mut RandomStream) -> u64 {
    if h == 0.0 {
        debug_assert_eq!(ga, 0);
        return 0;
    }
    let ln_term = |j: i64| -> f64 {
        // k = ga + 2j
        let k = ga + 2 * j as u64;
        k as f64 * (0.5 * h).ln() - ln_factorial(k) + ln_binomial(k, (k + ga) / 2)
    };
    // Normalize by outward summation around the mode.
    let start = ((0.5 * (h - ga as f64)).max(0.0)) as i64;
    let mode = {
        let mut j = start;
        loop {
            let cur = ln_term(j);
            if ln_term(j + 1) > cur {
                j += 1;
            } else if j > 0 && ln_term(j - 1) > cur {
                j -= 1;
            } else {
                break j;
            }
        }
    };
    let peak = ln_term(mode);
    let mut z = 0.0;
    let mut j = mode;
    loop {
        let t = (ln_term(j) - peak).exp();
        z += t;
        if t < 1e-30 || j == 0 {
            break;
        }
        j -= 1;
    }
    let mut j = mode + 1;
    loop {
        let t = (ln_term(j) - peak).exp();
        z += t;
        if t < 1e-30 {
            break;
        }
        j += 1;
    }
    let ln_norm = peak + z.ln();
    let hi = mode + ((6.0 * (h.sqrt() + 1.0)) as i64) + 64;
    let u = stream.uniform_open();
    let j = sample_mode_outward(u, mode, 0, hi, |j| ln_term(j) - ln_norm);
    ga + 2 * j as u64
}

/// Couple a one-dimensional discrete-time walk bridge with 2n steps to a unit
/// Brownian bridge.
pub fn couple_1d_discrete(n: u64, root: &RootSeed, key: &StreamKey) -> CoupledBridgePair {
    couple_bridges(1, Variant::Discrete, BridgeSpec::Steps(n), root, key, None)
        .expect("valid 1d coupling")
}

/// Couple a one-dimensional continuous-time walk bridge at the given rate to
/// a unit Brownian bridge.
pub fn couple_1d_continuous(
    t_len: f64,
    rate: f64,
    root: &RootSeed,
    key: &StreamKey,
) -> CoupledBridgePair {
    assert!(t_len > 0.0 && rate > 0.0);
    let levels = dyadic_levels_for((rate * t_len / 2.0).ceil().max(1.0) as u64);
    let (events, bro) = couple_1d_continuous_raw(t_len, rate, levels, root, key, 0, true);
    let walk = jump_loop_from_events(1, t_len, &events);
    let brownian = unit_loop(1, levels, bro.unwrap());
    finish_pair(walk, brownian, rate * t_len)
}

fn unit_loop(d: u32, levels: u32, values: Vec<f64>) -> RootedLoop {
    RootedLoop {
        flavor: Flavor::Brownian,
        d,
        root: vec![0.0; d as usize],
        t_len: 1.0,
        spatial_scale: 1.0,
        path: Path::Dyadic { levels, values },
    }
}

fn jump_loop_from_events(d: u32, t_len: f64, events: &[(f64, i64)]) -> RootedLoop {
    // 1d events carry the new value directly.
    let times: Vec<f64> = events.iter().map(|e| e.0).collect();
    let verts: Vec<i64> = events.iter().map(|e| e.1).collect();
    RootedLoop {
        flavor: Flavor::RwContinuous,
        d,
        root: vec![0.0; d as usize],
        t_len,
        spatial_scale: 1.0,
        path: Path::Jumps {
            times,
            verts,
            native_t: t_len,
        },
    }
}

fn finish_pair(walk: RootedLoop, brownian: RootedLoop, variance_scale: f64) -> CoupledBridgePair {
    let sup_dist = pair_sup_distance(&walk, &brownian, variance_scale.sqrt());
    CoupledBridgePair {
        walk,
        brownian,
        sup_dist,
    }
}

/// Couple a d-dimensional walk bridge (either variant) to a unit d-dimensional
/// Brownian bridge.
///
/// Continuous: d independent coordinate couplings at rate 1/d. Discrete d=1:
/// the one-dimensional scheme. Discrete d=2: two independent one-dimensional
/// couplings in the 45-degree rotated frame, rotated back. Discrete d>=3:
/// coordinate step counts first, then per-coordinate couplings interleaved
/// uniformly in time; marginals stay exact, and the measured discrepancy is
/// reported without any claimed rate sharper than n^{-1/4} log n.
pub fn couple_bridges(
    d: u32,
    variant: Variant,
    spec: BridgeSpec,
    root: &RootSeed,
    key: &StreamKey,
    levels_override: Option<u32>,
) -> Result<CoupledBridgePair> {
    build_coupled(d, variant, spec, root, key, levels_override, true)
        .map(|(walk, bro, scale)| finish_pair(walk, bro.expect("brownian requested"), scale))
}

/// The walk member alone, bit-identical to the one `couple_bridges` builds
/// with the same key.
pub fn walk_bridge_only(
    d: u32,
    variant: Variant,
    spec: BridgeSpec,
    root: &RootSeed,
    key: &StreamKey,
    levels_override: Option<u32>,
) -> Result<RootedLoop> {
    build_coupled(d, variant, spec, root, key, levels_override, false).map(|(walk, _, _)| walk)
}

#[allow(clippy::type_complexity)]
fn build_coupled(
    d: u32,
    variant: Variant,
    spec: BridgeSpec,
    root: &RootSeed,
    key: &StreamKey,
    levels_override: Option<u32>,
    want_brownian: bool,
) -> Result<(RootedLoop, Option<RootedLoop>, f64)> {
    if d < 1 {
        return Err(Error::Domain("dimension must be >= 1".into()));
    }
    match (variant, spec) {
        (Variant::Discrete, BridgeSpec::Steps(n)) => {
            if n < 1 {
                return Err(Error::Domain("n must be >= 1".into()));
            }
            let levels = levels_override.unwrap_or_else(|| dyadic_levels_for(n));
            let dd = d as usize;
            let m = 2 * n as usize;
            let variance_scale = 2.0 * n as f64 / d as f64;
            match d {
                1 => {
                    let (vals, bro) =
                        couple_1d_discrete_raw(n, levels, root, key, 0, want_brownian);
                    let walk = RootedLoop {
                        flavor: Flavor::RwDiscrete,
                        d: 1,
                        root: vec![0.0],
                        t_len: m as f64,
                        spatial_scale: 1.0,
                        path: Path::Verts { verts: vals },
                    };
                    Ok((walk, bro.map(|v| unit_loop(1, levels, v)), variance_scale))
                }
                2 => {
                    // Rotated frame: the two diagonal coordinates of the walk
                    // are independent simple walks; a closed walk makes both
                    // of them bridges of the same length.
                    let (u_vals, u_bro) =
                        couple_1d_discrete_raw(n, levels, root, key, 0, want_brownian);
                    let (v_vals, v_bro) =
                        couple_1d_discrete_raw(n, levels, root, key, 1, want_brownian);
                    let mut verts = Vec::with_capacity((m + 1) * 2);
                    for t in 0..=m {
                        let (uu, vv) = (u_vals[t], v_vals[t]);
                        debug_assert_eq!((uu + vv).rem_euclid(2), 0);
                        verts.push((uu + vv) / 2);
                        verts.push((uu - vv) / 2);
                    }
                    let walk = RootedLoop {
                        flavor: Flavor::RwDiscrete,
                        d: 2,
                        root: vec![0.0; 2],
                        t_len: m as f64,
                        spatial_scale: 1.0,
                        path: Path::Verts { verts },
                    };
                    let bro = match (u_bro, v_bro) {
                        (Some(ub), Some(vb)) => {
                            let len = ub.len();
                            let mut values = Vec::with_capacity(len * 2);
                            let s = std::f64::consts::FRAC_1_SQRT_2;
                            for i in 0..len {
                                values.push(s * (ub[i] + vb[i]));
                                values.push(s * (ub[i] - vb[i]));
                            }
                            Some(unit_loop(2, levels, values))
                        }
                        _ => None,
                    };
                    Ok((walk, bro, variance_scale))
                }
                _ => {
                    let mut counts_stream = RandomStream::derive(
                        root,
                        &key.with_purpose(purpose::COORD_COUNTS).with_sub(0),
                    );
                    let counts = sample_coordinate_counts(d, n, &mut counts_stream);
                    let mut coord_walks = Vec::with_capacity(dd);
                    let mut coord_bros = Vec::with_capacity(dd);
                    for (i, &k) in counts.iter().enumerate() {
                        let (vals, bro) =
                            couple_1d_discrete_raw(k, levels, root, key, i as u32, want_brownian);
                        coord_walks.push(vals);
                        coord_bros.push(bro);
                    }
                    // Uniform interleaving of the coordinate steps.
                    let mut slots: Vec<u32> = counts
                        .iter()
                        .enumerate()
                        .flat_map(|(i, &k)| std::iter::repeat_n(i as u32, 2 * k as usize))
                        .collect();
                    let mut inter_stream = RandomStream::derive(
                        root,
                        &key.with_purpose(purpose::WALK_ONLY).with_sub(0xFFFF),
                    );
                    inter_stream.shuffle(&mut slots);
                    let mut verts = Vec::with_capacity((m + 1) * dd);
                    let mut pos = vec![0i64; dd];
                    let mut step_idx = vec![0usize; dd];
                    verts.extend_from_slice(&pos);
                    for &c in &slots {
                        let c = c as usize;
                        let j = step_idx[c];
                        pos[c] += coord_walks[c][j + 1] - coord_walks[c][j];
                        step_idx[c] = j + 1;
                        verts.extend_from_slice(&pos);
                    }
                    let walk = RootedLoop {
                        flavor: Flavor::RwDiscrete,
                        d,
                        root: vec![0.0; dd],
                        t_len: m as f64,
                        spatial_scale: 1.0,
                        path: Path::Verts { verts },
                    };
                    let bro = if want_brownian {
                        let len = (1usize << levels) + 1;
                        let mut values = vec![0.0; len * dd];
                        for (i, b) in coord_bros.into_iter().enumerate() {
                            let b = b.expect("brownian requested");
                            for j in 0..len {
                                values[j * dd + i] = b[j];
                            }
                        }
                        Some(unit_loop(d, levels, values))
                    } else {
                        None
                    };
                    Ok((walk, bro, variance_scale))
                }
            }
        }
        (Variant::Continuous, BridgeSpec::Duration(t_len)) => {
            if !(t_len > 0.0) {
                return Err(Error::Domain("duration must be positive".into()));
            }
            let rate = 1.0 / d as f64;
            let levels = levels_override
                .unwrap_or_else(|| dyadic_levels_for((t_len / 2.0).ceil().max(1.0) as u64));
            let dd = d as usize;
            let mut all_events: Vec<(f64, u32, i64)> = Vec::new();
            let len = (1usize << levels) + 1;
            let mut values = if want_brownian {
                vec![0.0; len * dd]
            } else {
                Vec::new()
            };
            for i in 0..dd {
                let (events, bro) = couple_1d_continuous_raw(
                    t_len,
                    rate,
                    levels,
                    root,
                    key,
                    i as u32,
                    want_brownian,
                );
                let mut prev = 0i64;
                for (t, v) in events {
                    all_events.push((t, i as u32, v - prev));
                    prev = v;
                }
                if let Some(b) = bro {
                    for j in 0..len {
                        values[j * dd + i] = b[j];
                    }
                }
            }
            all_events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let walk = crate::bridges::assemble_jump_loop(d, t_len, &all_events);
            let bro = if want_brownian {
                Some(unit_loop(d, levels, values))
            } else {
                None
            };
            Ok((walk, bro, rate * t_len))
        }
        (Variant::Discrete, BridgeSpec::Duration(_)) => Err(Error::Domain(
            "discrete variant takes a step count, not a duration".into(),
        )),
        (Variant::Continuous, BridgeSpec::Steps(_)) => Err(Error::Domain(
            "continuous variant takes a duration, not a step count".into(),
        )),
    }
}

/// Sup distance sup_s |walk(s t~) - (scale * brownian(s) + offset)| over the
/// union of the walk's breakpoints and the Brownian dyadic grid, in relative
/// coordinates. Both interpolants are piecewise linear (the jump walk
/// piecewise constant with left limits included), so the sweep is exact for
/// the stored paths.
pub fn sup_distance_with_offset(
    walk: &RootedLoop,
    brownian: &RootedLoop,
    scale: f64,
    offset: &[f64],
) -> f64 {
    let mut fractions = walk.breakpoint_fractions();
    fractions.extend(brownian.breakpoint_fractions());
    fractions.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fractions.dedup();
    let d = walk.d as usize;
    let jump_walk = matches!(walk.path, Path::Jumps { .. });
    let mut sup: f64 = 0.0;
    let mut prev_walk: Vec<f64> = walk.evaluate_relative(0.0);
    for &s in &fractions {
        let w = walk.evaluate_relative(s);
        let b = brownian.evaluate_relative(s);
        let mut d2 = 0.0;
        let mut d2_left = 0.0;
        for i in 0..d {
            let target = scale * b[i] + offset[i];
            let diff = w[i] - target;
            d2 += diff * diff;
            if jump_walk {
                let diff_l = prev_walk[i] - target;
                d2_left += diff_l * diff_l;
            }
        }
        sup = sup.max(d2.sqrt());
        if jump_walk {
            sup = sup.max(d2_left.sqrt());
        }
        prev_walk = w;
    }
    sup
}

fn pair_sup_distance(walk: &RootedLoop, brownian: &RootedLoop, scale: f64) -> f64 {
    let zeros = vec![0.0; walk.d as usize];
    sup_distance_with_offset(walk, brownian, scale, &zeros)
}

/// Sup distance of a coupled pair measured on the union grid refined with at
/// least `grid_points` extra uniform fractions; nondecreasing in
/// `grid_points` because the extra fractions are nested dyadics.
pub fn measure_sup_distance(pair: &CoupledBridgePair, grid_points: usize) -> f64 {
    let scale = (pair.walk.t_len / pair.walk.d as f64).sqrt();
    let base = pair_sup_distance(&pair.walk, &pair.brownian, scale);
    if grid_points <= 1 {
        return base;
    }
    let levels = (grid_points as f64).log2().ceil() as u32;
    let m = 1usize << levels.min(22);
    let d = pair.walk.d as usize;
    let mut sup = base;
    for j in 0..=m {
        let s = j as f64 / m as f64;
        let w = pair.walk.evaluate_relative(s);
        let b = pair.brownian.evaluate_relative(s);
        let mut d2 = 0.0;
        for i in 0..d {
            let diff = w[i] - scale * b[i];
            d2 += diff * diff;
        }
        sup = sup.max(d2.sqrt());
    }
    sup
}

/// Fit the coupling constant: the q-quantile of the pair sup distance at walk
/// scale n, divided by the variant's rate shape (log n, or n^{1/4} log n for
/// the discrete walk in dimension >= 3).
pub fn calibrate_coupling_constant(
    d: u32,
    variant: Variant,
    n: u64,
    reps: usize,
    q: f64,
    root: &RootSeed,
) -> Result<f64> {
    assert!(reps > 0);
    let n = n.max(2);
    use rayon::prelude::*;
    let sups: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let key = StreamKey::new(purpose::CALIBRATION, n, [0; 3], rep as u64);
            let spec = match variant {
                Variant::Discrete => BridgeSpec::Steps(n),
                Variant::Continuous => BridgeSpec::Duration(2.0 * n as f64),
            };
            couple_bridges(d, variant, spec, root, &key, None)
                .expect("calibration coupling")
                .sup_dist
        })
        .collect();
    let mut sorted = sups;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Clamp the order statistic to what the sample can resolve.
    let idx = ((q * reps as f64).ceil() as usize).clamp(1, reps) - 1;
    let quant = sorted[idx];
    Ok(quant / rate_shape(d, variant, n as f64))
}

/// Shape of the coupling rate in the walk scale n: log n, except the
/// best-effort discrete coupling in d >= 3 which carries an extra n^{1/4}.
pub fn rate_shape(d: u32, variant: Variant, n: f64) -> f64 {
    let ln = n.max(2.0).ln();
    match (variant, d) {
        (Variant::Discrete, dd) if dd >= 3 => n.max(1.0).powf(0.25) * ln,
        _ => ln,
    }
}
