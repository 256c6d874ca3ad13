//! Loop soups in a finite window: Poisson fields over (n, z) cells that are
//! monotone in the intensity, the random-walk soup built from them, and the
//! coupled Brownian soup sharing the same randomness. A direct (uncoupled)
//! Brownian soup sampler provides the distributional ground truth for
//! two-sample tests.

use crate::coupling::{self, BridgeSpec, CoupledBridgePair};
use crate::error::{Error, Result};
use crate::loops::{dyadic_levels_for, Flavor, Path, RootedLoop};
use crate::masses::{self, Variant};
use crate::quad;
use crate::rng::{purpose, RandomStream, RootSeed, StreamKey};
use crate::sequences::ASequence;
use crate::special::bessel_i0_scaled;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Finite sampling window: lattice roots |z| <= r N, loop-size cells
/// n_min..=n_max, and the increasing intensity levels to realize.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SoupWindow {
    pub d: u32,
    pub variant: Variant,
    pub n_scale: u64,
    pub radius: f64,
    pub n_min: u64,
    pub n_max: u64,
    pub lambda_levels: Vec<f64>,
}

impl SoupWindow {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.d > 3 {
            return Err(Error::Config("window dimension must be 1..=3".into()));
        }
        if self.n_scale < 1 {
            return Err(Error::Config("scale N must be >= 1".into()));
        }
        if self.radius < 1.0 {
            return Err(Error::Config("radius must be >= 1".into()));
        }
        if self.n_min < 1 || self.n_max < self.n_min {
            return Err(Error::Config("need 1 <= n_min <= n_max".into()));
        }
        let mut prev = 0.0;
        for &l in &self.lambda_levels {
            if !(l > prev) {
                return Err(Error::Config(
                    "lambda levels must be strictly increasing and positive".into(),
                ));
            }
            prev = l;
        }
        if self.lambda_levels.is_empty() {
            return Err(Error::Config("at least one lambda level".into()));
        }
        Ok(())
    }

    pub fn lambda_max(&self) -> f64 {
        *self.lambda_levels.last().unwrap()
    }

    /// Lattice points with |z|_2 <= r N, in deterministic lexicographic order.
    pub fn lattice_points(&self) -> Vec<[i64; 3]> {
        let rn = self.radius * self.n_scale as f64;
        let bound = rn.floor() as i64;
        let r2 = rn * rn;
        let mut out = Vec::new();
        let range = |active: bool| if active { -bound..=bound } else { 0..=0 };
        for x in range(self.d >= 1) {
            for y in range(self.d >= 2) {
                for z in range(self.d >= 3) {
                    let norm2 = (x * x + y * y + z * z) as f64;
                    if norm2 <= r2 {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// Samples cell indices n proportionally to mass(n) on [n_min, n_max].
///
/// Masses are tabulated exactly up to a dense cutoff; beyond it, spans of
/// width 4096 carry their mass from the asymptotic tail closure (recorded,
/// relative error ~1e-9) and a draw landing in a span is resolved by
/// rejection against the exact per-cell mass.
#[derive(Clone, Debug)]
pub struct CellIndexSampler {
    d: u32,
    variant: Variant,
    n_min: u64,
    dense_end: u64,
    dense_cum: Vec<f64>,
    span_w: u64,
    span_cum: Vec<f64>,
    total: f64,
}

const DENSE_CELL_LIMIT: u64 = 20_000;
const SPAN_WIDTH: u64 = 4_096;

impl CellIndexSampler {
    pub fn build(d: u32, variant: Variant, n_min: u64, n_max: u64) -> Result<Self> {
        assert!(n_min >= 1 && n_max >= n_min);
        let dense_end = n_max.min(DENSE_CELL_LIMIT.max(n_min));
        let count = (dense_end - n_min + 1) as usize;
        let masses: Vec<f64> = (n_min..=dense_end)
            .into_par_iter()
            .map(|n| cell_mass(d, variant, n).expect("valid cell"))
            .collect();
        let mut dense_cum = Vec::with_capacity(count);
        let mut acc = 0.0;
        for m in masses {
            acc += m;
            dense_cum.push(acc);
        }
        let mut span_cum = Vec::new();
        let mut total = acc;
        if dense_end < n_max {
            let mut lo = dense_end + 1;
            let mut tail_lo = masses::mass_tail_sum(d, variant, lo)?.0;
            while lo <= n_max {
                let hi = (lo + SPAN_WIDTH - 1).min(n_max);
                let tail_hi = masses::mass_tail_sum(d, variant, hi + 1)?.0;
                total += tail_lo - tail_hi;
                span_cum.push(total);
                tail_lo = tail_hi;
                lo = hi + 1;
            }
        }
        Ok(CellIndexSampler {
            d,
            variant,
            n_min,
            dense_end,
            dense_cum,
            span_w: SPAN_WIDTH,
            span_cum,
            total,
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.total
    }

    pub fn sample(&self, stream: &mut RandomStream) -> u64 {
        let target = stream.uniform() * self.total;
        if target < *self.dense_cum.last().unwrap() {
            let idx = self.dense_cum.partition_point(|&c| c <= target);
            return self.n_min + idx as u64;
        }
        let span = self.span_cum.partition_point(|&c| c <= target);
        let lo = self.dense_end + 1 + span as u64 * self.span_w;
        let hi = lo + self.span_w - 1;
        // Rejection inside the span against the exact mass; masses decrease
        // in n, so the left edge bounds the span.
        let bound = cell_mass(self.d, self.variant, lo).expect("valid cell");
        loop {
            let n = lo + stream.below(hi - lo + 1);
            let m = cell_mass(self.d, self.variant, n).expect("valid cell");
            if stream.uniform() * bound <= m {
                return n;
            }
        }
    }
}

/// Per-cell mass: q~_d(n) for the discrete variant, Q_d(n) for continuous.
pub fn cell_mass(d: u32, variant: Variant, n: u64) -> Result<f64> {
    match variant {
        Variant::Discrete => masses::q_discrete(d, n),
        Variant::Continuous => Ok(masses::q_cell_continuous(d, n)?.0),
    }
}

/// One Poisson arrival: a loop slot at cell (n, z), the m-th of its cell,
/// appearing at intensity `lambda_time`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Arrival {
    pub n: u64,
    pub z: [i64; 3],
    pub m: u64,
    pub lambda_time: f64,
}

/// The realized Poisson field on the window, up to the top intensity level.
/// Counts at intensity lambda are recovered by truncating arrival times,
/// which makes the soups increasing in lambda by construction.
#[derive(Clone, Debug)]
pub struct PoissonField {
    pub window: SoupWindow,
    pub arrivals: Vec<Arrival>,
}

impl PoissonField {
    pub fn arrivals_at(&self, lambda: f64) -> impl Iterator<Item = &Arrival> {
        self.arrivals
            .iter()
            .filter(move |a| a.lambda_time <= lambda)
    }
}

/// Sample the field: per lattice point an independent keyed stream drives a
/// marked Poisson process in the intensity parameter; marks are cell indices
/// drawn proportionally to mass(n). Equivalent to independent per-(n, z)
/// Poisson processes with parameters mass(n), cell-parallel and reproducible
/// at any worker count.
pub fn sample_poisson_field(
    window: &SoupWindow,
    root: &RootSeed,
    max_expected_loops: Option<f64>,
) -> Result<PoissonField> {
    window.validate()?;
    let sampler = CellIndexSampler::build(window.d, window.variant, window.n_min, window.n_max)?;
    let points = window.lattice_points();
    let expected = window.lambda_max() * sampler.total_mass() * points.len() as f64;
    if let Some(cap) = max_expected_loops {
        if expected > cap {
            return Err(Error::MemoryGuard(format!(
                "expected loop count {expected:.3e} exceeds cap {cap:.3e}"
            )));
        }
    }
    let rate = sampler.total_mass();
    let lambda_max = window.lambda_max();
    let mut arrivals: Vec<Arrival> = points
        .par_iter()
        .flat_map_iter(|&z| {
            let mut stream = RandomStream::derive(root, &StreamKey::new(purpose::FIELD, 0, z, 0));
            let mut out = Vec::new();
            let mut t = stream.exponential() / rate;
            let mut counts: std::collections::HashMap<u64, u64> = std::collections::HashMap::new();
            while t <= lambda_max {
                let n = sampler.sample(&mut stream);
                let m = counts.entry(n).or_insert(0);
                *m += 1;
                out.push(Arrival {
                    n,
                    z,
                    m: *m,
                    lambda_time: t,
                });
                t += stream.exponential() / rate;
            }
            out
        })
        .collect();
    // Deterministic global order regardless of the parallel gather.
    arrivals.sort_by(|a, b| {
        (a.z, a.n, a.m)
            .cmp(&(b.z, b.n, b.m))
            .then(a.lambda_time.partial_cmp(&b.lambda_time).unwrap())
    });
    Ok(PoissonField {
        window: window.clone(),
        arrivals,
    })
}

fn pair_key(n: u64, z: [i64; 3], m: u64) -> StreamKey {
    StreamKey::new(purpose::COUPLE_SHARED, n, z, m)
}

/// Walk-loop time length for an arrival: exactly 2n for the discrete variant,
/// and for the continuous variant a draw from the density
/// q_d(t) 1_{2n <= t < 2n+2} / Q_d(n) by safeguarded Newton inversion of the
/// quadrature CDF (tolerance 1e-12 in CDF units).
pub fn walk_duration(
    d: u32,
    variant: Variant,
    n: u64,
    z: [i64; 3],
    m: u64,
    root: &RootSeed,
) -> f64 {
    match variant {
        Variant::Discrete => 2.0 * n as f64,
        Variant::Continuous => {
            let mut stream =
                RandomStream::derive(root, &StreamKey::new(purpose::WALK_DURATION, n, z, m));
            let u = stream.uniform();
            invert_cell_duration(d, n, u)
        }
    }
}

fn invert_cell_duration(d: u32, n: u64, u: f64) -> f64 {
    let lo = 2.0 * n as f64;
    let hi = lo + 2.0;
    if u <= 0.0 {
        return lo;
    }
    let q_total = masses::q_cell_continuous(d, n).expect("valid cell").0;
    let target = u * q_total;
    let f = |t: f64| masses::q_continuous(d, t).expect("positive time");
    let mut a = lo;
    let mut b = hi;
    let mut t = lo + 2.0 * u; // linear initial guess
    for _ in 0..60 {
        let cdf = quad::adaptive(lo, t, 1e-13, &f).0;
        let err = cdf - target;
        if err.abs() < 1e-12 * q_total.max(1e-300) {
            break;
        }
        if err > 0.0 {
            b = t;
        } else {
            a = t;
        }
        let step = err / f(t);
        let mut next = t - step;
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        t = next;
    }
    t.clamp(lo, next_below(hi))
}

fn next_below(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// Brownian-loop time length for an arrival: exact closed-form inversion of
/// the power-law density on [a_n, a_{n+1}], using the same tail-sum values
/// that define the boundaries so the cell membership is exact.
pub fn brownian_duration(
    seq: &ASequence,
    n: u64,
    z: [i64; 3],
    m: u64,
    root: &RootSeed,
) -> Result<f64> {
    let mut stream =
        RandomStream::derive(root, &StreamKey::new(purpose::BROWNIAN_DURATION, n, z, m));
    let u = stream.uniform();
    let (s_lo, s_hi) = seq.s_pair(n)?;
    let s_u = s_lo - u * (s_lo - s_hi);
    let t = s_u.powf(-2.0 / seq.d as f64);
    let hi = s_hi.powf(-2.0 / seq.d as f64);
    Ok(t.min(next_below(hi)))
}

/// Root jitter inside the unit hypercube, per coordinate in (-1/2, 1/2] so
/// the snap map returns the cell's lattice point exactly.
pub fn root_jitter(d: u32, n: u64, z: [i64; 3], m: u64, root: &RootSeed) -> Vec<f64> {
    let mut stream = RandomStream::derive(root, &StreamKey::new(purpose::ROOT_JITTER, n, z, m));
    (0..d).map(|_| 0.5 - stream.uniform()).collect()
}

/// A fully built coupled arrival: the walk loop rooted at z, the unit
/// Brownian bridge, the jitter and the two time lengths.
#[derive(Clone, Debug)]
pub struct CoupledArrival {
    pub n: u64,
    pub z: [i64; 3],
    pub m: u64,
    pub lambda_time: f64,
    pub walk: RootedLoop,
    pub brownian_unit: RootedLoop,
    pub jitter: Vec<f64>,
    pub duration: f64,
    pub walk_duration: f64,
    pub bridge_sup: f64,
}

impl CoupledArrival {
    /// The Brownian soup member: the unit bridge scaled to its duration and
    /// translated to root z + Y.
    pub fn brownian_loop(&self) -> RootedLoop {
        let d = self.brownian_unit.d as usize;
        let mut out = self.brownian_unit.clone();
        out.root = (0..d).map(|i| self.z[i] as f64 + self.jitter[i]).collect();
        out.t_len = self.duration;
        out.spatial_scale = self.duration.sqrt();
        out
    }

    /// Unscaled sup distance between the two soup loops compared at equal
    /// fractions of their time lengths:
    /// sup_s |walk(s T~) - (sqrt(T) l(s) + z + Y)| with the shared root z
    /// cancelled.
    pub fn full_sup_distance(&self) -> f64 {
        coupling::sup_distance_with_offset(
            &self.walk,
            &self.brownian_unit,
            self.duration.sqrt(),
            &self.jitter,
        )
    }
}

/// Build the coupled pair for one arrival. Pure in (root, arrival), so the
/// construction parallelizes over arrivals with deterministic results.
pub fn build_coupled_arrival(
    d: u32,
    variant: Variant,
    seq: &ASequence,
    arrival: &Arrival,
    root: &RootSeed,
) -> Result<CoupledArrival> {
    if seq.d != d || seq.variant != variant {
        return Err(Error::Config(
            "cell-boundary sequence does not match (d, variant)".into(),
        ));
    }
    let Arrival {
        n,
        z,
        m,
        lambda_time,
    } = *arrival;
    let t_walk = walk_duration(d, variant, n, z, m, root);
    let spec = match variant {
        Variant::Discrete => BridgeSpec::Steps(n),
        Variant::Continuous => BridgeSpec::Duration(t_walk),
    };
    let levels = dyadic_levels_for(n);
    let key = pair_key(n, z, m);
    let CoupledBridgePair {
        mut walk,
        brownian,
        sup_dist,
    } = coupling::couple_bridges(d, variant, spec, root, &key, Some(levels))?;
    walk.root = (0..d as usize).map(|i| z[i] as f64).collect();
    let duration = brownian_duration(seq, n, z, m, root)?;
    let jitter = root_jitter(d, n, z, m, root);
    Ok(CoupledArrival {
        n,
        z,
        m,
        lambda_time,
        walk,
        brownian_unit: brownian,
        jitter,
        duration,
        walk_duration: t_walk,
        bridge_sup: sup_dist,
    })
}

/// The walk loop of an arrival alone, bit-identical to the coupled one.
pub fn build_rw_loop(
    d: u32,
    variant: Variant,
    arrival: &Arrival,
    root: &RootSeed,
) -> Result<RootedLoop> {
    let Arrival { n, z, m, .. } = *arrival;
    let t_walk = walk_duration(d, variant, n, z, m, root);
    let spec = match variant {
        Variant::Discrete => BridgeSpec::Steps(n),
        Variant::Continuous => BridgeSpec::Duration(t_walk),
    };
    let levels = dyadic_levels_for(n);
    let mut walk =
        coupling::walk_bridge_only(d, variant, spec, root, &pair_key(n, z, m), Some(levels))?;
    walk.root = (0..d as usize).map(|i| z[i] as f64).collect();
    Ok(walk)
}

/// Random-walk soup at one intensity level.
pub fn build_rw_soup(
    field: &PoissonField,
    lambda: f64,
    root: &RootSeed,
) -> Result<Vec<RootedLoop>> {
    let w = &field.window;
    let arrivals: Vec<&Arrival> = field.arrivals_at(lambda).collect();
    arrivals
        .par_iter()
        .map(|a| build_rw_loop(w.d, w.variant, a, root))
        .collect()
}

/// A random-walk soup and a Brownian soup built from the same randomness,
/// with the pairing between the in-range sub-multisets.
#[derive(Clone, Debug, Default)]
pub struct CoupledSoupPair {
    pub rw_soup: Vec<RootedLoop>,
    pub br_soup: Vec<RootedLoop>,
    /// (rw index, br index, provenance) - a bijection by construction.
    pub pairing: Vec<(usize, usize, PairProvenance)>,
    pub uncoupled_rw: Vec<RootedLoop>,
    pub uncoupled_br: Vec<RootedLoop>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PairProvenance {
    pub n: u64,
    pub z: [i64; 3],
    pub m: u64,
    pub lambda_time: f64,
    pub walk_duration: f64,
    pub brownian_duration: f64,
    pub bridge_sup: f64,
}

/// Build both soups at one intensity level, coupled arrival by arrival.
pub fn build_coupled_soup(
    field: &PoissonField,
    seq: &ASequence,
    lambda: f64,
    root: &RootSeed,
) -> Result<CoupledSoupPair> {
    let w = &field.window;
    let arrivals: Vec<&Arrival> = field.arrivals_at(lambda).collect();
    let built: Result<Vec<CoupledArrival>> = arrivals
        .par_iter()
        .map(|a| build_coupled_arrival(w.d, w.variant, seq, a, root))
        .collect();
    let mut out = CoupledSoupPair::default();
    for ca in built? {
        let idx = out.rw_soup.len();
        out.br_soup.push(ca.brownian_loop());
        out.pairing.push((
            idx,
            idx,
            PairProvenance {
                n: ca.n,
                z: ca.z,
                m: ca.m,
                lambda_time: ca.lambda_time,
                walk_duration: ca.walk_duration,
                brownian_duration: ca.duration,
                bridge_sup: ca.bridge_sup,
            },
        ));
        out.rw_soup.push(ca.walk);
    }
    Ok(out)
}

/// Independent (uncoupled) Brownian loop soup restricted to the window's
/// hypercubes and to time lengths >= t_min, used as ground truth. The
/// per-cell loop count is Poisson(lambda (2pi)^{-d/2} (2/d) t_min^{-d/2}),
/// the time lengths follow the power-law density, roots are uniform in the
/// cells.
pub fn sample_brownian_soup_direct(
    window: &SoupWindow,
    t_min: f64,
    lambda: f64,
    root: &RootSeed,
) -> Result<Vec<RootedLoop>> {
    window.validate()?;
    if !(t_min > 0.0) {
        return Err(Error::Domain(
            "t_min must be positive: the loop measure has infinite mass at 0".into(),
        ));
    }
    let d = window.d;
    let df = d as f64;
    let cell_mean = lambda * (2.0 * PI).powf(-df / 2.0) * (2.0 / df) * t_min.powf(-df / 2.0);
    let loops: Vec<RootedLoop> = window
        .lattice_points()
        .par_iter()
        .flat_map_iter(|&z| {
            let mut stream =
                RandomStream::derive(root, &StreamKey::new(purpose::DIRECT_SOUP, 0, z, 0));
            let count = stream.poisson(cell_mean);
            let mut out = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let u = stream.uniform();
                let t = t_min * (1.0 - u).powf(-2.0 / df);
                let jitter: Vec<f64> = (0..d).map(|_| 0.5 - stream.uniform()).collect();
                let levels = dyadic_levels_for((t * df / 2.0).ceil().max(1.0) as u64);
                let values = crate::bridges::unit_brownian_values(d, levels, &mut stream);
                out.push(RootedLoop {
                    flavor: Flavor::Brownian,
                    d,
                    root: (0..d as usize).map(|i| z[i] as f64 + jitter[i]).collect(),
                    t_len: t,
                    spatial_scale: t.sqrt(),
                    path: Path::Dyadic { levels, values },
                });
            }
            out
        })
        .collect();
    Ok(loops)
}

/// Truncated sampler for the sub-threshold loops the coupling never touches:
/// continuous-variant walk loops with time length in [t_floor, 2), placed in
/// the uncoupled lists only.
pub fn sample_subthreshold_rw(
    window: &SoupWindow,
    t_floor: f64,
    lambda: f64,
    root: &RootSeed,
) -> Result<Vec<RootedLoop>> {
    window.validate()?;
    if window.variant != Variant::Continuous {
        // The discrete soup has no loops of length below 2 at all.
        return Ok(Vec::new());
    }
    if !(t_floor > 0.0 && t_floor < 2.0) {
        return Err(Error::Domain("t_floor must lie in (0, 2)".into()));
    }
    let d = window.d;
    let f = |t: f64| masses::q_continuous(d, t).expect("positive time");
    let (mass, _) = quad::adaptive(t_floor, 2.0, 1e-12, &f);
    let loops: Vec<RootedLoop> = window
        .lattice_points()
        .par_iter()
        .flat_map_iter(|&z| {
            let mut stream =
                RandomStream::derive(root, &StreamKey::new(purpose::SUBTHRESHOLD, 0, z, 0));
            let count = stream.poisson(lambda * mass);
            let mut out = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let u = stream.uniform();
                // CDF inversion on [t_floor, 2) by bisection.
                let target = u * mass;
                let (mut a, mut b) = (t_floor, 2.0);
                for _ in 0..80 {
                    let mid = 0.5 * (a + b);
                    if quad::adaptive(t_floor, mid, 1e-13, &f).0 < target {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                let t = 0.5 * (a + b);
                let mut bridge =
                    crate::bridges::sample_continuous_bridge(d, t, &mut stream).expect("t > 0");
                bridge.root = (0..d as usize).map(|i| z[i] as f64).collect();
                out.push(bridge);
            }
            out
        })
        .collect();
    Ok(loops)
}

/// Truncated sampler for Brownian loops below the first cell boundary,
/// t in [t_floor, a_1]; uncoupled by design.
pub fn sample_subthreshold_brownian(
    window: &SoupWindow,
    seq: &ASequence,
    t_floor: f64,
    lambda: f64,
    root: &RootSeed,
) -> Result<Vec<RootedLoop>> {
    window.validate()?;
    let a1 = seq.a[0];
    if !(t_floor > 0.0 && t_floor < a1) {
        return Err(Error::Domain(format!(
            "t_floor must lie in (0, a_1) = (0, {a1})"
        )));
    }
    let d = window.d;
    let df = d as f64;
    let coef = lambda * (2.0 * PI).powf(-df / 2.0) * (2.0 / df);
    let cell_mean = coef * (t_floor.powf(-df / 2.0) - a1.powf(-df / 2.0));
    let s_floor = t_floor.powf(-df / 2.0);
    let s_a1 = a1.powf(-df / 2.0);
    let loops: Vec<RootedLoop> = window
        .lattice_points()
        .par_iter()
        .flat_map_iter(|&z| {
            let mut stream =
                RandomStream::derive(root, &StreamKey::new(purpose::SUBTHRESHOLD, 1, z, 0));
            let count = stream.poisson(cell_mean);
            let mut out = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let u = stream.uniform();
                let t = (s_floor - u * (s_floor - s_a1)).powf(-2.0 / df);
                let jitter: Vec<f64> = (0..d).map(|_| 0.5 - stream.uniform()).collect();
                let levels = 8;
                let values = crate::bridges::unit_brownian_values(d, levels, &mut stream);
                out.push(RootedLoop {
                    flavor: Flavor::Brownian,
                    d,
                    root: (0..d as usize).map(|i| z[i] as f64 + jitter[i]).collect(),
                    t_len: t,
                    spatial_scale: t.sqrt(),
                    path: Path::Dyadic { levels, values },
                });
            }
            out
        })
        .collect();
    Ok(loops)
}

/// Conditional no-jump probability of a continuous-variant walk loop of
/// duration t: (e^{-t/d} / i0s(t/d))^d; exposed for tests.
pub fn no_jump_probability(d: u32, t: f64) -> f64 {
    let s = t / d as f64;
    ((-s).exp() / bessel_i0_scaled(s)).powi(d as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequences::build_a_sequence;
    use crate::stats;

    fn window(d: u32, variant: Variant, n_scale: u64, radius: f64, n_max: u64) -> SoupWindow {
        SoupWindow {
            d,
            variant,
            n_scale,
            radius,
            n_min: 1,
            n_max,
            lambda_levels: vec![0.25, 0.5, 1.0],
        }
    }

    #[test]
    fn field_counts_match_poisson_mean() {
        let w = window(2, Variant::Continuous, 8, 2.0, 64);
        let root = RootSeed::from_u64(100);
        let field = sample_poisson_field(&w, &root, None).unwrap();
        let cells = w.lattice_points().len() as f64;
        let q1 = cell_mass(2, Variant::Continuous, 1).unwrap();
        let n1_count = field.arrivals_at(1.0).filter(|a| a.n == 1).count() as f64;
        let mean = cells * q1;
        let sd = mean.sqrt();
        assert!(
            (n1_count - mean).abs() < 4.0 * sd,
            "count {n1_count} vs mean {mean}"
        );
        // Zero intensity: empty.
        assert_eq!(field.arrivals_at(0.0).count(), 0);
    }

    #[test]
    fn field_monotone_in_lambda() {
        let w = window(2, Variant::Discrete, 4, 2.0, 32);
        let root = RootSeed::from_u64(101);
        let field = sample_poisson_field(&w, &root, None).unwrap();
        let low: Vec<_> = field.arrivals_at(0.25).map(|a| (a.n, a.z, a.m)).collect();
        let high: Vec<_> = field.arrivals_at(1.0).map(|a| (a.n, a.z, a.m)).collect();
        for key in &low {
            assert!(high.contains(key));
        }
        assert!(high.len() >= low.len());
    }

    #[test]
    fn memory_guard_trips() {
        let w = window(2, Variant::Continuous, 64, 4.0, 1000);
        let root = RootSeed::from_u64(102);
        let err = sample_poisson_field(&w, &root, Some(10.0)).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn cell_sampler_matches_masses() {
        let s = CellIndexSampler::build(2, Variant::Discrete, 1, 40).unwrap();
        let mut direct = 0.0;
        for n in 1..=40u64 {
            direct += masses::q_discrete(2, n).unwrap();
        }
        approx::assert_relative_eq!(s.total_mass(), direct, max_relative = 1e-11);
        // Frequencies proportional to masses.
        let root = RootSeed::from_u64(103);
        let mut stream = RandomStream::derive(&root, &StreamKey::simple(purpose::FIELD, 77));
        let reps = 40_000;
        let mut counts = vec![0usize; 41];
        for _ in 0..reps {
            counts[s.sample(&mut stream) as usize] += 1;
        }
        let mut observed = Vec::new();
        let mut expected = Vec::new();
        for n in 1..=40u64 {
            let e = masses::q_discrete(2, n).unwrap() / direct * reps as f64;
            if e >= 5.0 {
                observed.push(counts[n as usize] as f64);
                expected.push(e);
            }
        }
        let (_, p) = stats::chi_square_pvalue(&observed, &expected);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn cell_sampler_spans_reachable() {
        // Force the span machinery with a tiny dense limit via a large n_max.
        let s = CellIndexSampler::build(2, Variant::Continuous, 1, 100_000).unwrap();
        assert!(s.total_mass() > 0.0);
        let root = RootSeed::from_u64(104);
        let mut stream = RandomStream::derive(&root, &StreamKey::simple(purpose::FIELD, 78));
        let mut seen_tail = false;
        for _ in 0..200_000 {
            let n = s.sample(&mut stream);
            assert!((1..=100_000).contains(&n));
            if n > DENSE_CELL_LIMIT {
                seen_tail = true;
            }
        }
        // The tail has ~1e-4 relative mass; 2e5 draws make it near-certain.
        assert!(seen_tail, "no draw landed beyond the dense table");
    }

    #[test]
    fn walk_durations_in_cell_and_ks() {
        let d = 2;
        let root = RootSeed::from_u64(105);
        let n = 3u64;
        let q_total = masses::q_cell_continuous(d, n).unwrap().0;
        let f = |t: f64| masses::q_continuous(d, t).unwrap();
        let mut pit = Vec::new();
        for m in 0..4000u64 {
            let t = walk_duration(d, Variant::Continuous, n, [1, -2, 0], m, &root);
            assert!((6.0..8.0).contains(&t), "t = {t}");
            pit.push(quad::adaptive(6.0, t, 1e-12, &f).0 / q_total);
        }
        let (_, p) = stats::ks_test(&mut pit, |x| x.clamp(0.0, 1.0));
        assert!(p > 0.01, "KS p = {p}");
    }

    #[test]
    fn brownian_durations_in_cell_and_exact_pit() {
        let seq = build_a_sequence(2, Variant::Continuous, 64).unwrap();
        let root = RootSeed::from_u64(106);
        let n = 5u64;
        let (a_lo, a_hi) = seq.cell(n).unwrap();
        let (s_lo, s_hi) = seq.s_pair(n).unwrap();
        let mut pit = Vec::new();
        for m in 0..4000u64 {
            let t = brownian_duration(&seq, n, [0, 3, 0], m, &root).unwrap();
            assert!(t >= a_lo && t < a_hi, "t = {t} not in [{a_lo}, {a_hi})");
            pit.push((s_lo - t.powf(-1.0)) / (s_lo - s_hi));
        }
        let (_, p) = stats::ks_test(&mut pit, |x| x.clamp(0.0, 1.0));
        assert!(p > 0.01, "KS p = {p}");
    }

    #[test]
    fn coupled_soup_pairing_and_time_gap() {
        for variant in [Variant::Discrete, Variant::Continuous] {
            let w = window(2, variant, 4, 1.5, 64);
            let root = RootSeed::from_u64(107);
            let seq = build_a_sequence(2, variant, 64).unwrap();
            let field = sample_poisson_field(&w, &root, None).unwrap();
            let pair = build_coupled_soup(&field, &seq, 1.0, &root).unwrap();
            assert_eq!(pair.rw_soup.len(), pair.br_soup.len());
            assert_eq!(pair.rw_soup.len(), pair.pairing.len());
            for (ri, bi, prov) in &pair.pairing {
                let rw = &pair.rw_soup[*ri];
                let br = &pair.br_soup[*bi];
                rw.validate().unwrap();
                br.validate().unwrap();
                // Hard per-pair gap bound from the boundary table.
                let gap = (prov.brownian_duration - prov.walk_duration / 2.0).abs();
                let bound = seq.time_gap_bound(prov.n).unwrap();
                assert!(
                    gap <= bound + 1e-9,
                    "gap {gap} exceeds bound {bound} at n={}",
                    prov.n
                );
                // Roots: brownian root lies in the unit cell of z.
                for i in 0..2 {
                    let off = br.root[i] - prov.z[i] as f64;
                    assert!(off > -0.5 && off <= 0.5);
                }
            }
        }
    }

    #[test]
    fn soups_monotone_and_loops_shared() {
        let w = window(1, Variant::Discrete, 3, 2.0, 32);
        let root = RootSeed::from_u64(108);
        let seq = build_a_sequence(1, Variant::Discrete, 32).unwrap();
        let field = sample_poisson_field(&w, &root, None).unwrap();
        let small = build_coupled_soup(&field, &seq, 0.25, &root).unwrap();
        let big = build_coupled_soup(&field, &seq, 1.0, &root).unwrap();
        assert!(big.rw_soup.len() >= small.rw_soup.len());
        // Every loop of the small soup appears identically in the big one.
        for rw in &small.rw_soup {
            assert!(big.rw_soup.contains(rw));
        }
        for br in &small.br_soup {
            assert!(big.br_soup.contains(br));
        }
    }

    #[test]
    fn rw_soup_walks_match_coupled_walks() {
        let w = window(2, Variant::Continuous, 3, 1.0, 32);
        let root = RootSeed::from_u64(109);
        let seq = build_a_sequence(2, Variant::Continuous, 32).unwrap();
        let field = sample_poisson_field(&w, &root, None).unwrap();
        let rw = build_rw_soup(&field, 1.0, &root).unwrap();
        let coupled = build_coupled_soup(&field, &seq, 1.0, &root).unwrap();
        assert_eq!(rw.len(), coupled.rw_soup.len());
        for (a, b) in rw.iter().zip(&coupled.rw_soup) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn direct_soup_counts_and_range() {
        let w = window(2, Variant::Continuous, 4, 1.5, 16);
        let root = RootSeed::from_u64(110);
        let t_min = 2.5;
        let soup = sample_brownian_soup_direct(&w, t_min, 1.0, &root).unwrap();
        for l in &soup {
            assert!(l.t_len >= t_min);
            l.validate().unwrap();
        }
        let cells = w.lattice_points().len() as f64;
        let mean = cells * (2.0 * PI).powf(-1.0) * t_min.powf(-1.0);
        let count = soup.len() as f64;
        assert!(
            (count - mean).abs() < 4.0 * mean.sqrt(),
            "{count} vs {mean}"
        );
        assert!(sample_brownian_soup_direct(&w, 0.0, 1.0, &root).is_err());
    }

    #[test]
    fn subthreshold_samplers_respect_ranges() {
        let w = window(2, Variant::Continuous, 2, 1.0, 8);
        let root = RootSeed::from_u64(111);
        let seq = build_a_sequence(2, Variant::Continuous, 8).unwrap();
        let rw = sample_subthreshold_rw(&w, 0.5, 2.0, &root).unwrap();
        for l in &rw {
            assert!(l.t_len >= 0.5 && l.t_len < 2.0);
            l.validate().unwrap();
        }
        let br = sample_subthreshold_brownian(&w, &seq, 0.2, 2.0, &root).unwrap();
        for l in &br {
            assert!(l.t_len >= 0.2 && l.t_len <= seq.a[0]);
        }
        // Discrete variant has no sub-threshold walk loops.
        let wd = window(2, Variant::Discrete, 2, 1.0, 8);
        assert!(sample_subthreshold_rw(&wd, 0.5, 2.0, &root)
            .unwrap()
            .is_empty());
    }
}
