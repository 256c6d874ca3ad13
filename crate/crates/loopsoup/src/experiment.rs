//! The full coupled-soup verification pipeline: build both soups on a window
//! at scale N, apply the scaling maps, form the one-to-one correspondence
//! between the large-loop sets, classify failure events, and report the
//! discrepancy statistics.

use crate::error::{Error, Result};
use crate::masses::{self, Variant};
use crate::rng::RootSeed;
use crate::sequences::{build_a_sequence, psi_vertex, ASequence, CellTime};
use crate::soup::{build_coupled_arrival, sample_poisson_field, CoupledArrival, SoupWindow};
use crate::stats;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d: u32,
    pub variant: Variant,
    /// Spatial scale N.
    pub n_scale: u64,
    /// Window radius r (macroscopic units).
    pub radius: f64,
    pub lambda: f64,
    /// Time-threshold exponent theta in (0, 2): loops with scaled time length
    /// above N^{theta-2} enter the correspondence.
    pub theta: f64,
    /// Failure-probability exponent a > 0.
    pub a: f64,
    pub reps: u32,
    pub seed: u64,
    /// Memory guard on the expected loop count per rep.
    #[serde(default = "default_loop_cap")]
    pub max_expected_loops: f64,
    /// Replications used to fit the coupling constant.
    #[serde(default = "default_calibration_reps")]
    pub calibration_reps: usize,
    /// Override the classification threshold (diagnostics only).
    #[serde(default)]
    pub threshold_override: Option<f64>,
}

fn default_loop_cap() -> f64 {
    2.0e7
}

fn default_calibration_reps() -> usize {
    200
}

impl ExperimentConfig {
    /// Cell-growth exponent k = 2 + 2a/d; cells up to N^k are simulated.
    pub fn k(&self) -> f64 {
        2.0 + 2.0 * self.a / self.d as f64
    }

    /// Tail exponent eta = (a + d) / theta used by the calibration quantile.
    pub fn eta(&self) -> f64 {
        (self.a + self.d as f64) / self.theta
    }

    /// Cell threshold: loops qualify when n > N^theta.
    pub fn n_theta(&self) -> f64 {
        (self.n_scale as f64).powf(self.theta)
    }

    /// Simulated cell cap ceil(N^k).
    pub fn n_cells_max(&self) -> u64 {
        (self.n_scale as f64).powf(self.k()).ceil() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.d > 3 {
            return Err(Error::Config("dimension must be 1..=3".into()));
        }
        if self.n_scale < 1 {
            return Err(Error::Config("scale N must be >= 1".into()));
        }
        if self.radius < 1.0 {
            return Err(Error::Config("radius must be >= 1 (got below 1)".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be > 0".into()));
        }
        if !(self.theta > 0.0 && self.theta < 2.0) {
            return Err(Error::Config(format!(
                "theta must lie in the open interval (0, 2), got {}",
                self.theta
            )));
        }
        if !(self.a > 0.0) {
            return Err(Error::Config("a must be > 0".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-pair summary kept after the loop paths are dropped.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PairSummary {
    pub n: u64,
    pub z: [i64; 3],
    pub m: u64,
    pub in_correspondence: bool,
    /// Unscaled sup_s |walk(s T~) - brownian(s T)| (loops compared at equal
    /// fractions, shared root removed); NaN when not computed.
    pub sup_unscaled: f64,
    /// |T - T~/d|, before the N^{-2} scaling.
    pub time_gap_unscaled: f64,
    /// Deterministic bound on the gap from the boundary table.
    pub gap_bound: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingReport {
    pub config: ExperimentConfig,
    pub k: f64,
    pub eta: f64,
    /// Total correspondence size across reps.
    pub correspondence_size: u64,
    /// Max over pairs of the scaled gap |t_brownian - t_walk|.
    pub time_gap_max: f64,
    /// The deterministic scaled bound (tail_constant + 2/d) N^{-2}.
    pub time_gap_bound: f64,
    /// Percentiles (50, 90, 99, 100) of the scaled sup distance over pairs
    /// in the correspondence, pooled across reps.
    pub sup_dist_percentiles: [f64; 4],
    /// Pairs in the classification band whose unscaled sup distance reached
    /// the calibrated threshold.
    pub event_a_count: u64,
    /// The unscaled threshold used (3 k c_fit log N, with an extra N^{k/4}
    /// for the discrete walk in d >= 3).
    pub event_a_threshold: f64,
    /// Fitted coupling constant c(eta, d).
    pub fitted_c: f64,
    /// Occupied cells with n >= N^k (within the simulated range).
    pub large_n_count: u64,
    /// Arrivals with N^theta < n < N^k, summed over reps.
    pub w_total: u64,
    /// Arrivals with n >= N^k, summed over reps.
    pub z_total: u64,
    /// Analytic probability that any cell beyond the simulated cap is
    /// occupied in one rep.
    pub tail_occupancy_prob: f64,
    /// Fraction of reps with any failure event (sup threshold or large n).
    pub failure_frequency: f64,
    /// Boundary ties resolved by the deterministic rule (expected 0).
    pub tie_events: u64,
}

/// Classify failures among pair summaries: pairs in the band
/// N^theta < n < N^k whose sup reaches the threshold, and occupied cells with
/// n >= N^k.
pub fn classify_failures(
    pairs: &[PairSummary],
    config: &ExperimentConfig,
    threshold: f64,
) -> (Vec<usize>, Vec<usize>) {
    let n_theta = config.n_theta();
    let n_k = (config.n_scale as f64).powf(config.k());
    let mut event_a = Vec::new();
    let mut large_n = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let nf = p.n as f64;
        if nf >= n_k {
            large_n.push(i);
        } else if nf > n_theta && p.sup_unscaled.is_finite() && p.sup_unscaled >= threshold {
            event_a.push(i);
        }
    }
    (event_a, large_n)
}

struct RepOutcome {
    pairs: Vec<PairSummary>,
    sup_scaled: Vec<f64>,
    time_gap_max_scaled: f64,
    tie_events: u64,
    walk_set: u64,
    brownian_set: u64,
}

/// Run the coupled-soup experiment and verify the correspondence.
///
/// Per rep: a Poisson field on |z| <= rN with cells up to ceil(N^k), the
/// coupled pair for every arrival, the two large-loop sets
/// (walk: t > N^{theta-2} at cell resolution; Brownian: chi_N(t) > N^{theta-2}
/// and |psi_N(root)| < r), the bijection check, per-pair deterministic gap
/// bounds, and classification of rare events.
pub fn run_experiment(config: &ExperimentConfig) -> Result<CouplingReport> {
    config.validate()?;
    let d = config.d;
    let variant = config.variant;
    let n_scale = config.n_scale;
    let n_max = config.n_cells_max();
    let seq = build_a_sequence(d, variant, n_max.min(20_000))?;

    // Calibrate the coupling constant at the threshold scale with the
    // (1 - N^{-a-d}) quantile, clamped to what the sample resolves.
    let cal_root = RootSeed::from_u64(config.seed ^ 0x9e3779b97f4a7c15);
    let n_cal = (config.n_theta().round() as u64).max(2);
    let q = 1.0 - (n_scale as f64).powf(-(config.a + d as f64));
    let fitted_c = crate::coupling::calibrate_coupling_constant(
        d,
        variant,
        n_cal,
        config.calibration_reps,
        q,
        &cal_root,
    )?;
    let ln_n = (n_scale as f64).max(2.0).ln();
    let shape_at_n = match (variant, d) {
        (Variant::Discrete, dd) if dd >= 3 => (n_scale as f64).powf(config.k() / 4.0) * ln_n,
        _ => ln_n,
    };
    let threshold = config
        .threshold_override
        .unwrap_or(3.0 * config.k() * fitted_c * shape_at_n);

    let window = SoupWindow {
        d,
        variant,
        n_scale,
        radius: config.radius,
        n_min: 1,
        n_max,
        lambda_levels: vec![config.lambda],
    };
    window.validate()?;

    let n_theta = config.n_theta();
    let rn = config.radius * n_scale as f64;
    let n2 = (n_scale * n_scale) as f64;

    let outcomes: Result<Vec<RepOutcome>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let root = RootSeed::from_u64(
                config.seed
                    ^ (rep as u64)
                        .wrapping_mul(0xd1342543de82ef95)
                        .wrapping_add(1),
            );
            let field = sample_poisson_field(&window, &root, Some(config.max_expected_loops))?;
            let mut pairs = Vec::with_capacity(field.arrivals.len());
            let mut sup_scaled = Vec::new();
            let mut gap_max = 0.0f64;
            let mut ties = 0u64;
            let mut walk_set = 0u64;
            let mut brownian_set = 0u64;
            for arrival in &field.arrivals {
                let ca = build_coupled_arrival(d, variant, &seq, arrival, &root)?;
                let summary = check_pair(&ca, &seq, config, n_theta, rn, n2, &mut ties)?;
                if summary.in_correspondence {
                    walk_set += 1;
                    brownian_set += 1;
                    sup_scaled.push(summary.sup_unscaled / n_scale as f64);
                }
                gap_max = gap_max.max(summary.time_gap_unscaled / n2);
                pairs.push(summary);
            }
            // The two large-loop sets must match exactly, pair by pair.
            if walk_set != brownian_set {
                return Err(Error::Domain(format!(
                    "correspondence cardinality mismatch: {walk_set} vs {brownian_set}"
                )));
            }
            Ok(RepOutcome {
                pairs,
                sup_scaled,
                time_gap_max_scaled: gap_max,
                tie_events: ties,
                walk_set,
                brownian_set,
            })
        })
        .collect();
    let outcomes = outcomes?;

    let mut all_sups: Vec<f64> = Vec::new();
    let mut correspondence = 0u64;
    let mut gap_max = 0.0f64;
    let mut event_a_count = 0u64;
    let mut large_n_count = 0u64;
    let mut w_total = 0u64;
    let mut z_total = 0u64;
    let mut failures = 0u64;
    let mut tie_events = 0u64;
    let n_k = (n_scale as f64).powf(config.k());
    for o in &outcomes {
        debug_assert_eq!(o.walk_set, o.brownian_set);
        correspondence += o.walk_set;
        gap_max = gap_max.max(o.time_gap_max_scaled);
        all_sups.extend_from_slice(&o.sup_scaled);
        tie_events += o.tie_events;
        let (ea, ln) = classify_failures(&o.pairs, config, threshold);
        event_a_count += ea.len() as u64;
        large_n_count += ln.len() as u64;
        if !ea.is_empty() || !ln.is_empty() {
            failures += 1;
        }
        for p in &o.pairs {
            let nf = p.n as f64;
            if nf > n_theta && nf < n_k {
                w_total += 1;
            }
            if nf >= n_k {
                z_total += 1;
            }
        }
    }
    all_sups.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| -> f64 {
        if all_sups.is_empty() {
            f64::NAN
        } else {
            stats::quantile_sorted(&all_sups, q)
        }
    };
    let (tail_mass, _) = masses::mass_tail_sum(d, variant, n_max + 1)?;
    let cells = window.lattice_points().len() as f64;
    let tail_occupancy_prob = 1.0 - (-config.lambda * cells * tail_mass).exp();

    Ok(CouplingReport {
        config: config.clone(),
        k: config.k(),
        eta: config.eta(),
        correspondence_size: correspondence,
        time_gap_max: gap_max,
        time_gap_bound: (seq.tail_constant + 2.0 / d as f64) / n2,
        sup_dist_percentiles: [pct(0.50), pct(0.90), pct(0.99), pct(1.0)],
        event_a_count,
        event_a_threshold: threshold,
        fitted_c,
        large_n_count,
        w_total,
        z_total,
        tail_occupancy_prob,
        failure_frequency: failures as f64 / config.reps as f64,
        tie_events,
    })
}

#[allow(clippy::too_many_arguments)]
fn check_pair(
    ca: &CoupledArrival,
    seq: &ASequence,
    config: &ExperimentConfig,
    n_theta: f64,
    rn: f64,
    n2: f64,
    ties: &mut u64,
) -> Result<PairSummary> {
    let d = config.d as usize;
    let n_scale = config.n_scale;
    // Deterministic per-pair time gap bound: T in [a_n, a_{n+1}], T~/d in
    // [2n/d, (2n+2)/d].
    let gap = (ca.duration - ca.walk_duration / config.d as f64).abs();
    let bound = seq.time_gap_bound(ca.n)?;
    assert!(
        gap <= bound + 1e-9,
        "time gap {gap} exceeds bound {bound} in cell n={}",
        ca.n
    );

    // Literal rounding maps on the scaled Brownian loop. The scaled loop has
    // time length T/N^2 and root (z + Y)/N.
    let t_scaled = ca.duration / n2;
    match seq.chi(t_scaled, n_scale)? {
        CellTime::Cell { index, .. } => {
            if index != ca.n {
                // Only a floating tie at a cell boundary can do this.
                let (a_lo, a_hi) = seq.cell(ca.n)?;
                let near = (ca.duration - a_lo).abs().min((ca.duration - a_hi).abs());
                assert!(
                    near <= 1e-9 * ca.duration,
                    "chi cell {index} != {} away from any boundary",
                    ca.n
                );
                *ties += 1;
            }
        }
        CellTime::SubThreshold => {
            return Err(Error::Domain("coupled loop below first cell".into()))
        }
    }
    let scaled_root: Vec<f64> = (0..d)
        .map(|i| (ca.z[i] as f64 + ca.jitter[i]) / n_scale as f64)
        .collect();
    let snapped = psi_vertex(&scaled_root, n_scale);
    for i in 0..d {
        if snapped[i] != ca.z[i] {
            let off = ca.jitter[i].abs();
            assert!(
                (off - 0.5).abs() < 1e-9,
                "snap map returned {:?} for cell {:?}",
                snapped,
                &ca.z[..d]
            );
            *ties += 1;
        }
    }

    // Correspondence membership at cell resolution. The chi comparison
    // chi_N(t) > N^{theta-2} is the same inequality: chi returns n/N^2, so
    // both sides reduce to n > N^theta.
    let nf = ca.n as f64;
    let in_time = nf > n_theta;
    let z_norm = (0..d)
        .map(|i| (ca.z[i] * ca.z[i]) as f64)
        .sum::<f64>()
        .sqrt();
    let in_space = z_norm < rn;
    let in_corr = in_time && in_space;

    // The sup is needed for classification (band above N^theta) and for the
    // correspondence statistics; skip it for the small loops outside both.
    let sup = if nf > n_theta {
        ca.full_sup_distance()
    } else {
        f64::NAN
    };
    Ok(PairSummary {
        n: ca.n,
        z: ca.z,
        m: ca.m,
        in_correspondence: in_corr,
        sup_unscaled: sup,
        time_gap_unscaled: gap,
        gap_bound: bound,
    })
}

/// Result of the failure-probability scaling study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingFit {
    /// (N, failure frequency) observations.
    pub points: Vec<(u64, f64)>,
    /// Log-log slope and its standard error; None when the frequencies are
    /// all zero (censored: only an upper bound is informative).
    pub slope: Option<(f64, f64)>,
    /// Upper confidence bound on the frequency at the largest N when
    /// censored (rule of three).
    pub censored_upper_bound: Option<f64>,
}

/// Log-log regression of failure frequency against N over a grid of
/// experiment configs (at least 4 scales).
pub fn failure_scaling_study(configs: &[ExperimentConfig]) -> Result<ScalingFit> {
    if configs.len() < 4 {
        return Err(Error::Config("need at least 4 scales".into()));
    }
    let mut points = Vec::with_capacity(configs.len());
    for c in configs {
        let report = run_experiment(c)?;
        points.push((c.n_scale, report.failure_frequency));
    }
    let positive: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, f)| *f > 0.0)
        .map(|&(n, f)| ((n as f64).ln(), f.ln()))
        .collect();
    if positive.len() < 2 {
        let reps = configs.last().unwrap().reps as f64;
        return Ok(ScalingFit {
            points,
            slope: None,
            censored_upper_bound: Some(3.0 / reps),
        });
    }
    let xs: Vec<f64> = positive.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = positive.iter().map(|p| p.1).collect();
    let (slope, _, se) = stats::linear_fit(&xs, &ys);
    Ok(ScalingFit {
        points,
        slope: Some((slope, se)),
        censored_upper_bound: None,
    })
}

/// Study of the discrete-walk coupling in d >= 3: the 99th-percentile sup
/// distance across an N grid, normalized by the expected shape
/// N^{(a-d)/(2d)} log N after scaling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct D3Study {
    pub per_scale: Vec<CouplingReport>,
    /// (N, p99 scaled sup / (N^{(a-d)/(2d)} log N)).
    pub normalized: Vec<(u64, f64)>,
    pub ratio_spread: f64,
}

pub fn discrete_d3_study(base: &ExperimentConfig, grid: &[u64]) -> Result<D3Study> {
    if base.d < 3 || base.variant != Variant::Discrete {
        return Err(Error::Config(
            "the d3 study needs the discrete variant in dimension >= 3".into(),
        ));
    }
    let mut per_scale = Vec::new();
    let mut normalized = Vec::new();
    for &n in grid {
        let mut c = base.clone();
        c.n_scale = n;
        let report = run_experiment(&c)?;
        let nf = n as f64;
        let shape = nf.powf((base.a - base.d as f64) / (2.0 * base.d as f64)) * nf.max(2.0).ln();
        normalized.push((n, report.sup_dist_percentiles[2] / shape));
        per_scale.push(report);
    }
    let vals: Vec<f64> = normalized
        .iter()
        .map(|p| p.1)
        .filter(|v| v.is_finite())
        .collect();
    let spread = if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().cloned().fold(f64::MIN, f64::max)
            / vals.iter().cloned().fold(f64::MAX, f64::min)
    };
    Ok(D3Study {
        per_scale,
        normalized,
        ratio_spread: spread,
    })
}

/// Scale-grid verification: one report per N plus the normalized
/// 99th-percentile trace q99(N) / (N^{-1} log N).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub per_scale: Vec<CouplingReport>,
    pub sup99_over_rate: Vec<(u64, f64)>,
    pub ratio_spread: f64,
    /// True when every pair in every rep satisfied the deterministic gap
    /// bound (the runs panic otherwise, so this is informational).
    pub time_gap_ok: bool,
}

pub fn verify_scale_grid(base: &ExperimentConfig, grid: &[u64]) -> Result<VerifyReport> {
    let mut per_scale = Vec::new();
    let mut normalized = Vec::new();
    let mut gap_ok = true;
    for &n in grid {
        let mut c = base.clone();
        c.n_scale = n;
        let report = run_experiment(&c)?;
        let nf = n as f64;
        let rate = nf.max(2.0).ln() / nf;
        normalized.push((n, report.sup_dist_percentiles[2] / rate));
        gap_ok &= report.time_gap_max <= report.time_gap_bound + 1e-9;
        per_scale.push(report);
    }
    let vals: Vec<f64> = normalized
        .iter()
        .map(|p| p.1)
        .filter(|v| v.is_finite())
        .collect();
    let spread = if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().cloned().fold(f64::MIN, f64::max)
            / vals.iter().cloned().fold(f64::MAX, f64::min)
    };
    Ok(VerifyReport {
        per_scale,
        sup99_over_rate: normalized,
        ratio_spread: spread,
        time_gap_ok: gap_ok,
    })
}
