//! The increasing cell-boundary sequence {a_n} and the scaling/rounding maps
//! between lattice and continuum loops.
//!
//! The sequence is defined by a_1 = (2pi)^{-1} ((d/2) * total mass)^{-2/d}
//! and the telescoping a_n^{-d/2} - a_{n+1}^{-d/2} = (2pi)^{d/2} (d/2) mass(n),
//! which makes the power-law time density (2pi)^{-d/2} s^{-d/2-1} put exactly
//! mass(n) on the cell [a_n, a_{n+1}]. It satisfies a_n = 2n/d + O(1).
//!
//! a_n is computed from the tail sum S_n = sum_{k>=n} (2pi)^{d/2}(d/2) mass(k)
//! (backward accumulation with an asymptotic tail closure), never by forward
//! subtraction, so relative precision is uniform in n.

use crate::error::{Error, Result};
use crate::loops::{Flavor, RootedLoop};
use crate::masses::{self, Variant};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Result of the cell-rounding map chi_N (and of the legacy map varphi_N).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellTime {
    /// Rounded time k/N^2 together with the cell index k.
    Cell { index: u64, value: f64 },
    /// Below the first cell boundary; the caller classifies, never crashes.
    SubThreshold,
}

impl CellTime {
    pub fn value(&self) -> Option<f64> {
        match self {
            CellTime::Cell { value, .. } => Some(*value),
            CellTime::SubThreshold => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ASequence {
    pub d: u32,
    pub variant: Variant,
    /// Densely tabulated range: boundaries a_1 ..= a_{n_dense+1}.
    pub n_dense: u64,
    /// `a[k]` = a_{k+1} for k = 0..=n_dense.
    pub a: Vec<f64>,
    /// Subtracted masses (2pi)^{d/2} (d/2) mass(n), n = 1..=n_dense.
    pub increments: Vec<f64>,
    /// Tail sums `s[k]` = S_{k+1} = a_{k+1}^{-d/2}; kept so cell-time inversion
    /// and boundary checks share bit-identical quantities.
    pub s: Vec<f64>,
    /// Measured sup_n |a_n - 2n/d| over the dense range.
    pub tail_constant: f64,
    /// Max over n of |mass(n) - (2pi)^{-d/2} int_{a_n}^{a_{n+1}} s^{-d/2-1}|.
    pub max_identity_residual: f64,
    /// Accumulated absolute error bound on the S_n values.
    pub err_accum: f64,
}

impl ASequence {
    pub fn prefactor(d: u32) -> f64 {
        (2.0 * PI).powf(d as f64 / 2.0) * d as f64 / 2.0
    }

    /// Boundary a_n; dense lookup below the tabulated range, lazy tail
    /// evaluation beyond it.
    pub fn boundary(&self, n: u64) -> Result<f64> {
        assert!(n >= 1);
        if n <= self.n_dense + 1 {
            Ok(self.a[(n - 1) as usize])
        } else {
            let (s_n, _) = self.lazy_s(n)?;
            Ok(s_to_a(self.d, s_n))
        }
    }

    /// The tail-sum pair (S_n, S_{n+1}) with S_n - S_{n+1} equal to the cell
    /// increment exactly as accumulated; the continuum time length of a loop
    /// in cell n is drawn by inverting S between these two values.
    pub fn s_pair(&self, n: u64) -> Result<(f64, f64)> {
        assert!(n >= 1);
        if n <= self.n_dense {
            Ok((self.s[(n - 1) as usize], self.s[n as usize]))
        } else {
            let (s_next, _) = self.lazy_s(n + 1)?;
            let mass = self.mass(n)?;
            Ok((s_next + Self::prefactor(self.d) * mass, s_next))
        }
    }

    /// Cell boundaries (a_n, a_{n+1}).
    pub fn cell(&self, n: u64) -> Result<(f64, f64)> {
        let (s_n, s_next) = self.s_pair(n)?;
        Ok((s_to_a(self.d, s_n), s_to_a(self.d, s_next)))
    }

    /// Per-cell mass from the defining table.
    pub fn mass(&self, n: u64) -> Result<f64> {
        if n <= self.n_dense {
            Ok(self.increments[(n - 1) as usize] / Self::prefactor(self.d))
        } else {
            match self.variant {
                Variant::Discrete => masses::q_discrete(self.d, n),
                Variant::Continuous => Ok(masses::q_cell_continuous(self.d, n)?.0),
            }
        }
    }

    fn lazy_s(&self, n: u64) -> Result<(f64, f64)> {
        let (tail, err) = masses::mass_tail_sum(self.d, self.variant, n)?;
        Ok((Self::prefactor(self.d) * tail, err))
    }

    /// Deterministic upper bound on |T - T~/d| for any coupled pair in cell
    /// n: the span of the union of [a_n, a_{n+1}] and [2n/d, (2n+2)/d].
    pub fn time_gap_bound(&self, n: u64) -> Result<f64> {
        let (a_lo, a_hi) = self.cell(n)?;
        let w_lo = 2.0 * n as f64 / self.d as f64;
        let w_hi = (2.0 * n as f64 + 2.0) / self.d as f64;
        Ok(a_hi.max(w_hi) - a_lo.min(w_lo))
    }

    /// chi_N: round a scaled time length onto the cell grid {a_k / N^2}.
    /// Constant exactly on [a_k/N^2, a_{k+1}/N^2); sub-threshold below
    /// a_1/N^2.
    pub fn chi(&self, t: f64, n_scale: u64) -> Result<CellTime> {
        if !(t > 0.0) {
            return Err(Error::Domain("time must be positive".into()));
        }
        let n2 = (n_scale * n_scale) as f64;
        let x = t * n2;
        if x < self.a[0] {
            return Ok(CellTime::SubThreshold);
        }
        let last_dense = self.a[self.n_dense as usize];
        if x < last_dense {
            // partition_point gives the count of boundaries <= x.
            let k = self.a.partition_point(|&b| b <= x) as u64;
            return Ok(CellTime::Cell {
                index: k,
                value: k as f64 / n2,
            });
        }
        // Lazy geometric bracket beyond the dense table.
        let mut lo = self.n_dense + 1; // a_lo <= x holds here
        let mut hi = lo * 2;
        while self.boundary(hi)? <= x {
            lo = hi;
            hi *= 2;
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.boundary(mid)? <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(CellTime::Cell {
            index: lo,
            value: lo as f64 / n2,
        })
    }
}

fn s_to_a(d: u32, s: f64) -> f64 {
    s.powf(-2.0 / d as f64)
}

/// Build the sequence for n = 1..=n_max (dense), with masses, boundaries and
/// identity residuals recorded.
pub fn build_a_sequence(d: u32, variant: Variant, n_max: u64) -> Result<ASequence> {
    if n_max < 1 {
        return Err(Error::Domain("n_max must be >= 1".into()));
    }
    let pref = ASequence::prefactor(d);
    let count = (n_max + 1) as usize;

    // Masses for n = 1..=n_max+1 plus per-entry error bounds.
    let (mass, mass_err): (Vec<f64>, Vec<f64>) = match variant {
        Variant::Continuous => (1..=n_max + 1)
            .into_par_iter()
            .map(|n| masses::q_cell_continuous(d, n).expect("valid cell"))
            .collect::<Vec<_>>()
            .into_iter()
            .unzip(),
        Variant::Discrete => match d {
            1 | 2 => {
                let mut m = Vec::with_capacity(count);
                let mut e = Vec::with_capacity(count);
                let mut r1 = 1.0f64;
                for n in 1..=n_max + 1 {
                    r1 *= (2 * n - 1) as f64 / (2 * n) as f64;
                    let p = if d == 1 { r1 } else { r1 * r1 };
                    m.push(p / (2 * n) as f64);
                    e.push(p * 1e-13);
                }
                (m, e)
            }
            _ => (1..=n_max + 1)
                .into_par_iter()
                .map(|n| {
                    let q = masses::q_discrete(d, n).expect("valid cell");
                    (q, q * 1e-10)
                })
                .collect::<Vec<_>>()
                .into_iter()
                .unzip(),
        },
    };

    let (tail, tail_err) = masses::mass_tail_sum(d, variant, n_max + 2)?;
    let err_accum = pref * (tail_err + mass_err.iter().sum::<f64>());

    // Backward telescoping: s[k] = S_{k+1}.
    let mut s = vec![0.0f64; count + 1];
    s[count] = pref * tail; // S_{n_max+2}
    for k in (0..count).rev() {
        s[k] = s[k + 1] + pref * mass[k];
    }

    if s[(n_max - 1) as usize] < 10.0 * err_accum {
        return Err(Error::Precision(format!(
            "tail sum at n_max={n_max} is {:.3e}, below 10x the accumulated error {:.3e}",
            s[(n_max - 1) as usize],
            err_accum
        )));
    }

    let a: Vec<f64> = s[..count].iter().map(|&x| s_to_a(d, x)).collect();

    let df = d as f64;
    let mut tail_constant = 0.0f64;
    for (k, &ak) in a.iter().enumerate() {
        let n = (k + 1) as f64;
        tail_constant = tail_constant.max((ak - 2.0 * n / df).abs());
    }

    // Identity residual from the stored boundaries (round-tripped through a).
    let mut max_identity_residual = 0.0f64;
    for n in 1..=n_max as usize {
        let lhs = mass[n - 1];
        let integral = (2.0 / df) * (a[n - 1].powf(-df / 2.0) - a[n].powf(-df / 2.0));
        let rhs = (2.0 * PI).powf(-df / 2.0) * integral;
        max_identity_residual = max_identity_residual.max((lhs - rhs).abs());
    }

    let increments: Vec<f64> = mass[..n_max as usize].iter().map(|&m| pref * m).collect();

    Ok(ASequence {
        d,
        variant,
        n_dense: n_max,
        a,
        increments,
        s,
        tail_constant,
        max_identity_residual,
        err_accum,
    })
}

/// psi_N: snap a point of R^d onto the rescaled lattice Z^d / N.
///
/// N z is assigned to the lattice vertex whose surrounding unit hypercube
/// contains it; boundary ties (half-integer coordinates) go to the lower
/// vertex, so the cells are (z0 - 1/2, z0 + 1/2] per coordinate.
pub fn psi(z: &[f64], n_scale: u64) -> Vec<f64> {
    let nf = n_scale as f64;
    z.iter().map(|&zi| (nf * zi - 0.5).ceil() / nf).collect()
}

/// The lattice vertex z0 itself (psi before dividing by N).
pub fn psi_vertex(z: &[f64], n_scale: u64) -> Vec<i64> {
    let nf = n_scale as f64;
    z.iter().map(|&zi| (nf * zi - 0.5).ceil() as i64).collect()
}

/// The legacy rounding map: k/N^2 on [(k-3/8)/N^2, (k+5/8)/N^2), defined for
/// t >= (5/8) N^{-2}; retained for side-by-side comparison experiments.
pub fn varphi(t: f64, n_scale: u64) -> CellTime {
    let n2 = (n_scale * n_scale) as f64;
    let k = (t * n2 + 3.0 / 8.0).floor();
    if k < 1.0 {
        CellTime::SubThreshold
    } else {
        CellTime::Cell {
            index: k as u64,
            value: k / n2,
        }
    }
}

/// Brownian loop scaling: space by 1/N, time by 1/N^2.
pub fn scale_brownian_loop(loop_: &RootedLoop, n_scale: u64) -> Result<RootedLoop> {
    if loop_.flavor != Flavor::Brownian {
        return Err(Error::Domain("expected a Brownian loop".into()));
    }
    let nf = n_scale as f64;
    let mut out = loop_.clone();
    out.root.iter_mut().for_each(|c| *c /= nf);
    out.spatial_scale /= nf;
    out.t_len /= nf * nf;
    Ok(out)
}

/// Random-walk loop scaling: space by 1/N, time by 1/(d N^2).
pub fn scale_rw_loop(loop_: &RootedLoop, n_scale: u64, d: u32) -> Result<RootedLoop> {
    if loop_.flavor == Flavor::Brownian {
        return Err(Error::Domain("expected a random-walk loop".into()));
    }
    if loop_.d != d {
        return Err(Error::Domain("dimension mismatch".into()));
    }
    let nf = n_scale as f64;
    let mut out = loop_.clone();
    out.root.iter_mut().for_each(|c| *c /= nf);
    out.spatial_scale /= nf;
    out.t_len /= d as f64 * nf * nf;
    Ok(out)
}
