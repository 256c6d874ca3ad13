//! Rooted loops: parametrized closed paths in lattice or continuum flavor.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Brownian,
    RwDiscrete,
    RwContinuous,
}

/// Path payload, stored relative to the root and on the loop's native clock.
///
/// * `Dyadic`: a Brownian bridge of time length 1 sampled at 2^levels + 1
///   dyadic points (stride-d flat storage). The actual loop is recovered by
///   `root + spatial_scale * value`, so rescaling a loop never touches the
///   samples.
/// * `Verts`: the 2n+1 lattice vertices of a discrete-time walk, relative to
///   the root; native clock is 0..=2n in unit steps.
/// * `Jumps`: a continuous-time walk as (jump time, post-jump vertex) pairs on
///   the native clock [0, native_t]; the value is right-continuous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Path {
    Dyadic {
        levels: u32,
        values: Vec<f64>,
    },
    Verts {
        verts: Vec<i64>,
    },
    Jumps {
        times: Vec<f64>,
        verts: Vec<i64>,
        native_t: f64,
    },
}

/// A rooted loop with a distinguished start/end point and a time length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootedLoop {
    pub flavor: Flavor,
    pub d: u32,
    /// Root position in the loop's current (possibly rescaled) coordinates.
    pub root: Vec<f64>,
    /// Time length in current coordinates.
    pub t_len: f64,
    /// Multiplier applied to relative path values on evaluation.
    pub spatial_scale: f64,
    pub path: Path,
}

impl RootedLoop {
    /// Evaluate the loop at fraction `s` of its time length, under the
    /// flavor's interpolation convention: linear between samples for the
    /// Brownian grid and the discrete walk, right-continuous steps for the
    /// continuous-time walk.
    pub fn evaluate(&self, s: f64) -> Vec<f64> {
        assert!((0.0..=1.0).contains(&s), "fraction out of range: {s}");
        let d = self.d as usize;
        let rel = self.evaluate_relative(s);
        (0..d)
            .map(|i| self.root[i] + self.spatial_scale * rel[i])
            .collect()
    }

    /// Relative path value (before root translation and spatial scaling).
    pub fn evaluate_relative(&self, s: f64) -> Vec<f64> {
        let d = self.d as usize;
        match &self.path {
            Path::Dyadic { values, .. } => {
                let m = values.len() / d - 1;
                let pos = s * m as f64;
                let lo = (pos.floor() as usize).min(m - 1);
                let frac = pos - lo as f64;
                (0..d)
                    .map(|i| {
                        let a = values[lo * d + i];
                        let b = values[(lo + 1) * d + i];
                        a + frac * (b - a)
                    })
                    .collect()
            }
            Path::Verts { verts } => {
                let m = verts.len() / d - 1;
                let pos = s * m as f64;
                let lo = (pos.floor() as usize).min(m.saturating_sub(1));
                let frac = pos - lo as f64;
                (0..d)
                    .map(|i| {
                        let a = verts[lo * d + i] as f64;
                        let b = verts[(lo + 1) * d + i] as f64;
                        a + frac * (b - a)
                    })
                    .collect()
            }
            Path::Jumps {
                times,
                verts,
                native_t,
            } => {
                let t = s * native_t;
                // Index of the last jump at or before t.
                let k = times.partition_point(|&jt| jt <= t);
                if k == 0 {
                    vec![0.0; d]
                } else {
                    (0..d).map(|i| verts[(k - 1) * d + i] as f64).collect()
                }
            }
        }
    }

    /// Number of path breakpoints expressed as fractions of the time length,
    /// including both endpoints. Used when measuring sup distances.
    pub fn breakpoint_fractions(&self) -> Vec<f64> {
        match &self.path {
            Path::Dyadic { values, .. } => {
                let m = values.len() / self.d as usize - 1;
                (0..=m).map(|j| j as f64 / m as f64).collect()
            }
            Path::Verts { verts } => {
                let m = verts.len() / self.d as usize - 1;
                (0..=m).map(|j| j as f64 / m as f64).collect()
            }
            Path::Jumps {
                times, native_t, ..
            } => {
                let mut f: Vec<f64> = Vec::with_capacity(times.len() + 2);
                f.push(0.0);
                f.extend(times.iter().map(|t| t / native_t));
                f.push(1.0);
                f
            }
        }
    }

    /// Structural invariants: closed at the root, unit lattice steps,
    /// strictly increasing jump times, balanced per-coordinate jumps.
    pub fn validate(&self) -> Result<()> {
        let d = self.d as usize;
        if self.root.len() != d {
            return Err(Error::Domain("root dimension mismatch".into()));
        }
        if !(self.t_len > 0.0) {
            return Err(Error::Domain("time length must be positive".into()));
        }
        match (&self.flavor, &self.path) {
            (Flavor::Brownian, Path::Dyadic { levels, values }) => {
                let expect = ((1usize << levels) + 1) * d;
                if values.len() != expect {
                    return Err(Error::Domain("dyadic grid size mismatch".into()));
                }
                for i in 0..d {
                    if values[i] != 0.0 || values[values.len() - d + i] != 0.0 {
                        return Err(Error::Domain("bridge must start and end at 0".into()));
                    }
                }
            }
            (Flavor::RwDiscrete, Path::Verts { verts }) => {
                if verts.len() % d != 0 || verts.len() < 2 * d {
                    return Err(Error::Domain("vertex list size mismatch".into()));
                }
                let m = verts.len() / d;
                for i in 0..d {
                    if verts[i] != 0 || verts[(m - 1) * d + i] != 0 {
                        return Err(Error::Domain("walk must start and end at root".into()));
                    }
                }
                for w in 0..m - 1 {
                    let step: i64 = (0..d)
                        .map(|i| (verts[(w + 1) * d + i] - verts[w * d + i]).abs())
                        .sum();
                    if step != 1 {
                        return Err(Error::Domain(format!("non-unit step at index {w}")));
                    }
                }
            }
            (
                Flavor::RwContinuous,
                Path::Jumps {
                    times,
                    verts,
                    native_t,
                },
            ) => {
                if verts.len() != times.len() * d {
                    return Err(Error::Domain("jump list size mismatch".into()));
                }
                let mut prev = 0.0;
                for &t in times {
                    if !(t > prev) || !(t < *native_t) {
                        return Err(Error::Domain("jump times must increase in (0, t)".into()));
                    }
                    prev = t;
                }
                let m = times.len();
                if m > 0 {
                    for i in 0..d {
                        if verts[(m - 1) * d + i] != 0 {
                            return Err(Error::Domain("walk must end at root".into()));
                        }
                    }
                }
                let mut ups = vec![0i64; d];
                let mut downs = vec![0i64; d];
                let mut prev_v = vec![0i64; d];
                for j in 0..m {
                    let mut moved = 0;
                    for i in 0..d {
                        let delta = verts[j * d + i] - prev_v[i];
                        if delta == 1 {
                            ups[i] += 1;
                            moved += 1;
                        } else if delta == -1 {
                            downs[i] += 1;
                            moved += 1;
                        } else if delta != 0 {
                            return Err(Error::Domain("jump must be a unit vector".into()));
                        }
                        prev_v[i] = verts[j * d + i];
                    }
                    if moved != 1 {
                        return Err(Error::Domain("each jump must move one coordinate".into()));
                    }
                }
                if ups != downs {
                    return Err(Error::Domain("per-coordinate jumps must balance".into()));
                }
            }
            _ => return Err(Error::Domain("flavor/path mismatch".into())),
        }
        Ok(())
    }

    /// Native time length of the stored path (before any rescaling).
    pub fn native_t(&self) -> f64 {
        match &self.path {
            Path::Dyadic { .. } => 1.0,
            Path::Verts { verts } => (verts.len() / self.d as usize - 1) as f64,
            Path::Jumps { native_t, .. } => *native_t,
        }
    }

    pub fn dyadic_levels(&self) -> Option<u32> {
        match &self.path {
            Path::Dyadic { levels, .. } => Some(*levels),
            _ => None,
        }
    }
}

/// Default dyadic resolution when a Brownian loop is paired with a walk of
/// n-scale `n_hint`: fine enough that grid error is negligible against the
/// N^{-1} log N coupling scale, capped to bound memory.
pub fn dyadic_levels_for(n_hint: u64) -> u32 {
    let base = 64 - n_hint.max(1).leading_zeros(); // ceil(log2) for powers-of-2-ish
    let ceil_log2 = if n_hint.is_power_of_two() {
        base - 1
    } else {
        base
    };
    (ceil_log2 + 4).clamp(8, 20)
}
