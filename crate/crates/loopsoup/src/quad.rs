//! Gauss-Legendre quadrature: fixed panels plus an adaptive driver.

use std::sync::OnceLock;

/// Nodes and weights on [-1, 1].
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on the Legendre polynomial roots.
    pub fn new(order: usize) -> Self {
        assert!(order >= 2);
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        let m = order.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, d) = legendre(order, x);
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, dp) = legendre(order, x);
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[order - 1 - i] = x;
            weights[i] = w;
            weights[order - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Integrate f over [a, b] with a single panel.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut sum = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            sum += w * f(c + h * x);
        }
        sum * h
    }
}

/// (P_n(x), P_n'(x)).
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn rule16() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(16))
}

fn rule32() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(32))
}

/// Single fixed 32-point panel; serves as the second, independent rule when
/// cross-checking the adaptive result on smooth integrands.
pub fn fixed_panel_32<F: FnMut(f64) -> f64>(a: f64, b: f64, f: F) -> f64 {
    rule32().integrate(a, b, f)
}

/// Adaptive Gauss-Legendre integration to absolute tolerance `tol`.
///
/// Each panel is estimated at orders 16 and 32; their difference drives
/// bisection. Returns the value and an accumulated error bound.
pub fn adaptive<F: Fn(f64) -> f64>(a: f64, b: f64, tol: f64, f: &F) -> (f64, f64) {
    fn recurse<F: Fn(f64) -> f64>(
        a: f64,
        b: f64,
        tol: f64,
        f: &F,
        depth: u32,
        err: &mut f64,
    ) -> f64 {
        let coarse = rule16().integrate(a, b, f);
        let fine = rule32().integrate(a, b, f);
        let delta = (fine - coarse).abs();
        if delta <= tol || depth >= 40 {
            *err += delta;
            return fine;
        }
        let mid = 0.5 * (a + b);
        recurse(a, mid, 0.5 * tol, f, depth + 1, err)
            + recurse(mid, b, 0.5 * tol, f, depth + 1, err)
    }
    let mut err = 0.0;
    let value = recurse(a, b, tol, f, 0, &mut err);
    (value, err)
}
