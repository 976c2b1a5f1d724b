//! Legendre and Jacobi polynomials and Gauss-type quadrature on intervals
//! and simplices.
//!
//! Quadrature on the triangle and tetrahedron uses collapsed coordinates:
//! Gauss-Jacobi rules with weights `(1-a)^k` absorb the Jacobian of the
//! Duffy map, so the rules share the tensor structure of the Dubiner basis.

use crate::jet::Real;
use std::f64::consts::PI;
use thiserror::Error;

const NEWTON_TOL: f64 = 1e-15;
const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("quadrature needs at least one point")]
    NoPoints,
    #[error("jacobi parameters must exceed -1, got ({0}, {1})")]
    BadWeight(f64, f64),
    #[error("gauss node {node} of {n} did not converge in {NEWTON_MAX_ITER} newton steps")]
    NoConvergence { node: usize, n: usize },
    #[error("simplex dimension must be 2 or 3, got {0}")]
    BadDimension(usize),
    #[error("quadrature order must be at least 1")]
    BadOrder,
}

/// `P_n(x)` by the upward three-term recurrence.
pub fn eval_legendre(n: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return p0;
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// `P_n^{(a,b)}(x)` by the standard three-term recurrence.
pub fn eval_jacobi(n: usize, a: f64, b: f64, x: f64) -> f64 {
    let mut out = vec![0.0; n + 1];
    jacobi_all(n, a, b, x, &mut out);
    out[n]
}

/// `d^k/dx^k P_n^{(a,b)}(x)`, via the shifted-parameter derivative identity.
pub fn eval_jacobi_derivative(n: usize, a: f64, b: f64, k: usize, x: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut factor = 1.0;
    for m in 1..=k {
        factor *= 0.5 * (n as f64 + a + b + m as f64);
    }
    factor * eval_jacobi(n - k, a + k as f64, b + k as f64, x)
}

/// Fills `out[m] = P_m^{(a,b)}(x)` for `m = 0..out.len()`.
pub fn jacobi_all<T: Real>(n: usize, a: f64, b: f64, x: T, out: &mut [T]) {
    scaled_jacobi_all(n, a, b, x, T::cst(1.0), out);
}

/// Fills `out[m] = t^m P_m^{(a,b)}(s/t)` for `m = 0..=n`.
///
/// The factor `t^m` is distributed through the recurrence, so the result is
/// a polynomial in `(s, t)` and stays finite at `t = 0`. This is how the
/// collapsed-coordinate factors of the simplex bases are evaluated without
/// dividing by `1 - x`.
pub fn scaled_jacobi_all<T: Real>(n: usize, a: f64, b: f64, s: T, t: T, out: &mut [T]) {
    debug_assert!(out.len() > n);
    out[0] = T::cst(1.0);
    if n == 0 {
        return;
    }
    out[1] = (s.scale(a + b + 2.0) + t.scale(a - b)).scale(0.5);
    let t2 = t * t;
    for m in 1..n {
        let mf = m as f64;
        let big = 2.0 * mf + a + b;
        let c_s = (big + 1.0) * (big + 2.0) * big;
        let c_t = (big + 1.0) * (a * a - b * b);
        let c_prev = 2.0 * (mf + a) * (mf + b) * (big + 2.0);
        let denom = 2.0 * (mf + 1.0) * (mf + a + b + 1.0) * big;
        out[m + 1] = ((s.scale(c_s) + t.scale(c_t)) * out[m] - (t2 * out[m - 1]).scale(c_prev))
            .scale(1.0 / denom);
    }
}

/// Fills `out[m] = t^m P_m(s/t)` (scaled Legendre) for `m = 0..=n`.
pub fn scaled_legendre_all<T: Real>(n: usize, s: T, t: T, out: &mut [T]) {
    out[0] = T::cst(1.0);
    if n == 0 {
        return;
    }
    out[1] = s;
    let t2 = t * t;
    for m in 1..n {
        let mf = m as f64;
        out[m + 1] =
            ((s * out[m]).scale(2.0 * mf + 1.0) - (t2 * out[m - 1]).scale(mf)).scale(1.0 / (mf + 1.0));
    }
}

/// Points and weights of a quadrature rule on a reference domain.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Self {
        assert_eq!(points.len(), dim * weights.len());
        QuadratureRule { dim, points, weights }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, q: usize) -> &[f64] {
        &self.points[q * self.dim..(q + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.points().zip(&self.weights).map(|(p, w)| w * f(p)).sum()
    }
}

/// `n`-point Gauss rule for the weight `(1-x)^a (1+x)^b` on `[-1, 1]`.
///
/// Nodes come from Newton's method on the recurrence-evaluated `P_n^{(a,b)}`,
/// started from Chebyshev points and deflated by the nodes already found.
pub fn quad_interval(n: usize, a: f64, b: f64) -> Result<QuadratureRule, QuadratureError> {
    if n == 0 {
        return Err(QuadratureError::NoPoints);
    }
    if a <= -1.0 || b <= -1.0 {
        return Err(QuadratureError::BadWeight(a, b));
    }
    let nf = n as f64;
    let mut nodes: Vec<f64> = Vec::with_capacity(n);
    for k in 0..n {
        let mut x = -((2.0 * k as f64 + 1.0) * PI / (2.0 * nf)).cos();
        if let Some(&prev) = nodes.last() {
            x = 0.5 * (x + prev);
        }
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let p = eval_jacobi(n, a, b, x);
            let dp = eval_jacobi_derivative(n, a, b, 1, x);
            let deflate: f64 = nodes.iter().map(|r| 1.0 / (x - r)).sum();
            let delta = -p / (dp - deflate * p);
            x += delta;
            if delta.abs() <= NEWTON_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(QuadratureError::NoConvergence { node: k, n });
        }
        nodes.push(x);
    }

    let log_c = (a + b + 1.0) * std::f64::consts::LN_2 + libm::lgamma(nf + a + 1.0)
        + libm::lgamma(nf + b + 1.0)
        - libm::lgamma(nf + a + b + 1.0)
        - libm::lgamma(nf + 1.0);
    let c = log_c.exp();
    let weights = nodes
        .iter()
        .map(|&x| {
            let dp = eval_jacobi_derivative(n, a, b, 1, x);
            c / ((1.0 - x * x) * dp * dp)
        })
        .collect();
    Ok(QuadratureRule::new(1, nodes, weights))
}

/// Collapsed-coordinate rule on the reference triangle `(0,0),(1,0),(0,1)`
/// (`dim = 2`) or tetrahedron `x,y,z >= 0, x+y+z <= 1` (`dim = 3`), exact for
/// total degree `<= q`.
pub fn quad_simplex(dim: usize, q: usize) -> Result<QuadratureRule, QuadratureError> {
    if q == 0 {
        return Err(QuadratureError::BadOrder);
    }
    let n = q / 2 + 1;
    match dim {
        2 => {
            let ga = quad_interval(n, 1.0, 0.0)?;
            let gb = quad_interval(n, 0.0, 0.0)?;
            let mut points = Vec::with_capacity(2 * n * n);
            let mut weights = Vec::with_capacity(n * n);
            for (pa, wa) in ga.points().zip(ga.weights()) {
                let x = 0.5 * (1.0 + pa[0]);
                for (pb, wb) in gb.points().zip(gb.weights()) {
                    let y = 0.5 * (1.0 - x) * (1.0 + pb[0]);
                    points.extend_from_slice(&[x, y]);
                    weights.push(wa * wb / 8.0);
                }
            }
            Ok(QuadratureRule::new(2, points, weights))
        }
        3 => {
            let ga = quad_interval(n, 2.0, 0.0)?;
            let gb = quad_interval(n, 1.0, 0.0)?;
            let gc = quad_interval(n, 0.0, 0.0)?;
            let mut points = Vec::with_capacity(3 * n * n * n);
            let mut weights = Vec::with_capacity(n * n * n);
            for (pa, wa) in ga.points().zip(ga.weights()) {
                let x = 0.5 * (1.0 + pa[0]);
                for (pb, wb) in gb.points().zip(gb.weights()) {
                    let y = 0.5 * (1.0 - x) * (1.0 + pb[0]);
                    for (pc, wc) in gc.points().zip(gc.weights()) {
                        let z = 0.5 * (1.0 - x - y) * (1.0 + pc[0]);
                        points.extend_from_slice(&[x, y, z]);
                        weights.push(wa * wb * wc / 64.0);
                    }
                }
            }
            Ok(QuadratureRule::new(3, points, weights))
        }
        d => Err(QuadratureError::BadDimension(d)),
    }
}
