//! Dubiner shape functions on the reference triangle and tetrahedron.
//!
//! On the triangle `(0,0),(1,0),(0,1)`:
//!
//! ```text
//! phi_{i,j}(x,y) = P_i(2y/(1-x) - 1) (1-x)^i P_j^{(2i+1,0)}(2x-1)
//! ```
//!
//! and on the tetrahedron `x,y,z >= 0, x+y+z <= 1`:
//!
//! ```text
//! phi_{i,j,k} = (1-x-y)^i (1-x)^j P_i(2z/(1-x-y) - 1)
//!               P_j^{(2i+1,0)}(2y/(1-x) - 1) P_k^{(2i+2j+2,0)}(2x-1)
//! ```
//!
//! The functions are kept unnormalized; their squared norms are computed by
//! quadrature and stored next to the evaluation tables. Modes are ordered
//! graded-lexicographically by `(i+j[+k], i, j)`, so the modes of order
//! `p-1` are a prefix of the modes of order `p`.

use crate::jet::{Jet, Real};
use crate::polys::{jacobi_all, quad_simplex, scaled_jacobi_all, scaled_legendre_all};
use crate::polys::{QuadratureError, QuadratureRule};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("reference element dimension must be 2 or 3, got {0}")]
    BadDimension(usize),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Number of modes of total degree `<= p`.
pub fn num_modes(dim: usize, p: usize) -> usize {
    match dim {
        2 => (p + 1) * (p + 2) / 2,
        3 => (p + 1) * (p + 2) * (p + 3) / 6,
        _ => panic!("unsupported dimension {dim}"),
    }
}

/// Position of `(i, j)` in the graded ordering.
#[inline]
pub fn mode_index_2d(i: usize, j: usize) -> usize {
    let d = i + j;
    d * (d + 1) / 2 + i
}

/// Position of `(i, j, k)` in the graded ordering.
#[inline]
pub fn mode_index_3d(i: usize, j: usize, k: usize) -> usize {
    let d = i + j + k;
    d * (d + 1) * (d + 2) / 6 + i * (d + 1) - i * i.saturating_sub(1) / 2 + j
}

/// Multi-indices of all modes up to degree `p`, in storage order. In 2D the
/// third entry is zero.
pub fn index_set(dim: usize, p: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(num_modes(dim, p));
    for d in 0..=p {
        match dim {
            2 => out.extend((0..=d).map(|i| [i, d - i, 0])),
            3 => {
                for i in 0..=d {
                    for j in 0..=d - i {
                        out.push([i, j, d - i - j]);
                    }
                }
            }
            _ => panic!("unsupported dimension {dim}"),
        }
    }
    out
}

/// All triangle modes of degree `<= p` at `(x, y)`, in storage order.
pub fn eval_all_2d<T: Real>(p: usize, x: T, y: T, out: &mut [T]) {
    let one = T::cst(1.0);
    let t = one - x;
    let s = y.scale(2.0) + x - one;
    let z = x.scale(2.0) - one;
    let mut leg = vec![one; p + 1];
    scaled_legendre_all(p, s, t, &mut leg);
    let mut jac = vec![one; p + 1];
    for (i, &li) in leg.iter().enumerate() {
        jacobi_all(p - i, 2.0 * i as f64 + 1.0, 0.0, z, &mut jac);
        for j in 0..=p - i {
            out[mode_index_2d(i, j)] = li * jac[j];
        }
    }
}

/// All tetrahedron modes of degree `<= p` at `(x, y, z)`, in storage order.
pub fn eval_all_3d<T: Real>(p: usize, x: T, y: T, z: T, out: &mut [T]) {
    let one = T::cst(1.0);
    let t1 = one - x - y;
    let s1 = z.scale(2.0) + x + y - one;
    let t2 = one - x;
    let s2 = y.scale(2.0) + x - one;
    let w = x.scale(2.0) - one;
    let mut leg = vec![one; p + 1];
    scaled_legendre_all(p, s1, t1, &mut leg);
    let mut mid = vec![one; p + 1];
    let mut inner = vec![one; p + 1];
    for (i, &li) in leg.iter().enumerate() {
        scaled_jacobi_all(p - i, 2.0 * i as f64 + 1.0, 0.0, s2, t2, &mut mid);
        for j in 0..=p - i {
            let lm = li * mid[j];
            jacobi_all(p - i - j, 2.0 * (i + j) as f64 + 2.0, 0.0, w, &mut inner);
            for k in 0..=p - i - j {
                out[mode_index_3d(i, j, k)] = lm * inner[k];
            }
        }
    }
}

/// `phi_{i,j}(x, y)`; finite on the whole closed triangle, including the
/// collapsed vertex `x = 1`.
pub fn eval_shape_2d(i: usize, j: usize, x: f64, y: f64) -> f64 {
    shape_2d(i, j, x, y)
}

/// `phi_{i,j,k}(x, y, z)`; finite on the whole closed tetrahedron.
pub fn eval_shape_3d(i: usize, j: usize, k: usize, x: f64, y: f64, z: f64) -> f64 {
    shape_3d(i, j, k, x, y, z)
}

/// [`eval_shape_2d`] over any [`Real`], e.g. a [`Jet`] for exact gradients.
pub fn shape_2d<T: Real>(i: usize, j: usize, x: T, y: T) -> T {
    let one = T::cst(1.0);
    let mut leg = vec![one; i + 1];
    scaled_legendre_all(i, y.scale(2.0) + x - one, one - x, &mut leg);
    let mut jac = vec![one; j + 1];
    jacobi_all(j, 2.0 * i as f64 + 1.0, 0.0, x.scale(2.0) - one, &mut jac);
    leg[i] * jac[j]
}

/// [`eval_shape_3d`] over any [`Real`].
pub fn shape_3d<T: Real>(i: usize, j: usize, k: usize, x: T, y: T, z: T) -> T {
    let one = T::cst(1.0);
    let mut leg = vec![one; i + 1];
    scaled_legendre_all(i, z.scale(2.0) + x + y - one, one - x - y, &mut leg);
    let mut mid = vec![one; j + 1];
    scaled_jacobi_all(j, 2.0 * i as f64 + 1.0, 0.0, y.scale(2.0) + x - one, one - x, &mut mid);
    let mut inner = vec![one; k + 1];
    jacobi_all(k, 2.0 * (i + j) as f64 + 2.0, 0.0, x.scale(2.0) - one, &mut inner);
    leg[i] * mid[j] * inner[k]
}

/// Values and gradients of every mode at one point.
pub fn eval_all_with_gradient(dim: usize, p: usize, point: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = num_modes(dim, p);
    let mut values = vec![0.0; n];
    let mut grads = vec![0.0; n * dim];
    match dim {
        2 => {
            let mut out = vec![Jet::<2>::cst(0.0); n];
            eval_all_2d(p, Jet::var(point[0], 0), Jet::var(point[1], 1), &mut out);
            for (a, jet) in out.iter().enumerate() {
                values[a] = jet.v;
                grads[2 * a..2 * a + 2].copy_from_slice(&jet.d);
            }
        }
        3 => {
            let mut out = vec![Jet::<3>::cst(0.0); n];
            eval_all_3d(
                p,
                Jet::var(point[0], 0),
                Jet::var(point[1], 1),
                Jet::var(point[2], 2),
                &mut out,
            );
            for (a, jet) in out.iter().enumerate() {
                values[a] = jet.v;
                grads[3 * a..3 * a + 3].copy_from_slice(&jet.d);
            }
        }
        _ => panic!("unsupported dimension {dim}"),
    }
    (values, grads)
}

/// Values of every mode at one point.
pub fn eval_all(dim: usize, p: usize, point: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; num_modes(dim, p)];
    match dim {
        2 => eval_all_2d(p, point[0], point[1], &mut out),
        3 => eval_all_3d(p, point[0], point[1], point[2], &mut out),
        _ => panic!("unsupported dimension {dim}"),
    }
    out
}

/// Basis metadata for one polynomial order: index set, quadrature, tabulated
/// values and gradients at the quadrature points, and squared mode norms.
#[derive(Debug, Clone)]
pub struct ReferenceElement {
    dim: usize,
    order: usize,
    modes: Vec<[usize; 3]>,
    quadrature: QuadratureRule,
    values: Vec<f64>,
    gradients: Vec<f64>,
    norms: Vec<f64>,
}

impl ReferenceElement {
    /// Reference element with a quadrature of order `2p + 1`.
    pub fn new(dim: usize, order: usize) -> Result<Self, BasisError> {
        Self::with_quadrature_order(dim, order, 2 * order + 1)
    }

    pub fn with_quadrature_order(dim: usize, order: usize, q: usize) -> Result<Self, BasisError> {
        if dim != 2 && dim != 3 {
            return Err(BasisError::BadDimension(dim));
        }
        let quadrature = quad_simplex(dim, q.max(2 * order + 1))?;
        let n = num_modes(dim, order);
        let nq = quadrature.len();
        let mut values = Vec::with_capacity(nq * n);
        let mut gradients = Vec::with_capacity(nq * n * dim);
        for pt in quadrature.points() {
            let (v, g) = eval_all_with_gradient(dim, order, pt);
            values.extend(v);
            gradients.extend(g);
        }
        let mut norms = vec![0.0; n];
        for (q, w) in quadrature.weights().iter().enumerate() {
            for (a, norm) in norms.iter_mut().enumerate() {
                let v = values[q * n + a];
                *norm += w * v * v;
            }
        }
        Ok(ReferenceElement {
            dim,
            order,
            modes: index_set(dim, order),
            quadrature,
            values,
            gradients,
            norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[[usize; 3]] {
        &self.modes
    }

    pub fn quadrature(&self) -> &QuadratureRule {
        &self.quadrature
    }

    /// Squared `L2` norms of the modes on the reference element.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Values of all modes at quadrature point `q`.
    pub fn values_at(&self, q: usize) -> &[f64] {
        let n = self.num_modes();
        &self.values[q * n..(q + 1) * n]
    }

    /// Gradients of all modes at quadrature point `q`, `dim` entries per mode.
    pub fn gradients_at(&self, q: usize) -> &[f64] {
        let n = self.num_modes() * self.dim;
        &self.gradients[q * n..(q + 1) * n]
    }

    /// `L2` projection of a function onto the modes.
    pub fn project_fn<F: Fn(&[f64]) -> f64>(&self, f: F) -> ModalField {
        let samples: Vec<f64> = self.quadrature.points().map(f).collect();
        project(&samples, self).expect("sample count matches quadrature")
    }

    /// Gram matrix of the modes under the element quadrature (row-major).
    pub fn gram_matrix(&self) -> Vec<f64> {
        let n = self.num_modes();
        let mut g = vec![0.0; n * n];
        for (q, w) in self.quadrature.weights().iter().enumerate() {
            let v = self.values_at(q);
            for a in 0..n {
                let wa = w * v[a];
                for b in 0..n {
                    g[a * n + b] += wa * v[b];
                }
            }
        }
        g
    }
}

/// Coefficients of a (possibly vector-valued) field in the modal basis of one
/// reference element. Components are stored one after another.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalField {
    pub dim: usize,
    pub order: usize,
    pub components: usize,
    pub coeffs: Vec<f64>,
}

impl ModalField {
    pub fn zeros(dim: usize, order: usize, components: usize) -> Self {
        ModalField { dim, order, components, coeffs: vec![0.0; components * num_modes(dim, order)] }
    }

    pub fn scalar(dim: usize, order: usize, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), num_modes(dim, order));
        ModalField { dim, order, components: 1, coeffs }
    }

    pub fn num_modes(&self) -> usize {
        num_modes(self.dim, self.order)
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.num_modes();
        &self.coeffs[c * n..(c + 1) * n]
    }

    /// The same field viewed in a larger or smaller order; modes beyond the
    /// target order are dropped, new modes are zero.
    pub fn with_order(&self, order: usize) -> ModalField {
        let (old, new) = (self.num_modes(), num_modes(self.dim, order));
        let mut out = ModalField::zeros(self.dim, order, self.components);
        for c in 0..self.components {
            let m = old.min(new);
            out.coeffs[c * new..c * new + m].copy_from_slice(&self.coeffs[c * old..c * old + m]);
        }
        out
    }
}

/// `L2` projection of samples taken at the quadrature points of `re`.
///
/// `values` holds one block of `re.quadrature().len()` samples per component.
pub fn project(values: &[f64], re: &ReferenceElement) -> Result<ModalField, BasisError> {
    let nq = re.quadrature.len();
    if values.is_empty() || values.len() % nq != 0 {
        return Err(BasisError::LengthMismatch { expected: nq, got: values.len() });
    }
    let components = values.len() / nq;
    let n = re.num_modes();
    let mut coeffs = vec![0.0; components * n];
    for c in 0..components {
        let out = &mut coeffs[c * n..(c + 1) * n];
        for (q, w) in re.quadrature.weights().iter().enumerate() {
            let f = w * values[c * nq + q];
            for (o, v) in out.iter_mut().zip(re.values_at(q)) {
                *o += f * v;
            }
        }
        for (o, norm) in out.iter_mut().zip(&re.norms) {
            *o /= norm;
        }
    }
    Ok(ModalField { dim: re.dim, order: re.order, components, coeffs })
}

/// `sum_a coeffs[a] phi_a(point)`, one value per component.
pub fn eval_field(field: &ModalField, point: &[f64]) -> Vec<f64> {
    let phi = eval_all(field.dim, field.order, point);
    (0..field.components)
        .map(|c| field.component(c).iter().zip(&phi).map(|(a, b)| a * b).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_triangle_point(rng: &mut impl Rng) -> [f64; 2] {
        let (mut x, mut y): (f64, f64) = (rng.random(), rng.random());
        if x + y > 1.0 {
            (x, y) = (1.0 - x, 1.0 - y);
        }
        [x, y]
    }

    #[test]
    fn mode_counts_and_ordering() {
        for p in 0..12 {
            let set2 = index_set(2, p);
            assert_eq!(set2.len(), (p + 1) * (p + 2) / 2);
            for (pos, m) in set2.iter().enumerate() {
                assert_eq!(mode_index_2d(m[0], m[1]), pos);
            }
            let set3 = index_set(3, p);
            assert_eq!(set3.len(), (p + 1) * (p + 2) * (p + 3) / 6);
            for (pos, m) in set3.iter().enumerate() {
                assert_eq!(mode_index_3d(m[0], m[1], m[2]), pos);
            }
        }
        // lower orders are prefixes
        assert_eq!(index_set(2, 3)[..], index_set(2, 5)[..10]);
    }

    #[test]
    fn low_order_shapes_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let [x, y] = random_triangle_point(&mut rng);
            assert_eq!(eval_shape_2d(0, 0, x, y), 1.0);
            assert!((eval_shape_2d(1, 0, x, y) - (2.0 * y + x - 1.0)).abs() < 1e-15);
            assert!((eval_shape_2d(0, 1, x, y) - (3.0 * x - 1.0)).abs() < 1e-15);
        }
        // collapsed vertex is finite
        assert!(eval_shape_2d(4, 2, 1.0, 0.0).is_finite());
    }

    #[test]
    fn low_order_shapes_3d() {
        for &(x, y, z) in &[(0.1, 0.2, 0.3), (0.5, 0.1, 0.05), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0)] {
            assert_eq!(eval_shape_3d(0, 0, 0, x, y, z), 1.0);
            assert!((eval_shape_3d(1, 0, 0, x, y, z) - (2.0 * z + x + y - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_matches_division_form_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let [x, y] = random_triangle_point(&mut rng);
            for i in 0..5 {
                for j in 0..5 {
                    let direct = crate::polys::eval_legendre(i, 2.0 * y / (1.0 - x) - 1.0)
                        * (1.0 - x).powi(i as i32)
                        * crate::polys::eval_jacobi(j, 2.0 * i as f64 + 1.0, 0.0, 2.0 * x - 1.0);
                    assert!((eval_shape_2d(i, j, x, y) - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_evaluation_matches_single() {
        let pt = [0.21, 0.33, 0.17];
        let all = eval_all(3, 5, &pt);
        for (a, m) in index_set(3, 5).iter().enumerate() {
            assert!((all[a] - eval_shape_3d(m[0], m[1], m[2], pt[0], pt[1], pt[2])).abs() < 1e-13);
        }
        let all = eval_all(2, 7, &pt[..2]);
        for (a, m) in index_set(2, 7).iter().enumerate() {
            assert!((all[a] - eval_shape_2d(m[0], m[1], pt[0], pt[1])).abs() < 1e-13);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pt = [0.3, 0.25];
        let (_, g) = eval_all_with_gradient(2, 6, &pt);
        let h = 1e-6;
        for (a, m) in index_set(2, 6).iter().enumerate() {
            let fx = (eval_shape_2d(m[0], m[1], pt[0] + h, pt[1])
                - eval_shape_2d(m[0], m[1], pt[0] - h, pt[1]))
                / (2.0 * h);
            let fy = (eval_shape_2d(m[0], m[1], pt[0], pt[1] + h)
                - eval_shape_2d(m[0], m[1], pt[0], pt[1] - h))
                / (2.0 * h);
            assert!((g[2 * a] - fx).abs() < 1e-6 * (1.0 + fx.abs()));
            assert!((g[2 * a + 1] - fy).abs() < 1e-6 * (1.0 + fy.abs()));
        }
    }

    fn max_off_diagonal(re: &ReferenceElement) -> f64 {
        let n = re.num_modes();
        let g = re.gram_matrix();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    let rel = g[a * n + b].abs() / (g[a * n + a] * g[b * n + b]).sqrt();
                    worst = worst.max(rel);
                }
            }
        }
        worst
    }

    #[test]
    fn gram_matrix_is_diagonal() {
        for p in 0..=10 {
            let re = ReferenceElement::new(2, p).unwrap();
            assert!(max_off_diagonal(&re) <= 1e-11, "2d p={p}");
            assert!(re.norms().iter().all(|&n| n > 0.0));
        }
        for p in 0..=6 {
            let re = ReferenceElement::new(3, p).unwrap();
            assert!(max_off_diagonal(&re) <= 1e-11, "3d p={p}");
            assert!(re.norms().iter().all(|&n| n > 0.0));
        }
    }

    #[test]
    fn triangle_norms_match_closed_form() {
        // ||phi_ij||^2 = 1 / ((2i+1)(2i+2j+2)), from the Jacobi weight integrals
        let re = ReferenceElement::new(2, 8).unwrap();
        for (a, m) in re.modes().iter().enumerate() {
            let want = 1.0 / ((2 * m[0] + 1) as f64 * (2 * (m[0] + m[1]) + 2) as f64);
            assert!((re.norms()[a] - want).abs() < 1e-14 * want.max(1.0));
        }
    }

    #[test]
    fn projection_examples() {
        let re = ReferenceElement::new(2, 3).unwrap();
        let one = re.project_fn(|_| 1.0);
        assert!((one.coeffs[0] - 1.0).abs() < 1e-14);
        assert!(one.coeffs[1..].iter().all(|c| c.abs() < 1e-14));

        let phi10 = re.project_fn(|p| eval_shape_2d(1, 0, p[0], p[1]));
        for (a, c) in phi10.coeffs.iter().enumerate() {
            let want = if a == mode_index_2d(1, 0) { 1.0 } else { 0.0 };
            assert!((c - want).abs() < 1e-12);
        }

        let f = |p: &[f64]| p[0] * p[0] * p[1];
        let field = re.project_fn(f);
        for pt in re.quadrature().points() {
            assert!((eval_field(&field, pt)[0] - f(pt)).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_rejects_misaligned_samples() {
        let re = ReferenceElement::new(2, 2).unwrap();
        let err = project(&[1.0; 5], &re).unwrap_err();
        assert!(matches!(err, BasisError::LengthMismatch { .. }));
    }

    #[test]
    fn eval_field_examples() {
        let zero = ModalField::zeros(2, 4, 1);
        assert_eq!(eval_field(&zero, &[0.2, 0.3]), vec![0.0]);
        let mut unit = ModalField::zeros(2, 4, 2);
        let a = mode_index_2d(2, 1);
        unit.coeffs[15 + a] = 1.0;
        let v = eval_field(&unit, &[0.2, 0.3]);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - eval_shape_2d(2, 1, 0.2, 0.3)).abs() < 1e-15);
    }

    #[test]
    fn monomials_are_reproduced() {
        for p in 0..=6 {
            let re = ReferenceElement::new(2, p).unwrap();
            for m in 0..=p as i32 {
                for n in 0..=(p as i32 - m) {
                    let f = |pt: &[f64]| pt[0].powi(m) * pt[1].powi(n);
                    let field = re.project_fn(f);
                    for pt in re.quadrature().points() {
                        assert!((eval_field(&field, pt)[0] - f(pt)).abs() < 1e-11);
                    }
                }
            }
        }
        let re = ReferenceElement::new(3, 3).unwrap();
        let f = |pt: &[f64]| pt[0] * pt[1] * pt[2] + pt[2].powi(3) - pt[0];
        let field = re.project_fn(f);
        for pt in re.quadrature().points() {
            assert!((eval_field(&field, pt)[0] - f(pt)).abs() < 1e-11);
        }
    }

    #[test]
    fn shapes_are_polynomials_along_lines() {
        // Newton divided differences of order (i+j+1) vanish along any line.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (i, j) in [(0, 3), (2, 1), (3, 3), (5, 0)] {
            let deg = i + j;
            let p0 = random_triangle_point(&mut rng);
            let dir = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            let step = 0.02;
            let samples: Vec<f64> = (0..=deg + 1)
                .map(|k| {
                    let t = k as f64 * step;
                    eval_shape_2d(i, j, p0[0] + t * dir[0], p0[1] + t * dir[1])
                })
                .collect();
            let mut diff = samples.clone();
            for _ in 0..=deg {
                diff = diff.windows(2).map(|w| w[1] - w[0]).collect();
            }
            let scale = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            assert!(diff[0].abs() < 1e-10 * scale, "({i},{j}) {}", diff[0]);
        }
    }
}
