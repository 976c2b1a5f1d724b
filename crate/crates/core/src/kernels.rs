//! Recurrence sweeps for modal derivatives and traces.
//!
//! A derivative sweep turns the coefficients of `f` in the Dubiner basis of
//! order `p` into the coefficients of `df/dx` (or `df/dy`) in the basis of
//! order `p - 1` without any quadrature. It uses two operator relations
//! between the shape functions, each linking the derivative of one
//! "target" mode to derivatives of lower modes and to plain modes of lower
//! degree. Relations are instantiated with zero-extended indices: any term
//! whose index has a negative entry is dropped, which keeps every mode of
//! degree `>= 1` eliminable.
//!
//! Edge traces reduce a triangle field to Legendre coefficients on one edge
//! with a Horner scheme over the collapsed index, using the Jacobi lowering
//! and parameter-conversion recurrences. Both sweeps and traces cost `O(N)`
//! and come with exact transposes for the test-function side of the DG
//! operators.

use crate::basis::{mode_index_2d, num_modes, BasisError, ModalField, ReferenceElement};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("pivot vanishes at target mode ({0}, {1})")]
    VanishingPivot(usize, usize),
    #[error("edge index must be 0, 1 or 2, got {0}")]
    BadEdge(usize),
    #[error("expected a field on the {expected}D reference element, got {got}D")]
    WrongDimension { expected: usize, got: usize },
    #[error("direction {0:?} is not available in 2D")]
    BadDirection(Direction),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    X,
    Y,
    Z,
}

impl Direction {
    pub fn axis(self) -> usize {
        match self {
            Direction::X => 0,
            Direction::Y => 1,
            Direction::Z => 2,
        }
    }
}

/// Derivative of a Legendre series: `sum w_i P_i = d/dx sum v_i P_i`.
///
/// Uses `P'_i = (2i - 1) P_{i-1} + P'_{i-2}` from the top mode down.
pub fn deriv_sweep_1d(v: &[f64]) -> Vec<f64> {
    if v.len() <= 1 {
        return Vec::new();
    }
    let mut acc = v.to_vec();
    let mut w = vec![0.0; v.len() - 1];
    for i in (1..v.len()).rev() {
        w[i - 1] += (2 * i - 1) as f64 * acc[i];
        if i >= 2 {
            acc[i - 2] += acc[i];
        }
    }
    w
}

/// One term of a triangle relation: `coeff * (d/dir)^deriv phi_{base + shift}`.
#[derive(Debug, Clone, Copy)]
struct RelTerm {
    di: usize,
    dj: usize,
    deriv: bool,
    coeff: f64,
}

fn term(di: usize, dj: usize, deriv: bool, coeff: f64) -> RelTerm {
    RelTerm { di, dj, deriv, coeff }
}

/// Relation for `d/dx` at base index `(i, j)`; the first term is the target.
fn x_relation(i: f64, j: f64) -> [RelTerm; 8] {
    [
        term(1, 2, true, (2.0 * i + j + 5.0) * (2.0 * i + 2.0 * j + 5.0)),
        term(0, 3, true, (j + 3.0) * (2.0 * i + 2.0 * j + 5.0)),
        term(1, 1, true, 2.0 * (2.0 * i + 3.0) * (i + j + 3.0)),
        term(0, 2, true, -2.0 * (2.0 * i + 1.0) * (i + j + 3.0)),
        term(
            1,
            1,
            false,
            -2.0 * (i + j + 3.0) * (2.0 * i + 2.0 * j + 5.0) * (2.0 * i + 2.0 * j + 7.0),
        ),
        term(1, 0, true, -(j + 1.0) * (2.0 * i + 2.0 * j + 7.0)),
        term(
            0,
            2,
            false,
            -2.0 * (i + j + 3.0) * (2.0 * i + 2.0 * j + 5.0) * (2.0 * i + 2.0 * j + 7.0),
        ),
        term(0, 1, true, -(2.0 * i + j + 3.0) * (2.0 * i + 2.0 * j + 7.0)),
    ]
}

/// Relation for `d/dy` at base index `(i, j)`; the first term is the target.
fn y_relation(i: f64, j: f64) -> [RelTerm; 7] {
    [
        term(2, 2, true, (2.0 * i + j + 6.0) * (2.0 * i + j + 7.0) * (2.0 * i + 2.0 * j + 7.0)),
        term(0, 4, true, -(j + 3.0) * (j + 4.0) * (2.0 * i + 2.0 * j + 7.0)),
        term(2, 1, true, -4.0 * (j + 2.0) * (i + j + 4.0) * (2.0 * i + j + 6.0)),
        term(0, 3, true, 4.0 * (j + 3.0) * (i + j + 4.0) * (2.0 * i + j + 5.0)),
        term(2, 0, true, (j + 1.0) * (j + 2.0) * (2.0 * i + 2.0 * j + 9.0)),
        term(
            1,
            2,
            false,
            -4.0 * (2.0 * i + 3.0)
                * (i + j + 4.0)
                * (2.0 * i + 2.0 * j + 7.0)
                * (2.0 * i + 2.0 * j + 9.0),
        ),
        term(0, 2, true, -(2.0 * i + j + 4.0) * (2.0 * i + j + 5.0) * (2.0 * i + 2.0 * j + 9.0)),
    ]
}

#[derive(Debug, Clone)]
struct Step {
    target: u32,
    /// Range into `SweepPlan::coeffs` of terms feeding derivative modes.
    deriv: (u32, u32),
    /// Range into `SweepPlan::coeffs` of terms feeding plain modes.
    plain: (u32, u32),
}

/// Precomputed elimination sequence for one order and direction.
///
/// Coefficients are stored already divided by the negated pivot, so a step
/// is a pure scatter: `acc[k] += acc[t] * a_k` and `w[l] += acc[t] * b_l`.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    order: usize,
    direction: Direction,
    steps: Vec<Step>,
    coeffs: Vec<(u32, f64)>,
    pivots: Vec<f64>,
}

impl SweepPlan {
    pub fn new(order: usize, direction: Direction) -> Result<Self, KernelError> {
        let (shift, build): ((usize, usize), fn(f64, f64) -> Vec<RelTerm>) = match direction {
            Direction::X => ((1, 2), |i, j| x_relation(i, j).to_vec()),
            Direction::Y => ((2, 2), |i, j| y_relation(i, j).to_vec()),
            Direction::Z => return Err(KernelError::BadDirection(direction)),
        };
        let mut targets: Vec<(usize, usize)> = (1..=order)
            .flat_map(|d| (0..=d).map(move |a| (a, d - a)))
            .collect();
        // Same-degree transfers always lower `i`, so eliminate by decreasing
        // degree and then decreasing `i`.
        targets.sort_by(|x, y| (y.0 + y.1, y.0).cmp(&(x.0 + x.1, x.0)));

        let mut steps = Vec::with_capacity(targets.len());
        let mut coeffs = Vec::new();
        let mut pivots = Vec::with_capacity(targets.len());
        for &(a, b) in &targets {
            let (bi, bj) = (a as f64 - shift.0 as f64, b as f64 - shift.1 as f64);
            let terms = build(bi, bj);
            let pivot = terms[0].coeff;
            if pivot == 0.0 {
                return Err(KernelError::VanishingPivot(a, b));
            }
            let index_of = |t: &RelTerm| -> Option<u32> {
                let i = a as isize - shift.0 as isize + t.di as isize;
                let j = b as isize - shift.1 as isize + t.dj as isize;
                (i >= 0 && j >= 0).then(|| mode_index_2d(i as usize, j as usize) as u32)
            };
            let start = coeffs.len() as u32;
            for t in terms[1..].iter().filter(|t| t.deriv && t.coeff != 0.0) {
                if let Some(k) = index_of(t) {
                    coeffs.push((k, -t.coeff / pivot));
                }
            }
            let mid = coeffs.len() as u32;
            for t in terms[1..].iter().filter(|t| !t.deriv && t.coeff != 0.0) {
                if let Some(k) = index_of(t) {
                    coeffs.push((k, -t.coeff / pivot));
                }
            }
            let end = coeffs.len() as u32;
            steps.push(Step {
                target: mode_index_2d(a, b) as u32,
                deriv: (start, mid),
                plain: (mid, end),
            });
            pivots.push(pivot);
        }
        Ok(SweepPlan { order, direction, steps, coeffs, pivots })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Target modes in elimination order.
    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|s| s.target as usize)
    }

    /// Pivot coefficients in elimination order.
    pub fn pivots(&self) -> &[f64] {
        &self.pivots
    }

    /// Number of multiply-add operations of one application.
    pub fn op_count(&self) -> usize {
        self.coeffs.len()
    }

    pub fn input_len(&self) -> usize {
        num_modes(2, self.order)
    }

    pub fn output_len(&self) -> usize {
        if self.order == 0 {
            0
        } else {
            num_modes(2, self.order - 1)
        }
    }

    /// `w = D v`. `scratch` must hold `input_len()` entries; `w` is
    /// overwritten.
    pub fn apply_into(&self, v: &[f64], w: &mut [f64], scratch: &mut [f64]) {
        debug_assert_eq!(v.len(), self.input_len());
        debug_assert_eq!(w.len(), self.output_len());
        scratch[..v.len()].copy_from_slice(v);
        w.fill(0.0);
        for s in &self.steps {
            let t = scratch[s.target as usize];
            for &(k, a) in &self.coeffs[s.deriv.0 as usize..s.deriv.1 as usize] {
                scratch[k as usize] += t * a;
            }
            for &(l, b) in &self.coeffs[s.plain.0 as usize..s.plain.1 as usize] {
                w[l as usize] += t * b;
            }
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.output_len()];
        let mut scratch = vec![0.0; self.input_len()];
        self.apply_into(v, &mut w, &mut scratch);
        w
    }

    /// `v = D^T w`; `v` is overwritten.
    pub fn apply_transpose_into(&self, w: &[f64], v: &mut [f64]) {
        debug_assert_eq!(w.len(), self.output_len());
        debug_assert_eq!(v.len(), self.input_len());
        v.fill(0.0);
        for s in self.steps.iter().rev() {
            let mut acc = 0.0;
            for &(k, a) in &self.coeffs[s.deriv.0 as usize..s.deriv.1 as usize] {
                acc += a * v[k as usize];
            }
            for &(l, b) in &self.coeffs[s.plain.0 as usize..s.plain.1 as usize] {
                acc += b * w[l as usize];
            }
            v[s.target as usize] += acc;
        }
    }

    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.input_len()];
        self.apply_transpose_into(w, &mut v);
        v
    }
}

/// Derivative of a triangle field through a freshly built [`SweepPlan`].
pub fn deriv_sweep_2d(v: &ModalField, direction: Direction) -> Result<ModalField, KernelError> {
    if v.dim != 2 {
        return Err(KernelError::WrongDimension { expected: 2, got: v.dim });
    }
    let plan = SweepPlan::new(v.order, direction)?;
    let out_order = v.order.saturating_sub(1);
    let n_out = num_modes(2, out_order);
    let mut out = ModalField::zeros(2, out_order, v.components);
    for c in 0..v.components {
        let w = plan.apply(v.component(c));
        out.coeffs[c * n_out..c * n_out + w.len()].copy_from_slice(&w);
    }
    Ok(out)
}

/// Projected derivative by quadrature; the oracle for the sweeps and the 3D
/// derivative. Output has order `max(p, 1) - 1`.
pub fn deriv_project(re: &ReferenceElement, v: &[f64], direction: Direction) -> Vec<f64> {
    let dim = re.dim();
    let n = re.num_modes();
    let n_out = num_modes(dim, re.order().saturating_sub(1));
    let axis = direction.axis();
    let mut out = vec![0.0; n_out];
    for (q, w) in re.quadrature().weights().iter().enumerate() {
        let g = re.gradients_at(q);
        let d: f64 = (0..n).map(|a| v[a] * g[a * dim + axis]).sum();
        for (o, phi) in out.iter_mut().zip(re.values_at(q)) {
            *o += w * d * phi;
        }
    }
    for (o, norm) in out.iter_mut().zip(re.norms()) {
        *o /= norm;
    }
    out
}

/// Projected directional derivative of a tetrahedron field.
pub fn deriv_project_3d(v: &ModalField, direction: Direction) -> Result<ModalField, KernelError> {
    if v.dim != 3 {
        return Err(KernelError::WrongDimension { expected: 3, got: v.dim });
    }
    let re = ReferenceElement::new(3, v.order)?;
    let out_order = v.order.saturating_sub(1);
    let mut out = ModalField::zeros(3, out_order, v.components);
    let n_out = out.num_modes();
    for c in 0..v.components {
        let w = deriv_project(&re, v.component(c), direction);
        out.coeffs[c * n_out..(c + 1) * n_out].copy_from_slice(&w);
    }
    Ok(out)
}

/// Dense derivative matrix (row-major, `N(p-1) x N(p)`) built from the
/// projection oracle.
pub fn derivative_matrix(re: &ReferenceElement, direction: Direction) -> Vec<f64> {
    let n = re.num_modes();
    let n_out = num_modes(re.dim(), re.order().saturating_sub(1));
    let mut m = vec![0.0; n_out * n];
    let mut e = vec![0.0; n];
    for col in 0..n {
        e[col] = 1.0;
        let d = deriv_project(re, &e, direction);
        for (row, val) in d.iter().enumerate() {
            m[row * n + col] = *val;
        }
        e[col] = 0.0;
    }
    m
}

/// Row-major dense matrix-vector product.
pub fn dense_matvec(m: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    for (row, o) in m.chunks_exact(cols).zip(out.iter_mut()) {
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// `(1 - r)/2 * sum c_n P_n^{(a,0)}` in the basis `P^{(a-1,0)}`; `out` has one
/// more entry than `c` and is accumulated into.
fn lower(alpha: f64, c: &[f64], out: &mut [f64]) {
    for (n, &cn) in c.iter().enumerate() {
        let nf = n as f64;
        let den = 2.0 * nf + alpha + 1.0;
        out[n] += cn * (nf + alpha) / den;
        out[n + 1] -= cn * (nf + 1.0) / den;
    }
}

fn lower_transpose(alpha: f64, o: &[f64], c: &mut [f64]) {
    for (n, cn) in c.iter_mut().enumerate() {
        let nf = n as f64;
        let den = 2.0 * nf + alpha + 1.0;
        *cn = (o[n] * (nf + alpha) - o[n + 1] * (nf + 1.0)) / den;
    }
}

/// Rewrite a series in `P^{(a,0)}` in the basis `P^{(a-1,0)}`, in place.
fn down(alpha: f64, c: &mut [f64]) {
    for n in (0..c.len()).rev() {
        let nf = n as f64;
        let cn = c[n];
        c[n] = cn * (2.0 * nf + alpha) / (nf + alpha);
        if n > 0 {
            c[n - 1] += cn * nf / (nf + alpha);
        }
    }
}

fn down_transpose(alpha: f64, c: &mut [f64]) {
    let mut prev = 0.0;
    for (n, cn) in c.iter_mut().enumerate() {
        let nf = n as f64;
        let v = *cn * (2.0 * nf + alpha) / (nf + alpha) + nf / (nf + alpha) * prev;
        *cn = v;
        prev = v;
    }
}

/// Orientation of the edge parameter relative to counter-clockwise traversal
/// of the reference triangle, per local edge.
pub const EDGE_ORIENTATION: [f64; 3] = [1.0, 1.0, -1.0];

/// Local vertex pairs of the reference edges, in parameter direction.
pub const EDGE_VERTICES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// Reference point at edge parameter `r` in `[-1, 1]`.
pub fn edge_point(edge: usize, r: f64) -> [f64; 2] {
    let s = 0.5 * (1.0 + r);
    match edge {
        0 => [s, 0.0],
        1 => [1.0 - s, s],
        2 => [0.0, s],
        _ => panic!("edge index out of range"),
    }
}

/// Legendre coefficients (`p + 1` of them) of the restriction of a degree-`p`
/// triangle field to a reference edge, parametrized from the lower to the
/// higher local vertex.
pub fn trace_coeffs(p: usize, v: &[f64], edge: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), p + 1);
    match edge {
        2 => {
            for (m, o) in out.iter_mut().enumerate() {
                *o = (0..=p - m)
                    .map(|j| if j % 2 == 0 { v[mode_index_2d(m, j)] } else { -v[mode_index_2d(m, j)] })
                    .sum();
            }
        }
        0 | 1 => {
            let sign = |i: usize| if edge == 0 && i % 2 == 1 { -1.0 } else { 1.0 };
            out.fill(0.0);
            // Horner over i: T <- Down(Lower(T)) + U_i, with T held in out[..len]
            let mut tmp = vec![0.0; p + 1];
            out[0] = sign(p) * v[mode_index_2d(p, 0)];
            for i in (0..p).rev() {
                let len = p - i;
                tmp[..=len].fill(0.0);
                lower(2.0 * i as f64 + 3.0, &out[..len], &mut tmp[..=len]);
                down(2.0 * i as f64 + 2.0, &mut tmp[..=len]);
                for j in 0..=len {
                    out[j] = tmp[j] + sign(i) * v[mode_index_2d(i, j)];
                }
            }
            down(1.0, out);
            if edge == 1 {
                for o in out.iter_mut().skip(1).step_by(2) {
                    *o = -*o;
                }
            }
        }
        _ => panic!("edge index out of range"),
    }
}

/// Transpose of [`trace_coeffs`], accumulated into `v`.
pub fn trace_transpose_add(p: usize, g: &[f64], edge: usize, v: &mut [f64]) {
    debug_assert_eq!(g.len(), p + 1);
    match edge {
        2 => {
            for (m, &gm) in g.iter().enumerate() {
                for j in 0..=p - m {
                    v[mode_index_2d(m, j)] += if j % 2 == 0 { gm } else { -gm };
                }
            }
        }
        0 | 1 => {
            let sign = |i: usize| if edge == 0 && i % 2 == 1 { -1.0 } else { 1.0 };
            let mut t = g.to_vec();
            if edge == 1 {
                for o in t.iter_mut().skip(1).step_by(2) {
                    *o = -*o;
                }
            }
            down_transpose(1.0, &mut t);
            let mut tmp = vec![0.0; p + 1];
            for i in 0..p {
                let len = p - i;
                for j in 0..=len {
                    v[mode_index_2d(i, j)] += sign(i) * t[j];
                }
                down_transpose(2.0 * i as f64 + 2.0, &mut t[..=len]);
                lower_transpose(2.0 * i as f64 + 3.0, &t[..=len], &mut tmp[..len]);
                t[..len].copy_from_slice(&tmp[..len]);
            }
            v[mode_index_2d(p, 0)] += sign(p) * t[0];
        }
        _ => panic!("edge index out of range"),
    }
}

/// Edge trace of a scalar triangle field.
pub fn trace_edge(v: &ModalField, edge: usize) -> Result<Vec<f64>, KernelError> {
    if v.dim != 2 {
        return Err(KernelError::WrongDimension { expected: 2, got: v.dim });
    }
    if edge > 2 {
        return Err(KernelError::BadEdge(edge));
    }
    let mut out = vec![0.0; v.order + 1];
    trace_coeffs(v.order, v.component(0), edge, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{eval_field, eval_shape_2d, index_set};
    use crate::polys::{eval_jacobi, eval_legendre};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let den = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    #[test]
    fn legendre_sweep_examples() {
        assert!(deriv_sweep_1d(&[3.0]).is_empty());
        let w = deriv_sweep_1d(&[1.0 / 3.0, 0.0, 2.0 / 3.0]);
        assert!((w[0]).abs() < 1e-15 && (w[1] - 2.0).abs() < 1e-15);
        // unit top mode: w_{n-1} = 2n - 1
        for n in 1..10 {
            let mut v = vec![0.0; n + 1];
            v[n] = 1.0;
            let w = deriv_sweep_1d(&v);
            assert_eq!(w[n - 1], (2 * n - 1) as f64);
            // pointwise check against the analytic derivative
            for &x in &[-0.7, 0.1, 0.55] {
                let lhs: f64 = w.iter().enumerate().map(|(i, c)| c * eval_legendre(i, x)).sum();
                let rhs = crate::polys::eval_jacobi_derivative(n, 0.0, 0.0, 1, x);
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_mode_is_a_target_with_nonzero_pivot() {
        for p in 0..=20 {
            for dir in [Direction::X, Direction::Y] {
                let plan = SweepPlan::new(p, dir).unwrap();
                let mut seen: Vec<usize> = plan.targets().collect();
                seen.sort();
                assert_eq!(seen, (1..num_modes(2, p)).collect::<Vec<_>>());
                assert!(plan.pivots().iter().all(|&q| q != 0.0));
            }
        }
    }

    #[test]
    fn sweep_examples() {
        let mut v = vec![0.0; num_modes(2, 3)];
        v[0] = 1.0;
        assert!(SweepPlan::new(3, Direction::X).unwrap().apply(&v).iter().all(|&c| c == 0.0));
        v[0] = 0.0;
        v[mode_index_2d(1, 0)] = 1.0;
        let dx = SweepPlan::new(3, Direction::X).unwrap().apply(&v);
        assert!((dx[0] - 1.0).abs() < 1e-14);
        assert!(dx[1..].iter().all(|c| c.abs() < 1e-14));
        let dy = SweepPlan::new(3, Direction::Y).unwrap().apply(&v);
        assert!((dy[0] - 2.0).abs() < 1e-14);
        assert!(dy[1..].iter().all(|c| c.abs() < 1e-14));
    }

    #[test]
    fn sweep_matches_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in 0..=12 {
            let re = ReferenceElement::new(2, p).unwrap();
            for dir in [Direction::X, Direction::Y] {
                let plan = SweepPlan::new(p, dir).unwrap();
                for _ in 0..5 {
                    let v = random_vec(&mut rng, re.num_modes());
                    let got = plan.apply(&v);
                    let want = deriv_project(&re, &v, dir);
                    if p == 0 {
                        assert!(got.is_empty() && want.iter().all(|&c| c == 0.0));
                    } else {
                        assert!(rel_diff(&got, &want) < 1e-10, "p={p} {dir:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn sweep_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in 1..=10 {
            for dir in [Direction::X, Direction::Y] {
                let plan = SweepPlan::new(p, dir).unwrap();
                let v = random_vec(&mut rng, plan.input_len());
                let g = random_vec(&mut rng, plan.output_len());
                let lhs: f64 = plan.apply(&v).iter().zip(&g).map(|(a, b)| a * b).sum();
                let rhs: f64 = v.iter().zip(&plan.apply_transpose(&g)).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-11 * (1.0 + lhs.abs()), "p={p}");
            }
        }
    }

    #[test]
    fn op_count_is_linear() {
        for p in 4..=32 {
            for dir in [Direction::X, Direction::Y] {
                let plan = SweepPlan::new(p, dir).unwrap();
                assert!(plan.op_count() <= 8 * num_modes(2, p));
            }
        }
    }

    #[test]
    fn jacobi_lowering_and_conversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for alpha in [1.0, 2.0, 5.0, 8.0] {
            let c = random_vec(&mut rng, 6);
            let mut low = vec![0.0; 7];
            lower(alpha, &c, &mut low);
            let mut conv = c.clone();
            down(alpha, &mut conv);
            for &x in &[-0.9, -0.2, 0.4, 1.0] {
                let orig: f64 =
                    c.iter().enumerate().map(|(n, a)| a * eval_jacobi(n, alpha, 0.0, x)).sum();
                let l: f64 = low
                    .iter()
                    .enumerate()
                    .map(|(n, a)| a * eval_jacobi(n, alpha - 1.0, 0.0, x))
                    .sum();
                let d: f64 = conv
                    .iter()
                    .enumerate()
                    .map(|(n, a)| a * eval_jacobi(n, alpha - 1.0, 0.0, x))
                    .sum();
                assert!((l - 0.5 * (1.0 - x) * orig).abs() < 1e-13);
                assert!((d - orig).abs() < 1e-13);
            }
            // transposes
            let g = random_vec(&mut rng, 7);
            let mut lt = vec![0.0; 6];
            lower_transpose(alpha, &g, &mut lt);
            let lhs: f64 = low.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = c.iter().zip(&lt).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-13);
            let g6 = &g[..6];
            let mut dt = g6.to_vec();
            down_transpose(alpha, &mut dt);
            let lhs: f64 = conv.iter().zip(g6).map(|(a, b)| a * b).sum();
            let rhs: f64 = c.iter().zip(&dt).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-13);
        }
    }

    #[test]
    fn trace_examples() {
        let p = 5;
        let mut one = ModalField::zeros(2, p, 1);
        one.coeffs[0] = 1.0;
        for e in 0..3 {
            let t = trace_edge(&one, e).unwrap();
            assert!((t[0] - 1.0).abs() < 1e-14);
            assert!(t[1..].iter().all(|c| c.abs() < 1e-14));
        }
        for (a, m) in index_set(2, p).iter().enumerate() {
            let mut f = ModalField::zeros(2, p, 1);
            f.coeffs[a] = 1.0;
            let t = trace_edge(&f, 2).unwrap();
            for (k, c) in t.iter().enumerate() {
                let want = if k == m[0] { if m[1] % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 };
                assert_eq!(*c, want);
            }
        }
        assert_eq!(trace_edge(&one, 3), Err(KernelError::BadEdge(3)));
    }

    #[test]
    fn trace_matches_pointwise_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in 0..=12 {
            let field = ModalField::scalar(2, p, random_vec(&mut rng, num_modes(2, p)));
            for e in 0..3 {
                let t = trace_edge(&field, e).unwrap();
                let scale = t.iter().fold(1.0f64, |m, c| m.max(c.abs()));
                for k in 0..20 {
                    let r = -1.0 + 2.0 * k as f64 / 19.0;
                    let pt = edge_point(e, r);
                    let direct = eval_field(&field, &pt)[0];
                    let via: f64 = t.iter().enumerate().map(|(n, c)| c * eval_legendre(n, r)).sum();
                    assert!((direct - via).abs() < 1e-11 * scale, "p={p} e={e}");
                }
            }
        }
    }

    #[test]
    fn trace_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in 0..=9 {
            for e in 0..3 {
                let v = random_vec(&mut rng, num_modes(2, p));
                let g = random_vec(&mut rng, p + 1);
                let mut t = vec![0.0; p + 1];
                trace_coeffs(p, &v, e, &mut t);
                let mut vt = vec![0.0; v.len()];
                trace_transpose_add(p, &g, e, &mut vt);
                let lhs: f64 = t.iter().zip(&g).map(|(a, b)| a * b).sum();
                let rhs: f64 = v.iter().zip(&vt).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()), "p={p} e={e}");
            }
        }
    }

    #[test]
    fn derivative_3d_examples() {
        let mut c = ModalField::zeros(3, 3, 1);
        c.coeffs[0] = 4.0;
        let d = deriv_project_3d(&c, Direction::X).unwrap();
        assert!(d.coeffs.iter().all(|x| x.abs() < 1e-13));
        let mut f = ModalField::zeros(3, 3, 1);
        f.coeffs[crate::basis::mode_index_3d(1, 0, 0)] = 1.0;
        let d = deriv_project_3d(&f, Direction::Z).unwrap();
        assert!((d.coeffs[0] - 2.0).abs() < 1e-13);
        assert!(d.coeffs[1..].iter().all(|x| x.abs() < 1e-13));
    }

    #[test]
    fn derivative_3d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = 4;
        let field = ModalField::scalar(3, p, random_vec(&mut rng, num_modes(3, p)));
        for dir in [Direction::X, Direction::Y, Direction::Z] {
            let d = deriv_project_3d(&field, dir).unwrap();
            for _ in 0..10 {
                let pt: [f64; 3] = loop {
                    let c = [rng.random(), rng.random(), rng.random()];
                    if c.iter().sum::<f64>() < 0.9 && c.iter().all(|&v| v > 0.05) {
                        break c;
                    }
                };
                let h = 1e-5;
                let mut plus = pt;
                let mut minus = pt;
                plus[dir.axis()] += h;
                minus[dir.axis()] -= h;
                let fd = (eval_field(&field, &plus)[0] - eval_field(&field, &minus)[0]) / (2.0 * h);
                let got = eval_field(&d, &pt)[0];
                assert!((fd - got).abs() < 1e-7 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn shape_identity_at_hypotenuse() {
        // phi_ij on x + y = 1 reduces to P_j^{(2i+1,0)}(2x-1) (1-x)^i
        for (i, j) in [(0, 2), (3, 1), (2, 4)] {
            let x = 0.3;
            let want = (1.0 - x as f64).powi(i as i32) * eval_jacobi(j, 2.0 * i as f64 + 1.0, 0.0, 2.0 * x - 1.0);
            assert!((eval_shape_2d(i, j, x, 1.0 - x) - want).abs() < 1e-13);
        }
    }
}
