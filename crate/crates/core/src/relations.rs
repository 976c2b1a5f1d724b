//! Mixed shift/derivative operator relations and their numeric verification.
//!
//! An [`OreRelation`] is a finite sum of terms `c(n, x) * D^d S^s`, where `S`
//! shifts the discrete indices of a function family, `D` differentiates in
//! the continuous variables and `c` is a polynomial with rational
//! coefficients. Applying a relation to a [`Family`] at one index and point
//! gives a residual that vanishes when the relation annihilates the family.
//!
//! [`solve_ansatz_numeric`] recovers relations from a prescribed support by a
//! nullspace computation on sampled evaluations.

use crate::basis::{shape_2d, shape_3d};
use crate::jet::Jet;
use crate::polys::{eval_jacobi_derivative, eval_legendre};
use nalgebra::DMatrix;
use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelationError {
    #[error("relation has no terms")]
    Empty,
    #[error("relation has only zero coefficients")]
    AllZero,
    #[error("expected {expected} {what}, got {got}")]
    Arity { what: &'static str, expected: usize, got: usize },
    #[error("family cannot evaluate derivative order {0:?}")]
    UnsupportedDerivative(Vec<u32>),
    #[error("family value is not finite at index {0:?}")]
    NonFinite(Vec<i64>),
    #[error("duplicated sample {0}")]
    DuplicateSamples(String),
    #[error("{rows} sample rows cannot determine {unknowns} unknowns")]
    InsufficientSamples { rows: usize, unknowns: usize },
}

/// Polynomial with rational coefficients in `nvars` variables; monomials are
/// keyed by their exponent vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Poly {
    nvars: usize,
    terms: BTreeMap<Vec<u32>, Rational64>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Poly { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: Rational64) -> Self {
        let mut p = Poly::zero(nvars);
        p.add_term(vec![0; nvars], c);
        p
    }

    pub fn int(nvars: usize, c: i64) -> Self {
        Poly::constant(nvars, Rational64::from_integer(c))
    }

    /// `c0 + sum_k coeffs[k] * var_k`.
    pub fn affine(nvars: usize, c0: i64, coeffs: &[i64]) -> Self {
        let mut p = Poly::int(nvars, c0);
        for (k, &c) in coeffs.iter().enumerate() {
            let mut e = vec![0; nvars];
            e[k] = 1;
            p.add_term(e, Rational64::from_integer(c));
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u32], &Rational64)> {
        self.terms.iter().map(|(e, c)| (e.as_slice(), c))
    }

    pub fn add_term(&mut self, exps: Vec<u32>, c: Rational64) {
        assert_eq!(exps.len(), self.nvars);
        let entry = self.terms.entry(exps).or_insert_with(Rational64::zero);
        *entry += c;
        if entry.is_zero() {
            self.terms.retain(|_, v| !v.is_zero());
        }
    }

    /// True when no monomial involves variables `first..`.
    pub fn is_free_of(&self, first: usize) -> bool {
        self.terms.keys().all(|e| e[first..].iter().all(|&x| x == 0))
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                let m: f64 = e.iter().zip(vars).map(|(&k, v)| v.powi(k as i32)).product();
                c.to_f64().unwrap_or(f64::NAN) * m
            })
            .sum()
    }

    pub fn scale(&self, c: Rational64) -> Poly {
        let mut out = Poly::zero(self.nvars);
        if !c.is_zero() {
            for (e, v) in &self.terms {
                out.terms.insert(e.clone(), *v * c);
            }
        }
        out
    }
}

impl std::ops::Add for &Poly {
    type Output = Poly;
    fn add(self, o: &Poly) -> Poly {
        let mut out = self.clone();
        for (e, c) in &o.terms {
            out.add_term(e.clone(), *c);
        }
        out
    }
}

impl std::ops::Mul for &Poly {
    type Output = Poly;
    fn mul(self, o: &Poly) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &o.terms {
                let e = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, *ca * *cb);
            }
        }
        out
    }
}

/// Product of affine factors, each given as `(c0, [coeffs])`.
fn product(nvars: usize, scale: i64, factors: &[(i64, &[i64])]) -> Poly {
    factors
        .iter()
        .fold(Poly::int(nvars, scale), |acc, (c0, c)| &acc * &Poly::affine(nvars, *c0, c))
}

/// One operator term: `coeff * D^deriv S^shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub shift: Vec<i64>,
    pub deriv: Vec<u32>,
    pub coeff: Poly,
}

/// Finite sum of shift/derivative terms with polynomial coefficients in the
/// discrete indices followed by the continuous variables.
#[derive(Debug, Clone, PartialEq)]
pub struct OreRelation {
    num_indices: usize,
    num_vars: usize,
    terms: Vec<Term>,
}

impl OreRelation {
    pub fn new(num_indices: usize, num_vars: usize, terms: Vec<Term>) -> Result<Self, RelationError> {
        if terms.is_empty() {
            return Err(RelationError::Empty);
        }
        for t in &terms {
            if t.shift.len() != num_indices {
                return Err(RelationError::Arity { what: "shifts", expected: num_indices, got: t.shift.len() });
            }
            if t.deriv.len() != num_vars {
                return Err(RelationError::Arity { what: "derivative orders", expected: num_vars, got: t.deriv.len() });
            }
            if t.coeff.nvars() != num_indices + num_vars {
                return Err(RelationError::Arity {
                    what: "coefficient variables",
                    expected: num_indices + num_vars,
                    got: t.coeff.nvars(),
                });
            }
        }
        if terms.iter().all(|t| t.coeff.is_zero()) {
            return Err(RelationError::AllZero);
        }
        Ok(OreRelation { num_indices, num_vars, terms })
    }

    pub fn num_indices(&self) -> usize {
        self.num_indices
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn terms_mut(&mut self) -> &mut [Term] {
        &mut self.terms
    }

    /// True when no coefficient depends on the continuous variables.
    pub fn is_free_of_continuous(&self) -> bool {
        self.terms.iter().all(|t| t.coeff.is_free_of(self.num_indices))
    }

    /// Operator sum; like monomials are merged and may cancel completely.
    pub fn plus(&self, other: &OreRelation) -> OreRelation {
        assert_eq!((self.num_indices, self.num_vars), (other.num_indices, other.num_vars));
        let mut terms = self.terms.clone();
        for t in &other.terms {
            match terms.iter_mut().find(|s| s.shift == t.shift && s.deriv == t.deriv) {
                Some(s) => s.coeff = &s.coeff + &t.coeff,
                None => terms.push(t.clone()),
            }
        }
        terms.retain(|t| !t.coeff.is_zero());
        OreRelation { num_indices: self.num_indices, num_vars: self.num_vars, terms }
    }

    pub fn scaled(&self, c: Rational64) -> OreRelation {
        let terms = self
            .terms
            .iter()
            .map(|t| Term { coeff: t.coeff.scale(c), ..t.clone() })
            .filter(|t| !t.coeff.is_zero())
            .collect();
        OreRelation { terms, ..*self }
    }
}

/// A function family indexed by integers, evaluable with derivatives.
/// Indices with a negative entry denote the zero function.
pub trait Family {
    fn num_indices(&self) -> usize;
    fn num_vars(&self) -> usize;
    fn eval(&self, index: &[i64], point: &[f64], deriv: &[u32]) -> Result<f64, RelationError>;
}

/// Legendre polynomials `P_n(x)`, any derivative order.
#[derive(Debug, Clone, Copy, Default)]
pub struct LegendreFamily;

impl Family for LegendreFamily {
    fn num_indices(&self) -> usize {
        1
    }
    fn num_vars(&self) -> usize {
        1
    }
    fn eval(&self, index: &[i64], point: &[f64], deriv: &[u32]) -> Result<f64, RelationError> {
        if index[0] < 0 {
            return Ok(0.0);
        }
        let n = index[0] as usize;
        Ok(match deriv[0] {
            0 => eval_legendre(n, point[0]),
            k => eval_jacobi_derivative(n, 0.0, 0.0, k as usize, point[0]),
        })
    }
}

/// Triangle shape functions `phi_{i,j}(x, y)`, derivatives of order `<= 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Dubiner2D;

impl Family for Dubiner2D {
    fn num_indices(&self) -> usize {
        2
    }
    fn num_vars(&self) -> usize {
        2
    }
    fn eval(&self, index: &[i64], point: &[f64], deriv: &[u32]) -> Result<f64, RelationError> {
        if index.iter().any(|&k| k < 0) {
            return Ok(0.0);
        }
        let (i, j) = (index[0] as usize, index[1] as usize);
        match deriv {
            [0, 0] => Ok(shape_2d(i, j, point[0], point[1])),
            [1, 0] | [0, 1] => {
                let v = shape_2d(i, j, Jet::<2>::var(point[0], 0), Jet::var(point[1], 1));
                Ok(v.d[if deriv[0] == 1 { 0 } else { 1 }])
            }
            _ => Err(RelationError::UnsupportedDerivative(deriv.to_vec())),
        }
    }
}

/// Tetrahedron shape functions `phi_{i,j,k}(x, y, z)`, derivatives of order
/// `<= 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Dubiner3D;

impl Family for Dubiner3D {
    fn num_indices(&self) -> usize {
        3
    }
    fn num_vars(&self) -> usize {
        3
    }
    fn eval(&self, index: &[i64], point: &[f64], deriv: &[u32]) -> Result<f64, RelationError> {
        if index.iter().any(|&k| k < 0) {
            return Ok(0.0);
        }
        let (i, j, k) = (index[0] as usize, index[1] as usize, index[2] as usize);
        let order: u32 = deriv.iter().sum();
        match order {
            0 => Ok(shape_3d(i, j, k, point[0], point[1], point[2])),
            1 => {
                let v = shape_3d(
                    i,
                    j,
                    k,
                    Jet::<3>::var(point[0], 0),
                    Jet::var(point[1], 1),
                    Jet::var(point[2], 2),
                );
                let axis = deriv.iter().position(|&d| d == 1).unwrap_or(0);
                Ok(v.d[axis])
            }
            _ => Err(RelationError::UnsupportedDerivative(deriv.to_vec())),
        }
    }
}

/// Derivatives of any family by Richardson-extrapolated central differences
/// (two step levels), for families that only provide values.
#[derive(Debug, Clone)]
pub struct FiniteDifference<F> {
    pub inner: F,
    pub step: f64,
}

impl<F: Family> FiniteDifference<F> {
    pub fn new(inner: F) -> Self {
        FiniteDifference { inner, step: 1e-5 }
    }
}

impl<F: Family> Family for FiniteDifference<F> {
    fn num_indices(&self) -> usize {
        self.inner.num_indices()
    }
    fn num_vars(&self) -> usize {
        self.inner.num_vars()
    }
    fn eval(&self, index: &[i64], point: &[f64], deriv: &[u32]) -> Result<f64, RelationError> {
        let Some(axis) = deriv.iter().position(|&d| d > 0) else {
            return self.inner.eval(index, point, deriv);
        };
        let mut lower = deriv.to_vec();
        lower[axis] -= 1;
        let central = |h: f64| -> Result<f64, RelationError> {
            let mut p = point.to_vec();
            p[axis] = point[axis] + h;
            let plus = self.eval(index, &p, &lower)?;
            p[axis] = point[axis] - h;
            let minus = self.eval(index, &p, &lower)?;
            Ok((plus - minus) / (2.0 * h))
        };
        let coarse = central(self.step)?;
        let fine = central(0.5 * self.step)?;
        Ok((4.0 * fine - coarse) / 3.0)
    }
}

/// Value of an applied relation and the largest term magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub value: f64,
    pub scale: f64,
}

impl Residual {
    /// `|value|` relative to the largest term; zero when every term vanishes.
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.value.abs()
        } else {
            self.value.abs() / self.scale
        }
    }
}

/// `sum_terms coeff(base, point) * (D^d family)(base + shift, point)`.
pub fn apply_relation<F: Family + ?Sized>(
    rel: &OreRelation,
    family: &F,
    base: &[i64],
    point: &[f64],
) -> Result<Residual, RelationError> {
    if base.len() != rel.num_indices || family.num_indices() != rel.num_indices {
        return Err(RelationError::Arity { what: "indices", expected: rel.num_indices, got: base.len() });
    }
    if point.len() != rel.num_vars || family.num_vars() != rel.num_vars {
        return Err(RelationError::Arity { what: "coordinates", expected: rel.num_vars, got: point.len() });
    }
    let mut vars: Vec<f64> = base.iter().map(|&k| k as f64).collect();
    vars.extend_from_slice(point);
    let mut value = 0.0;
    let mut scale: f64 = 0.0;
    let mut index = vec![0i64; base.len()];
    for t in &rel.terms {
        for (k, idx) in index.iter_mut().enumerate() {
            *idx = base[k] + t.shift[k];
        }
        let f = family.eval(&index, point, &t.deriv)?;
        if !f.is_finite() {
            return Err(RelationError::NonFinite(index));
        }
        let term = t.coeff.eval(&vars) * f;
        value += term;
        scale = scale.max(term.abs());
    }
    Ok(Residual { value, scale })
}

fn lin_term(nvars: usize, shift: &[i64], deriv: &[u32], coeff: Poly) -> Term {
    debug_assert_eq!(coeff.nvars(), nvars);
    Term { shift: shift.to_vec(), deriv: deriv.to_vec(), coeff }
}

/// `D_x S_n^2 - (2n+3) S_n - D_x` on the Legendre family.
pub fn legendre_derivative_relation() -> OreRelation {
    let nv = 2;
    let terms = vec![
        lin_term(nv, &[2], &[1], Poly::int(nv, 1)),
        lin_term(nv, &[1], &[0], Poly::affine(nv, -3, &[-2])),
        lin_term(nv, &[0], &[1], Poly::int(nv, -1)),
    ];
    OreRelation::new(1, 1, terms).expect("valid relation")
}

/// `(n+2) S_n^2 - (2n+3) x S_n + (n+1)` on the Legendre family.
pub fn legendre_recurrence_relation() -> OreRelation {
    let nv = 2;
    let x = Poly::affine(nv, 0, &[0, 1]);
    let terms = vec![
        lin_term(nv, &[2], &[0], Poly::affine(nv, 2, &[1])),
        lin_term(nv, &[1], &[0], &Poly::affine(nv, -3, &[-2]) * &x),
        lin_term(nv, &[0], &[0], Poly::affine(nv, 1, &[1])),
    ];
    OreRelation::new(1, 1, terms).expect("valid relation")
}

/// `(n+1) S_n + (1 - x^2) D_x - (n+1) x`, the first-order annihilator of
/// `P_n` mixing shift and derivative.
pub fn legendre_mixed_relation() -> OreRelation {
    let nv = 2;
    let x = Poly::affine(nv, 0, &[0, 1]);
    let one_minus_x2 = &Poly::int(nv, 1) + &(&x * &x).scale(Rational64::from_integer(-1));
    let terms = vec![
        lin_term(nv, &[1], &[0], Poly::affine(nv, 1, &[1])),
        lin_term(nv, &[0], &[1], one_minus_x2),
        lin_term(nv, &[0], &[0], &Poly::affine(nv, -1, &[-1]) * &x),
    ];
    OreRelation::new(1, 1, terms).expect("valid relation")
}

/// Legendre's differential equation `(1-x^2) D_x^2 - 2x D_x + n(n+1)`.
pub fn legendre_ode_relation() -> OreRelation {
    let nv = 2;
    let x = Poly::affine(nv, 0, &[0, 1]);
    let one_minus_x2 = &Poly::int(nv, 1) + &(&x * &x).scale(Rational64::from_integer(-1));
    let n = Poly::affine(nv, 0, &[1]);
    let terms = vec![
        lin_term(nv, &[0], &[2], one_minus_x2),
        lin_term(nv, &[0], &[1], x.scale(Rational64::from_integer(-2))),
        lin_term(nv, &[0], &[0], &n * &Poly::affine(nv, 1, &[1])),
    ];
    OreRelation::new(1, 1, terms).expect("valid relation")
}

/// Relation expressing `d/dx` of the triangle shape functions.
pub fn dubiner_x_relation() -> OreRelation {
    let nv = 4;
    let dx = [1, 0];
    let none = [0, 0];
    let t = |shift: [i64; 2], deriv: &[u32], scale: i64, factors: &[(i64, &[i64])]| {
        lin_term(nv, &shift, deriv, product(nv, scale, factors))
    };
    let terms = vec![
        t([1, 2], &dx, 1, &[(5, &[2, 1]), (5, &[2, 2])]),
        t([0, 3], &dx, 1, &[(3, &[0, 1]), (5, &[2, 2])]),
        t([1, 1], &dx, 2, &[(3, &[2, 0]), (3, &[1, 1])]),
        t([0, 2], &dx, -2, &[(1, &[2, 0]), (3, &[1, 1])]),
        t([1, 1], &none, -2, &[(3, &[1, 1]), (5, &[2, 2]), (7, &[2, 2])]),
        t([1, 0], &dx, -1, &[(1, &[0, 1]), (7, &[2, 2])]),
        t([0, 2], &none, -2, &[(3, &[1, 1]), (5, &[2, 2]), (7, &[2, 2])]),
        t([0, 1], &dx, -1, &[(3, &[2, 1]), (7, &[2, 2])]),
    ];
    OreRelation::new(2, 2, terms).expect("valid relation")
}

/// Relation expressing `d/dy` of the triangle shape functions.
pub fn dubiner_y_relation() -> OreRelation {
    let nv = 4;
    let dy = [0, 1];
    let none = [0, 0];
    let t = |shift: [i64; 2], deriv: &[u32], scale: i64, factors: &[(i64, &[i64])]| {
        lin_term(nv, &shift, deriv, product(nv, scale, factors))
    };
    let terms = vec![
        t([2, 2], &dy, 1, &[(6, &[2, 1]), (7, &[2, 1]), (7, &[2, 2])]),
        t([0, 4], &dy, -1, &[(3, &[0, 1]), (4, &[0, 1]), (7, &[2, 2])]),
        t([2, 1], &dy, -4, &[(2, &[0, 1]), (4, &[1, 1]), (6, &[2, 1])]),
        t([0, 3], &dy, 4, &[(3, &[0, 1]), (4, &[1, 1]), (5, &[2, 1])]),
        t([2, 0], &dy, 1, &[(1, &[0, 1]), (2, &[0, 1]), (9, &[2, 2])]),
        t([1, 2], &none, -4, &[(3, &[2, 0]), (4, &[1, 1]), (7, &[2, 2]), (9, &[2, 2])]),
        t([0, 2], &dy, -1, &[(4, &[2, 1]), (5, &[2, 1]), (9, &[2, 2])]),
    ];
    OreRelation::new(2, 2, terms).expect("valid relation")
}

/// Support monomial of an ansatz: `D^deriv S^shift`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monomial {
    pub shift: Vec<i64>,
    pub deriv: Vec<u32>,
}

impl Monomial {
    pub fn new(shift: &[i64], deriv: &[u32]) -> Self {
        Monomial { shift: shift.to_vec(), deriv: deriv.to_vec() }
    }
}

/// The 16 monomials of the `d/dx` relation for the tetrahedron shape
/// functions, over the indices `(i, j, k)`.
pub fn tetrahedron_x_support() -> Vec<Monomial> {
    let dx = [1, 0, 0];
    let none = [0, 0, 0];
    vec![
        Monomial::new(&[1, 1, 2], &dx),
        Monomial::new(&[1, 0, 3], &dx),
        Monomial::new(&[0, 2, 2], &dx),
        Monomial::new(&[0, 1, 3], &dx),
        Monomial::new(&[1, 1, 1], &dx),
        Monomial::new(&[1, 0, 2], &dx),
        Monomial::new(&[0, 2, 1], &dx),
        Monomial::new(&[0, 1, 2], &dx),
        Monomial::new(&[1, 1, 1], &none),
        Monomial::new(&[1, 1, 0], &dx),
        Monomial::new(&[1, 0, 2], &none),
        Monomial::new(&[1, 0, 1], &dx),
        Monomial::new(&[0, 2, 1], &none),
        Monomial::new(&[0, 2, 0], &dx),
        Monomial::new(&[0, 1, 2], &none),
        Monomial::new(&[0, 1, 1], &dx),
    ]
}

/// A relation recovered from sampled evaluations.
#[derive(Debug, Clone)]
pub struct AnsatzSolution {
    /// Exponent vectors of the coefficient model, over the discrete indices.
    pub index_monomials: Vec<Vec<u32>>,
    /// Per support monomial, one value per entry of `index_monomials`;
    /// normalized so the largest magnitude is 1.
    pub coefficients: Vec<Vec<f64>>,
    /// Rationalized coefficients as polynomials in the discrete indices,
    /// `None` where a value had no small-denominator approximation.
    pub rational: Vec<Option<Poly>>,
    pub singular_values: Vec<f64>,
    /// Number of singular values at or below the relative threshold.
    pub nullity: usize,
    /// Smallest nonzero singular value over the largest zero one.
    pub gap: f64,
}

impl AnsatzSolution {
    /// Coefficient of support monomial `m` at the given indices.
    pub fn coefficient_at(&self, m: usize, index: &[i64]) -> f64 {
        self.index_monomials
            .iter()
            .zip(&self.coefficients[m])
            .map(|(e, c)| c * e.iter().zip(index).map(|(&k, &n)| (n as f64).powi(k as i32)).product::<f64>())
            .sum()
    }

    /// The recovered relation with floating coefficients rounded to
    /// rationals, for re-checking with [`apply_relation`].
    pub fn to_relation(&self, support: &[Monomial], num_vars: usize) -> Result<OreRelation, RelationError> {
        let nd = support.first().map_or(0, |m| m.shift.len());
        let nv = nd + num_vars;
        let terms = support
            .iter()
            .enumerate()
            .map(|(m, mono)| {
                let mut coeff = Poly::zero(nv);
                for (e, c) in self.index_monomials.iter().zip(&self.coefficients[m]) {
                    let mut full = e.clone();
                    full.resize(nv, 0);
                    let r = rationalize(*c, 1e-12).unwrap_or_else(|| {
                        Rational64::approximate_float(*c).unwrap_or_else(Rational64::zero)
                    });
                    coeff.add_term(full, r);
                }
                Term { shift: mono.shift.clone(), deriv: mono.deriv.clone(), coeff }
            })
            .collect();
        OreRelation::new(nd, num_vars, terms)
    }
}

#[derive(Debug, Clone)]
pub enum AnsatzOutcome {
    Relation(AnsatzSolution),
    NoRelation { sigma_ratio: f64 },
}

/// Relative singular-value threshold below which a direction counts as a
/// nullspace direction.
pub const NULLSPACE_THRESHOLD: f64 = 1e-8;

/// Best rational approximation with denominator at most `10^6` within `tol`
/// (relative to `max(1, |x|)`), by continued fractions.
pub fn rationalize(x: f64, tol: f64) -> Option<Rational64> {
    let target = tol * x.abs().max(1.0);
    let (mut h0, mut h1) = (0i64, 1i64);
    let (mut k0, mut k1) = (1i64, 0i64);
    let mut r = x;
    for _ in 0..40 {
        let a = r.floor();
        if a.abs() > 1e12 {
            return None;
        }
        let a = a as i64;
        let h2 = a.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a.checked_mul(k1)?.checked_add(k0)?;
        if k2 > 1_000_000 {
            return None;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if (x - h1 as f64 / k1 as f64).abs() <= target {
            return Some(Rational64::new(h1, k1));
        }
        let frac = r - a as f64;
        if frac == 0.0 {
            return None;
        }
        r = 1.0 / frac;
    }
    None
}

fn exponents_up_to(nvars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; nvars]];
    for d in 1..=degree {
        let mut level = Vec::new();
        let mut stack = vec![(Vec::new(), d)];
        while let Some((prefix, rest)) = stack.pop() {
            if prefix.len() == nvars - 1 {
                let mut e: Vec<u32> = prefix;
                e.push(rest as u32);
                level.push(e);
                continue;
            }
            for k in (0..=rest).rev() {
                let mut p = prefix.clone();
                p.push(k as u32);
                stack.push((p, rest - k));
            }
        }
        out.extend(level);
    }
    out
}

/// Recover a relation with the given support whose coefficients are
/// polynomials of degree `<= coeff_degree` in the discrete indices, from
/// evaluations at every pair of index and point samples.
pub fn solve_ansatz_numeric<F: Family + ?Sized>(
    support: &[Monomial],
    family: &F,
    index_samples: &[Vec<i64>],
    point_samples: &[Vec<f64>],
    coeff_degree: usize,
) -> Result<AnsatzOutcome, RelationError> {
    if support.is_empty() {
        return Err(RelationError::Empty);
    }
    let nd = family.num_indices();
    for (a, s) in index_samples.iter().enumerate() {
        if index_samples[..a].contains(s) {
            return Err(RelationError::DuplicateSamples(format!("index {s:?}")));
        }
    }
    for (a, s) in point_samples.iter().enumerate() {
        if point_samples[..a].contains(s) {
            return Err(RelationError::DuplicateSamples(format!("point {s:?}")));
        }
    }
    let index_monomials = exponents_up_to(nd, coeff_degree);
    let nm = index_monomials.len();
    let unknowns = support.len() * nm;
    let rows = index_samples.len() * point_samples.len();
    if rows < unknowns {
        return Err(RelationError::InsufficientSamples { rows, unknowns });
    }
    let mut a = DMatrix::<f64>::zeros(rows, unknowns);
    let mut shifted = vec![0i64; nd];
    for (si, base) in index_samples.iter().enumerate() {
        let powers: Vec<f64> = index_monomials
            .iter()
            .map(|e| e.iter().zip(base).map(|(&k, &n)| (n as f64).powi(k as i32)).product())
            .collect();
        for (pi, pt) in point_samples.iter().enumerate() {
            let row = si * point_samples.len() + pi;
            for (m, mono) in support.iter().enumerate() {
                for (k, s) in shifted.iter_mut().enumerate() {
                    *s = base[k] + mono.shift[k];
                }
                let f = family.eval(&shifted, pt, &mono.deriv)?;
                if !f.is_finite() {
                    return Err(RelationError::NonFinite(shifted.clone()));
                }
                for (e, pw) in powers.iter().enumerate() {
                    a[(row, m * nm + e)] = f * pw;
                }
            }
        }
    }
    let norms: Vec<f64> = (0..unknowns)
        .map(|c| {
            let n = a.column(c).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    for (c, n) in norms.iter().enumerate() {
        a.column_mut(c).scale_mut(1.0 / n);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let sigma: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let smax = sigma[0];
    let nullity = sigma.iter().filter(|&&s| s <= NULLSPACE_THRESHOLD * smax).count();
    if nullity == 0 || smax == 0.0 {
        return Ok(AnsatzOutcome::NoRelation { sigma_ratio: sigma[sigma.len() - 1] / smax });
    }
    let rank = sigma.len() - nullity;
    let gap = if rank == 0 {
        f64::INFINITY
    } else if sigma[rank] == 0.0 {
        f64::INFINITY
    } else {
        sigma[rank - 1] / sigma[rank]
    };
    let null_row = order[sigma.len() - 1];
    let mut theta: Vec<f64> = (0..unknowns).map(|c| v_t[(null_row, c)] / norms[c]).collect();
    let pivot = theta.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
    for t in theta.iter_mut() {
        *t /= pivot;
    }
    let coefficients: Vec<Vec<f64>> = theta.chunks(nm).map(|c| c.to_vec()).collect();
    let rational = coefficients
        .iter()
        .map(|cs| {
            let mut p = Poly::zero(nd);
            for (e, c) in index_monomials.iter().zip(cs) {
                p.add_term(e.clone(), rationalize(*c, 1e-9)?);
            }
            Some(p)
        })
        .collect();
    Ok(AnsatzOutcome::Relation(AnsatzSolution {
        index_monomials,
        coefficients,
        rational,
        singular_values: sigma,
        nullity,
        gap,
    }))
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelationReport {
    pub rows: Vec<ReportRow>,
}

impl RelationReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(8).max(8);
        let mut s = format!("{:<width$}  {:>12}  {:>9}  result\n", "relation", "max_resid", "tol");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>12.3e}  {:>9.1e}  {}",
                r.id,
                r.max_residual,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("relation,max_residual,passed\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6e},{}", r.id, r.max_residual, r.passed);
        }
        s
    }
}

/// Seed of the fixed sample points used by [`verify_printed_relations`].
pub const VERIFY_SEED: u64 = 0x5eed;

/// Tolerance for the printed relations.
pub const VERIFY_TOLERANCE: f64 = 1e-9;

/// Random points strictly inside the reference triangle.
pub fn interior_triangle_points(rng: &mut impl Rng, count: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (x, y): (f64, f64) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
        if x + y < 0.99 {
            out.push(vec![x, y]);
        }
    }
    out
}

/// Random points strictly inside the reference tetrahedron.
pub fn interior_tetrahedron_points(rng: &mut impl Rng, count: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..0.99)).collect();
        if p.iter().sum::<f64>() < 0.99 {
            out.push(p);
        }
    }
    out
}

/// Largest relative residual over all base indices and points.
pub fn max_relative_residual<F: Family + ?Sized>(
    rel: &OreRelation,
    family: &F,
    bases: &[Vec<i64>],
    points: &[Vec<f64>],
) -> Result<f64, RelationError> {
    let mut worst: f64 = 0.0;
    for b in bases {
        for p in points {
            worst = worst.max(apply_relation(rel, family, b, p)?.relative());
        }
    }
    Ok(worst)
}

/// Relative deviation of the recovered Legendre ansatz from the multiple of
/// `(-1, 1, 2n+3)` over `n <= 20`, or infinity when no relation is found.
pub fn legendre_ansatz_deviation(rng: &mut impl Rng) -> Result<f64, RelationError> {
    let support = vec![Monomial::new(&[2], &[1]), Monomial::new(&[0], &[1]), Monomial::new(&[1], &[0])];
    let indices: Vec<Vec<i64>> = (0..10).map(|n| vec![n]).collect();
    let points: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random_range(-0.95..0.95)]).collect();
    let AnsatzOutcome::Relation(sol) = solve_ansatz_numeric(&support, &LegendreFamily, &indices, &points, 1)?
    else {
        return Ok(f64::INFINITY);
    };
    let mut worst: f64 = 0.0;
    for n in 0..=20 {
        let c: Vec<f64> = (0..3).map(|m| sol.coefficient_at(m, &[n])).collect();
        let unit = c[1];
        let want = [-1.0, 1.0, 2.0 * n as f64 + 3.0];
        for (got, w) in c.iter().zip(want) {
            worst = worst.max((got / unit - w).abs() / w.abs());
        }
    }
    Ok(worst)
}

/// Check every printed relation on fixed random samples.
pub fn verify_printed_relations() -> RelationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED);
    let mut rows = Vec::new();
    let mut push = |id: &str, r: Result<f64, RelationError>| {
        let max_residual = r.unwrap_or(f64::INFINITY);
        rows.push(ReportRow {
            id: id.to_string(),
            max_residual,
            tolerance: VERIFY_TOLERANCE,
            passed: max_residual <= VERIFY_TOLERANCE,
        });
    };

    let line: Vec<Vec<f64>> = (0..25).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let ns: Vec<Vec<i64>> = (0..=20).map(|n| vec![n]).collect();
    push("legendre-derivative", max_relative_residual(&legendre_derivative_relation(), &LegendreFamily, &ns, &line));
    push("legendre-recurrence", max_relative_residual(&legendre_recurrence_relation(), &LegendreFamily, &ns, &line));
    push("legendre-mixed", max_relative_residual(&legendre_mixed_relation(), &LegendreFamily, &ns, &line));
    push("legendre-ode", max_relative_residual(&legendre_ode_relation(), &LegendreFamily, &ns, &line));
    push("legendre-ansatz", legendre_ansatz_deviation(&mut rng));

    let pts = interior_triangle_points(&mut rng, 25);
    let ij: Vec<Vec<i64>> = (0..=8).flat_map(|i| (0..=8).map(move |j| vec![i, j])).collect();
    push("dubiner-x", max_relative_residual(&dubiner_x_relation(), &Dubiner2D, &ij, &pts));
    push("dubiner-y", max_relative_residual(&dubiner_y_relation(), &Dubiner2D, &ij, &pts));
    RelationReport { rows }
}

/// Nullspace check of the tetrahedron support at one index triple: returns
/// `(nullity, gap)`.
pub fn tetrahedron_support_nullspace(index: [i64; 3], points: &[Vec<f64>]) -> Result<(usize, f64), RelationError> {
    let support = tetrahedron_x_support();
    match solve_ansatz_numeric(&support, &Dubiner3D, &[index.to_vec()], points, 0)? {
        AnsatzOutcome::Relation(sol) => Ok((sol.nullity, sol.gap)),
        AnsatzOutcome::NoRelation { .. } => Ok((0, 1.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_arithmetic() {
        let p = Poly::affine(2, 3, &[2, 1]);
        let q = Poly::affine(2, -1, &[1, 0]);
        let pq = &p * &q;
        assert_eq!(pq.eval(&[2.0, 5.0]), (3.0 + 4.0 + 5.0) * (2.0 - 1.0));
        let zero = &p + &p.scale(Rational64::from_integer(-1));
        assert!(zero.is_zero());
        assert!(Poly::affine(3, 1, &[1, 1]).is_free_of(2));
        assert!(!Poly::affine(3, 1, &[1, 1, 1]).is_free_of(2));
    }

    #[test]
    fn relation_validation() {
        assert_eq!(OreRelation::new(1, 1, vec![]), Err(RelationError::Empty));
        let zero = Term { shift: vec![0], deriv: vec![0], coeff: Poly::zero(2) };
        assert_eq!(OreRelation::new(1, 1, vec![zero]), Err(RelationError::AllZero));
        let bad = Term { shift: vec![0, 1], deriv: vec![0], coeff: Poly::int(2, 1) };
        assert!(matches!(OreRelation::new(1, 1, vec![bad]), Err(RelationError::Arity { .. })));
    }

    #[test]
    fn legendre_relations_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 0..=20 {
            for _ in 0..25 {
                let x = [rng.random_range(-1.0..1.0)];
                for rel in [
                    legendre_derivative_relation(),
                    legendre_recurrence_relation(),
                    legendre_mixed_relation(),
                    legendre_ode_relation(),
                ] {
                    let r = apply_relation(&rel, &LegendreFamily, &[n], &x).unwrap();
                    assert!(r.relative() <= 1e-11, "n={n} {r:?}");
                }
            }
        }
    }

    #[test]
    fn zero_operator_has_zero_residual() {
        let rel = legendre_derivative_relation();
        let zero = rel.plus(&rel.scaled(Rational64::from_integer(-1)));
        assert!(zero.terms().is_empty());
        let r = apply_relation(&zero, &LegendreFamily, &[3], &[0.2]).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.relative(), 0.0);
    }

    #[test]
    fn residual_is_linear_in_the_relation() {
        let a = dubiner_x_relation();
        let b = dubiner_y_relation();
        let sum = a.plus(&b);
        let pt = [0.23, 0.41];
        for base in [[0i64, 0], [2, 3], [5, 1]] {
            let ra = apply_relation(&a, &Dubiner2D, &base, &pt).unwrap().value;
            let rb = apply_relation(&b, &Dubiner2D, &base, &pt).unwrap().value;
            let rs = apply_relation(&sum, &Dubiner2D, &base, &pt).unwrap();
            assert!((rs.value - ra - rb).abs() <= 1e-12 * rs.scale.max(1.0));
        }
    }

    #[test]
    fn printed_relations_pass() {
        let report = verify_printed_relations();
        assert!(report.all_passed(), "{}", report.to_text());
        assert!(report.rows.iter().any(|r| r.id == "dubiner-x"));
        assert!(report.to_csv().starts_with("relation,max_residual,passed\n"));
    }

    #[test]
    fn printed_relations_are_free_of_coordinates() {
        assert!(dubiner_x_relation().is_free_of_continuous());
        assert!(dubiner_y_relation().is_free_of_continuous());
        assert!(legendre_derivative_relation().is_free_of_continuous());
        assert!(!legendre_recurrence_relation().is_free_of_continuous());
    }

    #[test]
    fn corrupted_relation_is_detected() {
        let mut rel = dubiner_x_relation();
        let c = &rel.terms()[0].coeff + &Poly::int(4, 1);
        rel.terms_mut()[0].coeff = c;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = interior_triangle_points(&mut rng, 25);
        let ij: Vec<Vec<i64>> = (0..=8).flat_map(|i| (0..=8).map(move |j| vec![i, j])).collect();
        assert!(max_relative_residual(&rel, &Dubiner2D, &ij, &pts).unwrap() > 1e-3);
    }

    #[test]
    fn finite_difference_family_matches_analytic_derivative() {
        let fd = FiniteDifference::new(Dubiner2D);
        for (idx, d) in [([2i64, 1], [1u32, 0]), ([1, 3], [0, 1])] {
            let a = Dubiner2D.eval(&idx, &[0.3, 0.2], &d).unwrap();
            let b = fd.eval(&idx, &[0.3, 0.2], &d).unwrap();
            assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        }
        let fd = FiniteDifference::new(LegendreFamily);
        let a = LegendreFamily.eval(&[5], &[0.4], &[2]).unwrap();
        let b = fd.eval(&[5], &[0.4], &[2]).unwrap();
        assert!((a - b).abs() < 1e-4 * (1.0 + a.abs()));
    }

    #[test]
    fn legendre_ansatz_recovers_known_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(legendre_ansatz_deviation(&mut rng).unwrap() < 1e-10);
    }

    #[test]
    fn recovered_relation_rechecks_at_fresh_samples() {
        let support = vec![Monomial::new(&[2], &[1]), Monomial::new(&[0], &[1]), Monomial::new(&[1], &[0])];
        let idx: Vec<Vec<i64>> = (0..8).map(|n| vec![n]).collect();
        let pts: Vec<Vec<f64>> = [-0.8, -0.3, 0.1, 0.45, 0.7].iter().map(|&x| vec![x]).collect();
        let AnsatzOutcome::Relation(sol) = solve_ansatz_numeric(&support, &LegendreFamily, &idx, &pts, 1).unwrap()
        else {
            panic!("expected a relation");
        };
        assert_eq!(sol.nullity, 1);
        assert!(sol.rational.iter().all(|r| r.is_some()));
        let rel = sol.to_relation(&support, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 10..25 {
            let x = [rng.random_range(-1.0..1.0)];
            assert!(apply_relation(&rel, &LegendreFamily, &[n], &x).unwrap().relative() <= 1e-8);
        }
    }

    #[test]
    fn single_shift_has_no_relation() {
        let idx: Vec<Vec<i64>> = (0..5).map(|n| vec![n]).collect();
        let pts: Vec<Vec<f64>> = [-0.5, 0.2, 0.6].iter().map(|&x| vec![x]).collect();
        let out = solve_ansatz_numeric(&[Monomial::new(&[1], &[0])], &LegendreFamily, &idx, &pts, 0).unwrap();
        assert!(matches!(out, AnsatzOutcome::NoRelation { .. }));
    }

    #[test]
    fn ansatz_rejects_bad_sampling() {
        let support = vec![Monomial::new(&[1], &[0]), Monomial::new(&[0], &[0])];
        let dup = vec![vec![0.1], vec![0.1], vec![0.3]];
        let err = solve_ansatz_numeric(&support, &LegendreFamily, &[vec![1]], &dup, 0).unwrap_err();
        assert!(matches!(err, RelationError::DuplicateSamples(_)));
        let err = solve_ansatz_numeric(&support, &LegendreFamily, &[vec![1]], &[vec![0.1]], 0).unwrap_err();
        assert!(matches!(err, RelationError::InsufficientSamples { .. }));
    }

    #[test]
    fn tetrahedron_support_has_nullspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = interior_tetrahedron_points(&mut rng, 48);
        for idx in [[0, 0, 0], [1, 2, 0], [3, 3, 3]] {
            let (nullity, gap) = tetrahedron_support_nullspace(idx, &pts).unwrap();
            assert!(nullity >= 1 && gap >= 1e6, "{idx:?} {nullity} {gap}");
        }
    }

    #[test]
    fn rationalize_examples() {
        assert_eq!(rationalize(1.0 / 3.0, 1e-12), Some(Rational64::new(1, 3)));
        assert_eq!(rationalize(-2.5, 1e-12), Some(Rational64::new(-5, 2)));
        assert_eq!(rationalize(std::f64::consts::PI, 1e-15), None);
    }
}
