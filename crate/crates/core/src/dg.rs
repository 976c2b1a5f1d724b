//! Spatial DG operators for the 2D TM Maxwell system.
//!
//! Unknowns are the out-of-plane electric field `E` (degree `k+1`, a scalar
//! composed with the element map), the in-plane magnetic field `H` (degree
//! `k`, covariant: `H = F^{-T} H_hat`) and one face field `H^F` per edge
//! (degree `k+1`, Legendre modes in the left element's edge parameter).
//!
//! The semi-discrete system is
//!
//! ```text
//! M_eps dE/dt = -C^T (H, H^F)
//! M_mu  dH/dt =  C_H E
//! M_F dH^F/dt =  C_F E
//! ```
//!
//! with, on element `T` and for test functions `h`, `e`:
//!
//! ```text
//! (C_H E, h) = -(curl E, h)_T - 1/2 <E_T - E_nb, h.t>_{dT}
//! (C_F E)_m  = -1/2 int [[E]] P_m dr,   [[E]] = sigma_L (E_L - E_R)
//! ```
//!
//! where `t` is the counter-clockwise unit tangent and `r` the edge
//! parameter in `[-1, 1]`. On the boundary the exterior trace is the mirror
//! `-E_T`, which imposes `E = 0` weakly. The face mass is
//! `M_F = h_F / (alpha |t|) diag(1/(2m+1))`, so that eliminating `H^F`
//! in the frequency domain adds the penalty `(alpha/h) int [[E]][[e]] ds`.
//!
//! On affine elements every curl and tangential-trace integral is the same
//! on the reference triangle, so the matrix-free applications only touch
//! geometry through the block-diagonal masses.

use crate::basis::{eval_all, eval_all_with_gradient, num_modes, BasisError, ReferenceElement};
use crate::kernels::{
    edge_point, trace_coeffs, trace_transpose_add, Direction, KernelError, SweepPlan,
    EDGE_ORIENTATION,
};
use crate::mesh::{Mesh2D, MeshError};
use crate::polys::{eval_legendre, quad_interval};
use nalgebra::DMatrix;
use rayon::prelude::*;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DgError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("{what} must be positive, got {value} on element {element}")]
    NonPositiveMaterial { what: &'static str, element: usize, value: f64 },
    #[error("stabilization constant must be finite and nonnegative, got {0}")]
    BadAlpha(f64),
    #[error("dense assembly of {dofs} unknowns exceeds the cap of {cap}")]
    TooLarge { dofs: usize, cap: usize },
    #[error("expected a vector of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Largest system handled by the dense diagnostic routines.
pub const DENSE_CAP: usize = 20_000;

/// Reference edge direction vectors, in parameter direction.
pub const EDGE_TANGENTS: [[f64; 2]; 3] = [[1.0, 0.0], [-1.0, 1.0], [0.0, 1.0]];

/// Named smooth coefficient profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// `1 + x/2`
    LinearX,
    /// `1 + y/2`
    LinearY,
}

impl Profile {
    pub fn eval(self, x: f64, y: f64) -> f64 {
        match self {
            Profile::LinearX => 1.0 + 0.5 * x,
            Profile::LinearY => 1.0 + 0.5 * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::LinearX => "linear_x",
            Profile::LinearY => "linear_y",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "linear_x" => Some(Profile::LinearX),
            "linear_y" => Some(Profile::LinearY),
            _ => None,
        }
    }
}

/// Material coefficient: one constant, one constant per element, or a
/// smooth profile over the domain.
#[derive(Clone)]
pub enum Material {
    Constant(f64),
    Elementwise(Vec<f64>),
    Profile(Profile),
    Function(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Material {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Material::Constant(c) => write!(f, "Constant({c})"),
            Material::Elementwise(v) => write!(f, "Elementwise({} values)", v.len()),
            Material::Profile(p) => write!(f, "Profile({})", p.name()),
            Material::Function(_) => write!(f, "Function"),
        }
    }
}

impl Material {
    pub fn is_piecewise_constant(&self) -> bool {
        matches!(self, Material::Constant(_) | Material::Elementwise(_))
    }

    fn element_value(&self, e: usize) -> f64 {
        match self {
            Material::Constant(c) => *c,
            Material::Elementwise(v) => v[e],
            _ => f64::NAN,
        }
    }

    pub fn eval(&self, e: usize, x: f64, y: f64) -> f64 {
        match self {
            Material::Constant(c) => *c,
            Material::Elementwise(v) => v[e],
            Material::Profile(p) => p.eval(x, y),
            Material::Function(f) => f(x, y),
        }
    }
}

/// Face size used in the stabilization weight `alpha / h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HMode {
    /// Edge length.
    Face,
    /// Smallest diameter of the incident elements.
    Element,
}

#[derive(Debug, Clone)]
pub struct DgConfig {
    /// Degree of `H`; `E` has degree `k + 1`.
    pub k: usize,
    /// Stabilization constant; zero switches the face fields off.
    pub alpha: f64,
    pub h_mode: HMode,
    pub epsilon: Material,
    pub mu: Material,
}

impl DgConfig {
    /// Unit materials, `alpha = (k+1)^2`, face-length `h`.
    pub fn new(k: usize) -> Self {
        DgConfig {
            k,
            alpha: ((k + 1) * (k + 1)) as f64,
            h_mode: HMode::Face,
            epsilon: Material::Constant(1.0),
            mu: Material::Constant(1.0),
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }
}

/// Which block of the state a vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    E,
    H,
    F,
}

/// The assembled semi-discrete system and its matrix-free operators.
#[derive(Debug, Clone)]
pub struct SemiDiscreteSystem {
    mesh: Mesh2D,
    k: usize,
    alpha: f64,
    h_mode: HMode,
    epsilon: Material,
    mu: Material,
    ref_e: ReferenceElement,
    ref_h: ReferenceElement,
    plan_x: SweepPlan,
    plan_y: SweepPlan,
    face_h: Vec<f64>,
    /// Material values at the `ref_e` quadrature points, per element, for
    /// non-constant coefficients.
    eps_nodes: Option<Vec<f64>>,
    mu_nodes: Option<Vec<f64>>,
}

fn w(m: usize) -> f64 {
    2.0 / (2 * m + 1) as f64
}

fn reparam(reversed: bool, m: usize) -> f64 {
    if reversed && m % 2 == 1 {
        -1.0
    } else {
        1.0
    }
}

impl SemiDiscreteSystem {
    pub fn new(mesh: Mesh2D, config: DgConfig) -> Result<Self, DgError> {
        let DgConfig { k, alpha, h_mode, epsilon, mu } = config;
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(DgError::BadAlpha(alpha));
        }
        let ne = mesh.num_elements();
        let ref_e = ReferenceElement::with_quadrature_order(2, k + 1, 2 * (k + 1) + 5)?;
        let ref_h = ReferenceElement::new(2, k)?;
        let plan_x = SweepPlan::new(k + 1, Direction::X)?;
        let plan_y = SweepPlan::new(k + 1, Direction::Y)?;
        let face_h = mesh
            .faces()
            .iter()
            .map(|f| match h_mode {
                HMode::Face => f.length,
                HMode::Element => {
                    let d = mesh.diameter(f.left.0);
                    f.right.map_or(d, |(r, _)| d.min(mesh.diameter(r)))
                }
            })
            .collect();
        let mut sys = SemiDiscreteSystem {
            mesh,
            k,
            alpha,
            h_mode,
            epsilon,
            mu,
            ref_e,
            ref_h,
            plan_x,
            plan_y,
            face_h,
            eps_nodes: None,
            mu_nodes: None,
        };
        for (what, mat) in [("epsilon", &sys.epsilon), ("mu", &sys.mu)] {
            if let Material::Elementwise(v) = mat {
                if v.len() != ne {
                    return Err(DgError::LengthMismatch { expected: ne, got: v.len() });
                }
            }
            if mat.is_piecewise_constant() {
                for e in 0..ne {
                    let value = mat.element_value(e);
                    if !(value > 0.0) {
                        return Err(DgError::NonPositiveMaterial { what, element: e, value });
                    }
                }
            }
        }
        if !sys.epsilon.is_piecewise_constant() {
            sys.eps_nodes = Some(sys.material_nodes(&sys.epsilon, "epsilon")?);
        }
        if !sys.mu.is_piecewise_constant() {
            sys.mu_nodes = Some(sys.material_nodes(&sys.mu, "mu")?);
        }
        Ok(sys)
    }

    fn material_nodes(&self, mat: &Material, what: &'static str) -> Result<Vec<f64>, DgError> {
        let mut out = Vec::with_capacity(self.mesh.num_elements() * self.ref_e.quadrature().len());
        for e in 0..self.mesh.num_elements() {
            let g = self.mesh.geometry(e);
            for p in self.ref_e.quadrature().points() {
                let x = g.map(p);
                let value = mat.eval(e, x[0], x[1]);
                if !(value > 0.0) {
                    return Err(DgError::NonPositiveMaterial { what, element: e, value });
                }
                out.push(value);
            }
        }
        Ok(out)
    }

    pub fn mesh(&self) -> &Mesh2D {
        &self.mesh
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn h_mode(&self) -> HMode {
        self.h_mode
    }

    pub fn epsilon(&self) -> &Material {
        &self.epsilon
    }

    pub fn mu(&self) -> &Material {
        &self.mu
    }

    pub fn ref_e(&self) -> &ReferenceElement {
        &self.ref_e
    }

    pub fn ref_h(&self) -> &ReferenceElement {
        &self.ref_h
    }

    /// Face size `h` used in the stabilization weight.
    pub fn face_size(&self, f: usize) -> f64 {
        self.face_h[f]
    }

    /// Modes of `E` per element.
    pub fn modes_e(&self) -> usize {
        num_modes(2, self.k + 1)
    }

    /// Modes of one `H` component per element.
    pub fn modes_h(&self) -> usize {
        num_modes(2, self.k)
    }

    /// Modes of `H^F` per face.
    pub fn modes_f(&self) -> usize {
        self.k + 2
    }

    pub fn len_e(&self) -> usize {
        self.mesh.num_elements() * self.modes_e()
    }

    pub fn len_h(&self) -> usize {
        self.mesh.num_elements() * 2 * self.modes_h()
    }

    pub fn len_f(&self) -> usize {
        self.mesh.num_faces() * self.modes_f()
    }

    pub fn len_total(&self) -> usize {
        self.len_e() + self.len_h() + self.len_f()
    }

    /// True when the face fields take part in the dynamics.
    pub fn has_face_fields(&self) -> bool {
        self.alpha > 0.0
    }

    fn neighbor(&self, f: usize, el: usize) -> Option<(usize, usize)> {
        let face = &self.mesh.faces()[f];
        if face.left.0 == el {
            face.right
        } else {
            Some(face.left)
        }
    }

    /// Edge traces of `E`: `k + 2` Legendre modes per element edge.
    fn e_traces(&self, e: &[f64]) -> Vec<f64> {
        let (ne, nt, p) = (self.modes_e(), self.k + 2, self.k + 1);
        let mut out = vec![0.0; self.mesh.num_elements() * 3 * nt];
        out.par_chunks_mut(3 * nt).enumerate().for_each(|(el, chunk)| {
            for l in 0..3 {
                trace_coeffs(p, &e[el * ne..(el + 1) * ne], l, &mut chunk[l * nt..(l + 1) * nt]);
            }
        });
        out
    }

    /// Signed tangential traces `sigma_l t_hat_l . H_hat` per element edge.
    fn h_traces(&self, h: &[f64]) -> Vec<f64> {
        let (nh, nt, k) = (self.modes_h(), self.k + 1, self.k);
        let mut out = vec![0.0; self.mesh.num_elements() * 3 * nt];
        out.par_chunks_mut(3 * nt).enumerate().for_each_init(
            || vec![0.0; nt],
            |tmp, (el, chunk)| {
                let hx = &h[el * 2 * nh..el * 2 * nh + nh];
                let hy = &h[el * 2 * nh + nh..(el + 1) * 2 * nh];
                for l in 0..3 {
                    let dst = &mut chunk[l * nt..(l + 1) * nt];
                    let [tx, ty] = EDGE_TANGENTS[l];
                    let s = EDGE_ORIENTATION[l];
                    dst.fill(0.0);
                    for (comp, tc) in [(hx, tx), (hy, ty)] {
                        if tc != 0.0 {
                            trace_coeffs(k, comp, l, tmp);
                            for (d, t) in dst.iter_mut().zip(tmp.iter()) {
                                *d += s * tc * t;
                            }
                        }
                    }
                }
            },
        );
        out
    }

    /// `(C_H E, C_F E)`: the right sides of the `H` and `H^F` equations.
    pub fn apply_curl_h_equation(&self, e: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut rh = vec![0.0; self.len_h()];
        let mut rf = vec![0.0; self.len_f()];
        self.apply_curl_h_into(e, &mut rh, &mut rf);
        (rh, rf)
    }

    pub fn apply_curl_h_into(&self, e: &[f64], rh: &mut [f64], rf: &mut [f64]) {
        assert_eq!(e.len(), self.len_e());
        let (ne, nh, nt, k) = (self.modes_e(), self.modes_h(), self.k + 2, self.k);
        let et = self.e_traces(e);
        let norms = self.ref_h.norms();
        let faces = self.mesh.faces();
        rh.par_chunks_mut(2 * nh).enumerate().for_each_init(
            || (vec![0.0; ne], vec![0.0; nh], vec![0.0; nh], vec![0.0; k + 1]),
            |(scratch, dx, dy, g), (el, out)| {
                let ee = &e[el * ne..(el + 1) * ne];
                self.plan_x.apply_into(ee, dx, scratch);
                self.plan_y.apply_into(ee, dy, scratch);
                let (ox, oy) = out.split_at_mut(nh);
                for b in 0..nh {
                    ox[b] = -norms[b] * dy[b];
                    oy[b] = norms[b] * dx[b];
                }
                let fids = self.mesh.element_faces(el);
                for l in 0..3 {
                    let f = fids[l];
                    let own = &et[(el * 3 + l) * nt..(el * 3 + l + 1) * nt];
                    match self.neighbor(f, el) {
                        None => {
                            for m in 0..=k {
                                g[m] = 2.0 * own[m];
                            }
                        }
                        Some((en, ln)) => {
                            let nb = &et[(en * 3 + ln) * nt..(en * 3 + ln + 1) * nt];
                            let rev = faces[f].reversed;
                            for m in 0..=k {
                                g[m] = own[m] - reparam(rev, m) * nb[m];
                            }
                        }
                    }
                    let s = -0.25 * EDGE_ORIENTATION[l];
                    for (m, gm) in g.iter_mut().enumerate() {
                        *gm *= s * w(m);
                    }
                    let [tx, ty] = EDGE_TANGENTS[l];
                    if tx != 0.0 {
                        scaled_transpose_add(k, g, tx, l, ox);
                    }
                    if ty != 0.0 {
                        scaled_transpose_add(k, g, ty, l, oy);
                    }
                }
            },
        );
        rf.par_chunks_mut(nt).enumerate().for_each(|(f, out)| {
            let face = &faces[f];
            let (el, l) = face.left;
            let tl = &et[(el * 3 + l) * nt..(el * 3 + l + 1) * nt];
            let sl = EDGE_ORIENTATION[l];
            match face.right {
                None => {
                    for m in 0..nt {
                        out[m] = -0.5 * w(m) * 2.0 * sl * tl[m];
                    }
                }
                Some((er, lr)) => {
                    let tr = &et[(er * 3 + lr) * nt..(er * 3 + lr + 1) * nt];
                    let sr = EDGE_ORIENTATION[lr] * if face.reversed { -1.0 } else { 1.0 };
                    for m in 0..nt {
                        let jump = sl * tl[m] + sr * reparam(face.reversed, m) * tr[m];
                        out[m] = -0.5 * w(m) * jump;
                    }
                }
            }
        });
    }

    /// `-C^T (H, H^F)`: the right side of the `E` equation.
    pub fn apply_curl_e_equation(&self, h: &[f64], hf: &[f64]) -> Vec<f64> {
        let mut re = vec![0.0; self.len_e()];
        self.apply_curl_e_into(h, hf, &mut re);
        re
    }

    pub fn apply_curl_e_into(&self, h: &[f64], hf: &[f64], re: &mut [f64]) {
        assert_eq!(h.len(), self.len_h());
        assert_eq!(hf.len(), self.len_f());
        let (ne, nh, nf, k) = (self.modes_e(), self.modes_h(), self.modes_f(), self.k);
        let nt = k + 1;
        let at = self.h_traces(h);
        let norms = self.ref_h.norms();
        let faces = self.mesh.faces();
        re.par_chunks_mut(ne).enumerate().for_each_init(
            || (vec![0.0; nh], vec![0.0; ne], vec![0.0; nf]),
            |(wbuf, vbuf, g), (el, out)| {
                let hx = &h[el * 2 * nh..el * 2 * nh + nh];
                let hy = &h[el * 2 * nh + nh..(el + 1) * 2 * nh];
                for b in 0..nh {
                    wbuf[b] = norms[b] * hx[b];
                }
                self.plan_y.apply_transpose_into(wbuf, out);
                for b in 0..nh {
                    wbuf[b] = norms[b] * hy[b];
                }
                self.plan_x.apply_transpose_into(wbuf, vbuf);
                for (o, v) in out.iter_mut().zip(vbuf.iter()) {
                    *o -= v;
                }
                let fids = self.mesh.element_faces(el);
                for l in 0..3 {
                    let f = fids[l];
                    let face = &faces[f];
                    let own = &at[(el * 3 + l) * nt..(el * 3 + l + 1) * nt];
                    let hff = &hf[f * nf..(f + 1) * nf];
                    g.fill(0.0);
                    match self.neighbor(f, el) {
                        None => {
                            let sl = EDGE_ORIENTATION[l];
                            for m in 0..nt {
                                g[m] = 0.5 * own[m];
                            }
                            for m in 0..nf {
                                g[m] += sl * hff[m];
                            }
                        }
                        Some((en, ln)) => {
                            let nb = &at[(en * 3 + ln) * nt..(en * 3 + ln + 1) * nt];
                            let rev = face.reversed;
                            for m in 0..nt {
                                g[m] = 0.25 * (own[m] - reparam(rev, m) * nb[m]);
                            }
                            if face.left.0 == el {
                                let sl = EDGE_ORIENTATION[l];
                                for m in 0..nf {
                                    g[m] += 0.5 * sl * hff[m];
                                }
                            } else {
                                let sr = EDGE_ORIENTATION[l] * if rev { -1.0 } else { 1.0 };
                                for m in 0..nf {
                                    g[m] += 0.5 * sr * reparam(rev, m) * hff[m];
                                }
                            }
                        }
                    }
                    for (m, gm) in g.iter_mut().enumerate() {
                        *gm *= w(m);
                    }
                    trace_transpose_add(k + 1, g, l, out);
                }
            },
        );
    }

    /// Multiply by the mass matrix of one field, in place.
    pub fn apply_mass(&self, field: Field, v: &mut [f64]) {
        match field {
            Field::E => {
                let n = self.modes_e();
                let norms = self.ref_e.norms();
                match &self.eps_nodes {
                    None => v.par_chunks_mut(n).enumerate().for_each(|(el, c)| {
                        let s = self.epsilon.element_value(el) * self.mesh.geometry(el).det;
                        for (x, nm) in c.iter_mut().zip(norms) {
                            *x *= s * nm;
                        }
                    }),
                    Some(nodes) => {
                        let nq = self.ref_e.quadrature().len();
                        v.par_chunks_mut(n).enumerate().for_each(|(el, c)| {
                            let det = self.mesh.geometry(el).det;
                            let weighted = self.weighted_mass(c, &nodes[el * nq..(el + 1) * nq], false);
                            for (x, y) in c.iter_mut().zip(weighted) {
                                *x = det * y;
                            }
                        });
                    }
                }
            }
            Field::H => {
                let n = self.modes_h();
                let norms = self.ref_h.norms();
                v.par_chunks_mut(2 * n).enumerate().for_each(|(el, c)| {
                    let g = self.mesh.geometry(el);
                    let mt = g.metric();
                    let (cx, cy) = c.split_at_mut(n);
                    match &self.mu_nodes {
                        None => {
                            let s = self.mu.element_value(el) * g.det;
                            for b in 0..n {
                                let (x, y) = (cx[b], cy[b]);
                                cx[b] = s * norms[b] * (mt[0][0] * x + mt[0][1] * y);
                                cy[b] = s * norms[b] * (mt[1][0] * x + mt[1][1] * y);
                            }
                        }
                        Some(nodes) => {
                            let nq = self.ref_e.quadrature().len();
                            let nd = &nodes[el * nq..(el + 1) * nq];
                            let wx = self.weighted_mass_h(cx, nd);
                            let wy = self.weighted_mass_h(cy, nd);
                            for b in 0..n {
                                cx[b] = g.det * (mt[0][0] * wx[b] + mt[0][1] * wy[b]);
                                cy[b] = g.det * (mt[1][0] * wx[b] + mt[1][1] * wy[b]);
                            }
                        }
                    }
                });
            }
            Field::F => {
                let n = self.modes_f();
                v.par_chunks_mut(n).enumerate().for_each(|(f, c)| {
                    let s = self.face_mass_scale(f);
                    for (m, x) in c.iter_mut().enumerate() {
                        *x *= s / (2 * m + 1) as f64;
                    }
                });
            }
        }
    }

    /// `h_F / (alpha |t|)`; zero weight when the face fields are off.
    fn face_mass_scale(&self, f: usize) -> f64 {
        if self.alpha > 0.0 {
            self.face_h[f] / (self.alpha * self.mesh.faces()[f].length)
        } else {
            0.0
        }
    }

    /// `sum_q w_q c(x_q) u(x_q) phi_a(x_q)` on the `E` reference element, or
    /// with `1/c` when `invert` is set.
    fn weighted_mass(&self, u: &[f64], coef: &[f64], invert: bool) -> Vec<f64> {
        let re = &self.ref_e;
        let n = re.num_modes();
        let mut out = vec![0.0; n];
        for (q, wq) in re.quadrature().weights().iter().enumerate() {
            let phi = re.values_at(q);
            let val: f64 = u.iter().zip(phi).map(|(a, b)| a * b).sum();
            let c = if invert { 1.0 / coef[q] } else { coef[q] };
            let s = wq * c * val;
            for (o, p) in out.iter_mut().zip(phi) {
                *o += s * p;
            }
        }
        out
    }

    /// [`Self::weighted_mass`] for degree-`k` fields, evaluated with the
    /// leading modes of the `E` tables (the layouts are nested).
    fn weighted_mass_h(&self, u: &[f64], coef: &[f64]) -> Vec<f64> {
        let mut padded = vec![0.0; self.modes_e()];
        padded[..u.len()].copy_from_slice(u);
        let mut out = self.weighted_mass(&padded, coef, false);
        out.truncate(u.len());
        out
    }

    /// Multiply by the inverse (or, for non-constant coefficients, the
    /// quadrature-based approximate inverse) of one field's mass, in place.
    pub fn apply_inverse_mass(&self, field: Field, v: &mut [f64]) {
        match field {
            Field::E => {
                let n = self.modes_e();
                let norms = self.ref_e.norms();
                match &self.eps_nodes {
                    None => v.par_chunks_mut(n).enumerate().for_each(|(el, c)| {
                        let s = self.epsilon.element_value(el) * self.mesh.geometry(el).det;
                        for (x, nm) in c.iter_mut().zip(norms) {
                            *x /= s * nm;
                        }
                    }),
                    Some(nodes) => {
                        let nq = self.ref_e.quadrature().len();
                        v.par_chunks_mut(n).enumerate().for_each(|(el, c)| {
                            let det = self.mesh.geometry(el).det;
                            let u = self.reverse_integration(c, det, &nodes[el * nq..(el + 1) * nq]);
                            c.copy_from_slice(&u);
                        });
                    }
                }
            }
            Field::H => {
                let n = self.modes_h();
                let norms = self.ref_h.norms();
                v.par_chunks_mut(2 * n).enumerate().for_each(|(el, c)| {
                    let g = self.mesh.geometry(el);
                    // (F^{-1} F^{-T})^{-1} = F^T F
                    let f = g.f;
                    let gi = [
                        [f[0][0] * f[0][0] + f[1][0] * f[1][0], f[0][0] * f[0][1] + f[1][0] * f[1][1]],
                        [f[0][1] * f[0][0] + f[1][1] * f[1][0], f[0][1] * f[0][1] + f[1][1] * f[1][1]],
                    ];
                    let (cx, cy) = c.split_at_mut(n);
                    match &self.mu_nodes {
                        None => {
                            let s = self.mu.element_value(el) * g.det;
                            for b in 0..n {
                                let (x, y) = (cx[b], cy[b]);
                                cx[b] = (gi[0][0] * x + gi[0][1] * y) / (s * norms[b]);
                                cy[b] = (gi[1][0] * x + gi[1][1] * y) / (s * norms[b]);
                            }
                        }
                        Some(nodes) => {
                            let nq = self.ref_e.quadrature().len();
                            let nd = &nodes[el * nq..(el + 1) * nq];
                            let ux = self.reverse_integration_h(cx, g.det, nd);
                            let uy = self.reverse_integration_h(cy, g.det, nd);
                            for b in 0..n {
                                cx[b] = gi[0][0] * ux[b] + gi[0][1] * uy[b];
                                cy[b] = gi[1][0] * ux[b] + gi[1][1] * uy[b];
                            }
                        }
                    }
                });
            }
            Field::F => {
                let n = self.modes_f();
                v.par_chunks_mut(n).enumerate().for_each(|(f, c)| {
                    let s = self.face_mass_scale(f);
                    for (m, x) in c.iter_mut().enumerate() {
                        *x = if s > 0.0 { *x * (2 * m + 1) as f64 / s } else { 0.0 };
                    }
                });
            }
        }
    }

    /// Approximate `M_c^{-1} f` on one element: recover nodal values of the
    /// function whose moments are `f`, divide by the coefficient at each
    /// node, and integrate back against the basis.
    fn reverse_integration(&self, f: &[f64], det: f64, coef: &[f64]) -> Vec<f64> {
        let norms = self.ref_e.norms();
        let c: Vec<f64> = f.iter().zip(norms).map(|(a, n)| a / (det * n)).collect();
        let mut u = self.weighted_mass(&c, coef, true);
        for (x, n) in u.iter_mut().zip(norms) {
            *x /= n;
        }
        u
    }

    fn reverse_integration_h(&self, f: &[f64], det: f64, coef: &[f64]) -> Vec<f64> {
        let mut padded = vec![0.0; self.modes_e()];
        padded[..f.len()].copy_from_slice(f);
        let mut u = self.reverse_integration(&padded, det, coef);
        u.truncate(f.len());
        u
    }

    /// Approximate inverse of the `E` mass for an arbitrary positive
    /// coefficient, by reverse numerical integration.
    pub fn apply_inverse_mass_variable(
        &self,
        coef: &dyn Fn(f64, f64) -> f64,
        f: &[f64],
    ) -> Result<Vec<f64>, DgError> {
        if f.len() != self.len_e() {
            return Err(DgError::LengthMismatch { expected: self.len_e(), got: f.len() });
        }
        let n = self.modes_e();
        let mut out = vec![0.0; f.len()];
        for el in 0..self.mesh.num_elements() {
            let g = self.mesh.geometry(el);
            let nodes: Vec<f64> = self
                .ref_e
                .quadrature()
                .points()
                .map(|p| {
                    let x = g.map(p);
                    coef(x[0], x[1])
                })
                .collect();
            if let Some(&value) = nodes.iter().find(|&&v| !(v > 0.0)) {
                return Err(DgError::NonPositiveMaterial { what: "epsilon", element: el, value });
            }
            let u = self.reverse_integration(&f[el * n..(el + 1) * n], g.det, &nodes);
            out[el * n..(el + 1) * n].copy_from_slice(&u);
        }
        Ok(out)
    }

    /// `1/2 E^T M_eps E + 1/2 H^T M_mu H + 1/2 H_F^T M_F H_F`.
    pub fn energy(&self, e: &[f64], h: &[f64], hf: &[f64]) -> f64 {
        let quad = |field: Field, v: &[f64]| {
            let mut m = v.to_vec();
            self.apply_mass(field, &mut m);
            m.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut total = quad(Field::E, e) + quad(Field::H, h);
        if self.has_face_fields() {
            total += quad(Field::F, hf);
        }
        0.5 * total
    }

    /// `L2` projection of a scalar function onto the `E` space.
    pub fn project_e(&self, f: impl Fn(f64, f64) -> f64 + Sync) -> Vec<f64> {
        let n = self.modes_e();
        let mut out = vec![0.0; self.len_e()];
        out.par_chunks_mut(n).enumerate().for_each(|(el, c)| {
            let g = self.mesh.geometry(el);
            let field = self.ref_e.project_fn(|p| {
                let x = g.map(p);
                f(x[0], x[1])
            });
            c.copy_from_slice(&field.coeffs);
        });
        out
    }

    /// `L2` projection of an in-plane vector field onto the covariant `H`
    /// space; the reference field is `F^T H`.
    pub fn project_h(&self, f: impl Fn(f64, f64) -> [f64; 2] + Sync) -> Vec<f64> {
        let n = self.modes_h();
        let re = ReferenceElement::with_quadrature_order(2, self.k, 2 * self.k + 5)
            .expect("quadrature order is valid");
        let mut out = vec![0.0; self.len_h()];
        out.par_chunks_mut(2 * n).enumerate().for_each(|(el, c)| {
            let g = self.mesh.geometry(el);
            for comp in 0..2 {
                let field = re.project_fn(|p| {
                    let x = g.map(p);
                    let v = f(x[0], x[1]);
                    g.f[0][comp] * v[0] + g.f[1][comp] * v[1]
                });
                c[comp * n..(comp + 1) * n].copy_from_slice(&field.coeffs);
            }
        });
        out
    }

    /// Value of the `E` field of element `el` at a physical point.
    pub fn eval_e(&self, e: &[f64], el: usize, x: [f64; 2]) -> f64 {
        let n = self.modes_e();
        let p = self.mesh.geometry(el).inverse_map(&x);
        let phi = eval_all(2, self.k + 1, &p);
        e[el * n..(el + 1) * n].iter().zip(&phi).map(|(a, b)| a * b).sum()
    }

    fn check_dense(&self) -> Result<(), DgError> {
        let dofs = self.len_total();
        if dofs > DENSE_CAP {
            return Err(DgError::TooLarge { dofs, cap: DENSE_CAP });
        }
        Ok(())
    }
}

fn scaled_transpose_add(p: usize, g: &[f64], s: f64, edge: usize, out: &mut [f64]) {
    if s == 1.0 {
        trace_transpose_add(p, g, edge, out);
    } else {
        let scaled: Vec<f64> = g.iter().map(|x| x * s).collect();
        trace_transpose_add(p, &scaled, edge, out);
    }
}

/// Dense operators of a small system, assembled by quadrature in physical
/// coordinates (independently of the sweep and trace kernels).
#[derive(Debug, Clone)]
pub struct DenseSystem {
    /// Block-diagonal mass `diag(M_eps, M_mu, M_F)`; the face block is the
    /// identity when the face fields are off.
    pub mass: DMatrix<f64>,
    /// Inverse mass; the face block is zero when the face fields are off.
    pub mass_inv: DMatrix<f64>,
    /// `[[0, -C^T], [C, 0]]` in the state layout `(E, H, H^F)`.
    pub k: DMatrix<f64>,
    pub len_e: usize,
}

struct ElementTables {
    /// Physical points of the element quadrature.
    weights: Vec<f64>,
    /// `E` basis values per point.
    e_val: Vec<Vec<f64>>,
    /// Physical gradients of the `E` basis per point, `(d_x, d_y)` per mode.
    e_grad: Vec<Vec<[f64; 2]>>,
    /// Physical `H` basis vectors per point, one per `(component, mode)`.
    h_vec: Vec<Vec<[f64; 2]>>,
    coef_eps: Vec<f64>,
    coef_mu: Vec<f64>,
}

impl SemiDiscreteSystem {
    fn physical_h_basis(&self, el: usize, phat: &[f64]) -> Vec<[f64; 2]> {
        let g = self.mesh.geometry(el);
        let ft = g.f_inv_t();
        let phi = eval_all(2, self.k, phat);
        let mut out = Vec::with_capacity(2 * phi.len());
        for comp in 0..2 {
            for v in &phi {
                out.push([ft[0][comp] * v, ft[1][comp] * v]);
            }
        }
        out
    }

    fn element_tables(&self, el: usize, q: usize) -> ElementTables {
        let rule = crate::polys::quad_simplex(2, q).expect("valid order");
        let g = self.mesh.geometry(el);
        let ft = g.f_inv_t();
        let mut t = ElementTables {
            weights: Vec::new(),
            e_val: Vec::new(),
            e_grad: Vec::new(),
            h_vec: Vec::new(),
            coef_eps: Vec::new(),
            coef_mu: Vec::new(),
        };
        for (qi, wq) in rule.weights().iter().enumerate() {
            let p = rule.point(qi);
            let x = g.map(p);
            let (v, gr) = eval_all_with_gradient(2, self.k + 1, p);
            let grads = (0..v.len())
                .map(|a| {
                    let (gx, gy) = (gr[2 * a], gr[2 * a + 1]);
                    [ft[0][0] * gx + ft[0][1] * gy, ft[1][0] * gx + ft[1][1] * gy]
                })
                .collect();
            t.weights.push(wq * g.det);
            t.e_val.push(v);
            t.e_grad.push(grads);
            t.h_vec.push(self.physical_h_basis(el, p));
            t.coef_eps.push(self.epsilon.eval(el, x[0], x[1]));
            t.coef_mu.push(self.mu.eval(el, x[0], x[1]));
        }
        t
    }

    /// Orientation of edge `l` of element `el` relative to counter-clockwise
    /// traversal, from the physical vertex positions.
    fn physical_orientation(&self, el: usize, l: usize) -> f64 {
        let g = self.mesh.geometry(el);
        let a = g.map(&edge_point(l, -1.0));
        let b = g.map(&edge_point(l, 1.0));
        let opposite = g.map(&[[0.0, 1.0], [0.0, 0.0], [1.0, 0.0]][l]);
        let cross = (b[0] - a[0]) * (opposite[1] - a[1]) - (b[1] - a[1]) * (opposite[0] - a[0]);
        cross.signum()
    }

    /// Dense mass and skew operator, by quadrature in physical coordinates.
    pub fn assemble_dense(&self) -> Result<DenseSystem, DgError> {
        self.check_dense()?;
        let (ne, nh, nf) = (self.modes_e(), self.modes_h(), self.modes_f());
        let (le, lh) = (self.len_e(), self.len_h());
        let n = self.len_total();
        let e_dof = |el: usize, a: usize| el * ne + a;
        let h_dof = |el: usize, c: usize, b: usize| le + el * 2 * nh + c * nh + b;
        let f_dof = |f: usize, m: usize| le + lh + f * nf + m;
        let mut k = DMatrix::<f64>::zeros(n, n);
        let mut mass = DMatrix::<f64>::zeros(n, n);
        let q = 2 * (self.k + 1) + 6;

        for el in 0..self.mesh.num_elements() {
            let t = self.element_tables(el, q);
            for (qi, wq) in t.weights.iter().enumerate() {
                for a in 0..ne {
                    let ga = t.e_grad[qi][a];
                    let curl = [ga[1], -ga[0]];
                    for hb in 0..2 * nh {
                        let hv = t.h_vec[qi][hb];
                        let val = wq * (hv[0] * curl[0] + hv[1] * curl[1]);
                        let (c, b) = (hb / nh, hb % nh);
                        k[(h_dof(el, c, b), e_dof(el, a))] -= val;
                        k[(e_dof(el, a), h_dof(el, c, b))] += val;
                    }
                    for a2 in 0..ne {
                        mass[(e_dof(el, a), e_dof(el, a2))] +=
                            wq * t.coef_eps[qi] * t.e_val[qi][a] * t.e_val[qi][a2];
                    }
                }
                for hb in 0..2 * nh {
                    for hb2 in 0..2 * nh {
                        let (u, v) = (t.h_vec[qi][hb], t.h_vec[qi][hb2]);
                        mass[(h_dof(el, hb / nh, hb % nh), h_dof(el, hb2 / nh, hb2 % nh))] +=
                            wq * t.coef_mu[qi] * (u[0] * v[0] + u[1] * v[1]);
                    }
                }
            }
        }

        let gl = quad_interval(self.k + 4, 0.0, 0.0).expect("valid rule");
        for el in 0..self.mesh.num_elements() {
            let g = self.mesh.geometry(el);
            let fids = self.mesh.element_faces(el);
            for l in 0..3 {
                let sigma = self.physical_orientation(el, l);
                let a = g.map(&edge_point(l, -1.0));
                let b = g.map(&edge_point(l, 1.0));
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                let tan = [sigma * (b[0] - a[0]) / len, sigma * (b[1] - a[1]) / len];
                let nb = self.neighbor(fids[l], el);
                for (qi, wq) in gl.weights().iter().enumerate() {
                    let r = gl.point(qi)[0];
                    let ds = wq * 0.5 * len;
                    let ph = edge_point(l, r);
                    let x = g.map(&ph);
                    let e_own = eval_all(2, self.k + 1, &ph);
                    let h_own = self.physical_h_basis(el, &ph);
                    match nb {
                        None => {
                            for a in 0..ne {
                                for hb in 0..2 * nh {
                                    let ht = h_own[hb][0] * tan[0] + h_own[hb][1] * tan[1];
                                    let val = ds * e_own[a] * ht;
                                    k[(h_dof(el, hb / nh, hb % nh), e_dof(el, a))] -= val;
                                    k[(e_dof(el, a), h_dof(el, hb / nh, hb % nh))] += val;
                                }
                            }
                        }
                        Some((en, _)) => {
                            let pn = self.mesh.geometry(en).inverse_map(&x);
                            let e_nb = eval_all(2, self.k + 1, &pn);
                            let h_nb = self.physical_h_basis(en, &pn);
                            for hb in 0..2 * nh {
                                let ht = h_own[hb][0] * tan[0] + h_own[hb][1] * tan[1];
                                let hnt = h_nb[hb][0] * tan[0] + h_nb[hb][1] * tan[1];
                                for a in 0..ne {
                                    let hd = h_dof(el, hb / nh, hb % nh);
                                    k[(hd, e_dof(el, a))] -= 0.5 * ds * e_own[a] * ht;
                                    k[(hd, e_dof(en, a))] += 0.5 * ds * e_nb[a] * ht;
                                    k[(e_dof(el, a), hd)] += 0.5 * ds * e_own[a] * ht;
                                    k[(e_dof(el, a), h_dof(en, hb / nh, hb % nh))] +=
                                        0.5 * ds * e_own[a] * hnt;
                                }
                            }
                        }
                    }
                }
            }
        }

        for (f, face) in self.mesh.faces().iter().enumerate() {
            let (el, l) = face.left;
            let sigma = self.physical_orientation(el, l);
            let g = self.mesh.geometry(el);
            for (qi, wq) in gl.weights().iter().enumerate() {
                let r = gl.point(qi)[0];
                let ph = edge_point(l, r);
                let x = g.map(&ph);
                let e_l = eval_all(2, self.k + 1, &ph);
                let pm: Vec<f64> = (0..nf).map(|m| eval_legendre(m, r)).collect();
                let own_scale = if face.is_boundary() { 2.0 } else { 1.0 };
                for m in 0..nf {
                    for a in 0..ne {
                        let val = 0.5 * wq * sigma * own_scale * e_l[a] * pm[m];
                        k[(f_dof(f, m), e_dof(el, a))] -= val;
                        k[(e_dof(el, a), f_dof(f, m))] += val;
                    }
                }
                if let Some((er, _)) = face.right {
                    let pr = self.mesh.geometry(er).inverse_map(&x);
                    let e_r = eval_all(2, self.k + 1, &pr);
                    for m in 0..nf {
                        for a in 0..ne {
                            let val = 0.5 * wq * sigma * e_r[a] * pm[m];
                            k[(f_dof(f, m), e_dof(er, a))] += val;
                            k[(e_dof(er, a), f_dof(f, m))] -= val;
                        }
                    }
                }
            }
            for m in 0..nf {
                let s = self.face_mass_scale(f);
                let d = f_dof(f, m);
                mass[(d, d)] = if s > 0.0 { s / (2 * m + 1) as f64 } else { 1.0 };
            }
        }

        let mut mass_inv = DMatrix::<f64>::zeros(n, n);
        for el in 0..self.mesh.num_elements() {
            for (start, size) in [(e_dof(el, 0), ne), (h_dof(el, 0, 0), 2 * nh)] {
                let block = mass.view((start, start), (size, size)).into_owned();
                let inv = block.cholesky().ok_or(DgError::NotPositiveDefinite)?.inverse();
                mass_inv.view_mut((start, start), (size, size)).copy_from(&inv);
            }
        }
        for f in 0..self.mesh.num_faces() {
            for m in 0..nf {
                let d = f_dof(f, m);
                let s = self.face_mass_scale(f);
                mass_inv[(d, d)] = if s > 0.0 { (2 * m + 1) as f64 / s } else { 0.0 };
            }
        }
        Ok(DenseSystem { mass, mass_inv, k, len_e: le })
    }

    /// Dense penalty `(alpha/h) int_F [[E]] [[e]] ds` on the `E` space.
    pub fn assemble_penalty(&self) -> Result<DMatrix<f64>, DgError> {
        self.check_dense()?;
        let ne = self.modes_e();
        let mut s = DMatrix::<f64>::zeros(self.len_e(), self.len_e());
        if self.alpha == 0.0 {
            return Ok(s);
        }
        let gl = quad_interval(self.k + 4, 0.0, 0.0).expect("valid rule");
        for (f, face) in self.mesh.faces().iter().enumerate() {
            let (el, l) = face.left;
            let g = self.mesh.geometry(el);
            let weight = self.alpha / self.face_h[f];
            for (qi, wq) in gl.weights().iter().enumerate() {
                let ph = edge_point(l, gl.point(qi)[0]);
                let x = g.map(&ph);
                let ds = wq * 0.5 * face.length;
                // jump values per dof: (dof, value)
                let mut jump: Vec<(usize, f64)> = eval_all(2, self.k + 1, &ph)
                    .into_iter()
                    .enumerate()
                    .map(|(a, v)| (el * ne + a, if face.is_boundary() { 2.0 * v } else { v }))
                    .collect();
                if let Some((er, _)) = face.right {
                    let pr = self.mesh.geometry(er).inverse_map(&x);
                    jump.extend(eval_all(2, self.k + 1, &pr).into_iter().enumerate().map(|(a, v)| (er * ne + a, -v)));
                }
                for &(i, vi) in &jump {
                    for &(j, vj) in &jump {
                        s[(i, j)] += weight * ds * vi * vj;
                    }
                }
            }
        }
        Ok(s)
    }

    /// `A = C_E^T M_mu^{-1} C_E + S` on the `E` space.
    pub fn stiffness_frequency_domain(&self) -> Result<DMatrix<f64>, DgError> {
        let dense = self.assemble_dense()?;
        let (le, lh) = (self.len_e(), self.len_h());
        let c = dense.k.view((le, 0), (lh, le)).into_owned();
        let minv = dense.mass_inv.view((le, le), (lh, lh)).into_owned();
        let mut a = c.transpose() * minv * &c;
        a += self.assemble_penalty()?;
        Ok(symmetrize(a))
    }

    /// The full elimination `C^T M_H^{-1} C` including the face fields.
    pub fn curl_curl_with_faces(&self) -> Result<DMatrix<f64>, DgError> {
        let dense = self.assemble_dense()?;
        let le = self.len_e();
        let rest = self.len_total() - le;
        let c = dense.k.view((le, 0), (rest, le)).into_owned();
        let minv = dense.mass_inv.view((le, le), (rest, rest)).into_owned();
        Ok(symmetrize(c.transpose() * minv * &c))
    }

    /// Dense `E` mass.
    pub fn dense_mass_e(&self) -> Result<DMatrix<f64>, DgError> {
        let dense = self.assemble_dense()?;
        let le = self.len_e();
        Ok(dense.mass.view((0, 0), (le, le)).into_owned())
    }
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    let t = a.transpose();
    (a + t) * 0.5
}
