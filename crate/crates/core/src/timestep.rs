//! Explicit symplectic time integration and the step-size bound.
//!
//! Both schemes store `E`, `H` and `H^F` at the same time level. The
//! leapfrog step is kick-drift-kick: half a step on the magnetic unknowns,
//! a full step on `E`, another half step on the magnetic unknowns. Over `n`
//! steps this equals symplectic Euler conjugated by a half kick.

use crate::dg::{Field, SemiDiscreteSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub t: f64,
    pub e: Vec<f64>,
    pub h: Vec<f64>,
    pub hf: Vec<f64>,
}

impl State {
    pub fn zeros(system: &SemiDiscreteSystem) -> Self {
        State {
            t: 0.0,
            e: vec![0.0; system.len_e()],
            h: vec![0.0; system.len_h()],
            hf: vec![0.0; system.len_f()],
        }
    }

    /// Concatenation `(E, H, H^F)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.e.len() + self.h.len() + self.hf.len());
        v.extend_from_slice(&self.e);
        v.extend_from_slice(&self.h);
        v.extend_from_slice(&self.hf);
        v
    }

    pub fn from_vec(system: &SemiDiscreteSystem, t: f64, v: &[f64]) -> Self {
        let (le, lh) = (system.len_e(), system.len_h());
        State { t, e: v[..le].to_vec(), h: v[le..le + lh].to_vec(), hf: v[le + lh..].to_vec() }
    }

    pub fn energy(&self, system: &SemiDiscreteSystem) -> f64 {
        system.energy(&self.e, &self.h, &self.hf)
    }

    pub fn norm(&self) -> f64 {
        self.e.iter().chain(&self.h).chain(&self.hf).map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `H += dt M_mu^{-1} C_H E`, `H^F += dt M_F^{-1} C_F E`.
pub fn kick(system: &SemiDiscreteSystem, state: &mut State, dt: f64) {
    let (mut rh, mut rf) = system.apply_curl_h_equation(&state.e);
    system.apply_inverse_mass(Field::H, &mut rh);
    system.apply_inverse_mass(Field::F, &mut rf);
    for (x, r) in state.h.iter_mut().zip(&rh) {
        *x += dt * r;
    }
    for (x, r) in state.hf.iter_mut().zip(&rf) {
        *x += dt * r;
    }
}

/// `E -= dt M_eps^{-1} C^T (H, H^F)`.
pub fn drift(system: &SemiDiscreteSystem, state: &mut State, dt: f64) {
    let mut re = system.apply_curl_e_equation(&state.h, &state.hf);
    system.apply_inverse_mass(Field::E, &mut re);
    for (x, r) in state.e.iter_mut().zip(&re) {
        *x += dt * r;
    }
}

/// One symplectic Euler step: magnetic unknowns first, then `E` with the
/// updated magnetic field.
pub fn step_symplectic_euler(system: &SemiDiscreteSystem, state: &State, dt: f64) -> State {
    let mut s = state.clone();
    kick(system, &mut s, dt);
    drift(system, &mut s, dt);
    s.t += dt;
    s
}

/// One kick-drift-kick leapfrog step.
pub fn step_leapfrog(system: &SemiDiscreteSystem, state: &State, dt: f64) -> State {
    let mut s = state.clone();
    kick(system, &mut s, 0.5 * dt);
    drift(system, &mut s, dt);
    kick(system, &mut s, 0.5 * dt);
    s.t += dt;
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtEstimate {
    /// Spectral radius of `M_H^{-1/2} C M_eps^{-1} C^T M_H^{-1/2}`.
    pub rho: f64,
    /// `2 / sqrt(rho)`, or infinity when `rho` vanishes.
    pub dt_max: f64,
    pub iterations: usize,
}

const POWER_TOL: f64 = 1e-10;

/// Krylov vectors kept between restarts.
const KRYLOV_DIM: usize = 40;

/// Largest eigenvalue of the magnetic-side curl-curl operator
/// `M_H^{-1} C M_eps^{-1} C^T`, which is self-adjoint in the `M_H` inner
/// product. The power sequence from a seeded random start spans a Krylov
/// space; a restarted Lanczos process with full reorthogonalization takes
/// the largest Ritz value from it. `iterations` caps the operator
/// applications.
pub fn estimate_spectral_radius(system: &SemiDiscreteSystem, iterations: usize, seed: u64) -> DtEstimate {
    let (lh, lf) = (system.len_h(), system.len_f());
    let n = lh + lf;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    if !system.has_face_fields() {
        x[lh..].fill(0.0);
    }
    let mass = |v: &[f64]| {
        let mut m = v.to_vec();
        system.apply_mass(Field::H, &mut m[..lh]);
        system.apply_mass(Field::F, &mut m[lh..]);
        m
    };
    let apply = |v: &[f64]| {
        let mut re = system.apply_curl_e_equation(&v[..lh], &v[lh..]);
        system.apply_inverse_mass(Field::E, &mut re);
        let (mut rh, mut rf) = system.apply_curl_h_equation(&re);
        system.apply_inverse_mass(Field::H, &mut rh);
        system.apply_inverse_mass(Field::F, &mut rf);
        rh.extend_from_slice(&rf);
        // the E-equation operator is -C^T, so the composition is negated
        rh.iter_mut().for_each(|r| *r = -*r);
        rh
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let budget = iterations.max(1);
    let mut used = 0;
    let mut rho = 0.0;
    let mut previous = f64::NAN;
    while used < budget {
        let mx = mass(&x);
        let norm = dot(&x, &mx).sqrt();
        if norm == 0.0 {
            break;
        }
        let mut basis: Vec<Vec<f64>> = vec![x.iter().map(|v| v / norm).collect()];
        let mut mbasis: Vec<Vec<f64>> = vec![mx.iter().map(|v| v / norm).collect()];
        let mut diag = Vec::new();
        let mut off = Vec::new();
        let mut exhausted = false;
        loop {
            let j = basis.len() - 1;
            let mut w = apply(&basis[j]);
            used += 1;
            diag.push(dot(&w, &mbasis[j]));
            for _ in 0..2 {
                for (v, mv) in basis.iter().zip(&mbasis) {
                    let c = dot(&w, mv);
                    w.iter_mut().zip(v).for_each(|(a, b)| *a -= c * b);
                }
            }
            if basis.len() == KRYLOV_DIM.min(n) || used >= budget {
                break;
            }
            let mw = mass(&w);
            let beta = dot(&w, &mw).max(0.0).sqrt();
            if beta <= 1e-14 * diag.iter().fold(0.0f64, |m, d| m.max(d.abs())) {
                exhausted = true;
                break;
            }
            off.push(beta);
            basis.push(w.iter().map(|v| v / beta).collect());
            mbasis.push(mw.iter().map(|v| v / beta).collect());
        }
        let m = diag.len();
        let t = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                diag[i]
            } else if i + 1 == j {
                off[i]
            } else if j + 1 == i {
                off[j]
            } else {
                0.0
            }
        });
        let eig = t.symmetric_eigen();
        let (top, theta) = eig
            .eigenvalues
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (i, v)| if v > a.1 { (i, v) } else { a });
        rho = theta.max(0.0);
        let s = eig.eigenvectors.column(top);
        x = vec![0.0; n];
        for (v, c) in basis.iter().zip(s.iter()) {
            x.iter_mut().zip(v).for_each(|(a, b)| *a += c * b);
        }
        if exhausted || (rho - previous).abs() <= POWER_TOL * rho || rho == 0.0 {
            break;
        }
        previous = rho;
    }
    let dt_max = if rho > 0.0 { 2.0 / rho.sqrt() } else { f64::INFINITY };
    DtEstimate { rho, dt_max, iterations: used }
}

/// Largest stable step of the symplectic schemes.
pub fn estimate_dt_max(system: &SemiDiscreteSystem, iterations: usize, seed: u64) -> f64 {
    estimate_spectral_radius(system, iterations, seed).dt_max
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dg::{DgConfig, Material};
    use crate::mesh::Mesh2D;
    use nalgebra::DVector;

    fn one_element(k: usize) -> SemiDiscreteSystem {
        let mesh = Mesh2D::new(vec![[0.0, 0.0], [1.0, 0.2], [0.3, 0.9]], vec![[0, 1, 2]]).unwrap();
        SemiDiscreteSystem::new(mesh, DgConfig::new(k)).unwrap()
    }

    fn random_state(sys: &SemiDiscreteSystem, seed: u64) -> State {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..sys.len_total()).map(|_| rng.random_range(-1.0..1.0)).collect();
        State::from_vec(sys, 0.0, &v)
    }

    /// Dense kick and drift maps in the state layout.
    fn dense_maps(sys: &SemiDiscreteSystem, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = sys.assemble_dense().unwrap();
        let n = sys.len_total();
        let le = sys.len_e();
        let rhs = &d.mass_inv * &d.k;
        let mut kick = DMatrix::identity(n, n);
        let mut drift = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                if i >= le && j < le {
                    kick[(i, j)] += dt * rhs[(i, j)];
                }
                if i < le && j >= le {
                    drift[(i, j)] += dt * rhs[(i, j)];
                }
            }
        }
        (kick, drift)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = b.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn zero_state_and_zero_step() {
        let sys = one_element(2);
        let z = State::zeros(&sys);
        assert_eq!(step_symplectic_euler(&sys, &z, 0.1).to_vec(), z.to_vec());
        assert_eq!(step_leapfrog(&sys, &z, 0.1).to_vec(), z.to_vec());
        let s = random_state(&sys, 1);
        assert_eq!(step_symplectic_euler(&sys, &s, 0.0).to_vec(), s.to_vec());
    }

    #[test]
    fn symplectic_euler_matches_dense_emulation() {
        let sys = one_element(2);
        let dt = 0.01;
        let (kick, drift) = dense_maps(&sys, dt);
        let s = random_state(&sys, 2);
        let want = &drift * &kick * DVector::from_vec(s.to_vec());
        let got = step_symplectic_euler(&sys, &s, dt).to_vec();
        assert!(close(&got, want.as_slice(), 1e-12));
        let det = (&drift * &kick).determinant();
        assert!((det.abs() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn leapfrog_is_conjugated_symplectic_euler() {
        let sys = one_element(1);
        let dt = 0.02;
        let (half, _) = dense_maps(&sys, 0.5 * dt);
        let (neg_half, _) = dense_maps(&sys, -0.5 * dt);
        let (kick, drift) = dense_maps(&sys, dt);
        let se = &drift * &kick;
        let s = random_state(&sys, 3);
        let mut lf = s.clone();
        for _ in 0..5 {
            lf = step_leapfrog(&sys, &lf, dt);
        }
        let mut map = neg_half.clone();
        for _ in 0..5 {
            map = &se * map;
        }
        map = &half * map;
        let want = map * DVector::from_vec(s.to_vec());
        assert!(close(&lf.to_vec(), want.as_slice(), 1e-12));
    }

    #[test]
    fn leapfrog_is_reversible() {
        let sys = SemiDiscreteSystem::new(Mesh2D::structured_square(2), DgConfig::new(2)).unwrap();
        let dt = 0.5 * estimate_dt_max(&sys, 300, 1);
        let s0 = random_state(&sys, 4);
        let mut s = s0.clone();
        for _ in 0..50 {
            s = step_leapfrog(&sys, &s, dt);
        }
        for _ in 0..50 {
            s = step_leapfrog(&sys, &s, -dt);
        }
        let diff: f64 = s.to_vec().iter().zip(s0.to_vec()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-9 * s0.norm());
    }

    #[test]
    fn power_iteration_matches_dense_and_scales() {
        let sys = SemiDiscreteSystem::new(Mesh2D::structured_square(1), DgConfig::new(1)).unwrap();
        let d = sys.assemble_dense().unwrap();
        let ev = (&d.mass_inv * &d.k * &d.mass_inv * &d.k).map(|x| -x);
        let dense_rho = ev.complex_eigenvalues().iter().map(|c| c.re).fold(0.0, f64::max);
        let est = estimate_spectral_radius(&sys, 500, 7);
        assert!((est.rho - dense_rho).abs() <= 1e-6 * dense_rho, "{} vs {}", est.rho, dense_rho);

        // doubling the curl (halving both materials) scales rho by 4
        let mut cfg = DgConfig::new(1);
        cfg.epsilon = Material::Constant(0.5);
        cfg.mu = Material::Constant(0.5);
        cfg.alpha = 4.0 * 2.0;
        let scaled = SemiDiscreteSystem::new(Mesh2D::structured_square(1), cfg).unwrap();
        let est2 = estimate_spectral_radius(&scaled, 500, 7);
        assert!((est2.rho / est.rho - 4.0).abs() < 1e-6);
        assert!((est2.dt_max / est.dt_max - 0.5).abs() < 1e-6);
        assert_eq!(estimate_dt_max(&sys, 50, 3), estimate_dt_max(&sys, 50, 3));
    }
}
