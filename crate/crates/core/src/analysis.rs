//! Energy tracking, resonance spectra, spurious-mode scans, p-convergence
//! and kernel timing studies, with their CSV artifacts.

use crate::basis::{num_modes, ReferenceElement};
use crate::dg::{DgConfig, DgError, Material, Profile, SemiDiscreteSystem};
use crate::kernels::{dense_matvec, derivative_matrix, Direction, KernelError, SweepPlan};
use crate::mesh::Mesh2D;
use crate::timestep::{step_leapfrog, step_symplectic_euler, State};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::io::{self, Write};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Dg(#[from] DgError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("mass matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("resonance spectrum needs a positive stabilization constant")]
    NeedsStabilization,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Eigenvalues below this fraction of the largest count as zero.
pub const ZERO_THRESHOLD: f64 = 1e-8;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Discrete energy of a state.
pub fn total_energy(system: &SemiDiscreteSystem, state: &State) -> f64 {
    state.energy(system)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns ascending eigenvalues and the matching eigenvectors as columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>), AnalysisError> {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * total || total == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(AnalysisError::NoConvergence(JACOBI_MAX_SWEEPS));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// `A x = lambda M x` for symmetric `A` and SPD `M`, by Cholesky reduction.
pub fn generalized_eigen(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>), AnalysisError> {
    let chol = m.clone().cholesky().ok_or(AnalysisError::NotPositiveDefinite)?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or(AnalysisError::NotPositiveDefinite)?;
    let mut c = &linv * a * linv.transpose();
    let ct = c.transpose();
    c = (c + ct) * 0.5;
    let (values, y) = jacobi_eigen(&c)?;
    Ok((values, linv.transpose() * y))
}

/// Full generalized spectrum of the frequency-domain operator.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// All eigenvalues `omega^2`, ascending.
    pub eigenvalues: Vec<f64>,
    /// Absolute zero threshold used for filtering.
    pub threshold: f64,
    /// Largest eigen-residual `|A x - l M x| / (|A| |x|)`.
    pub max_residual: f64,
}

impl Spectrum {
    pub fn kernel_dim(&self) -> usize {
        self.eigenvalues.iter().filter(|&&l| l.abs() <= self.threshold).count()
    }

    /// Frequencies `sqrt(lambda)` of the eigenvalues above the threshold.
    pub fn omegas(&self) -> Vec<f64> {
        self.eigenvalues.iter().filter(|&&l| l > self.threshold).map(|l| l.sqrt()).collect()
    }
}

pub fn frequency_spectrum(system: &SemiDiscreteSystem) -> Result<Spectrum, AnalysisError> {
    let a = system.stiffness_frequency_domain()?;
    let m = system.dense_mass_e()?;
    let (values, vectors) = generalized_eigen(&a, &m)?;
    let norm_a = a.iter().fold(0.0f64, |x, y| x.max(y.abs())) * a.nrows() as f64;
    let mut max_residual = 0.0f64;
    for (i, &l) in values.iter().enumerate() {
        let x = vectors.column(i);
        let r = &a * x - (&m * x) * l;
        max_residual = max_residual.max(r.norm() / (norm_a.max(f64::MIN_POSITIVE) * x.norm()));
    }
    let largest = values.iter().fold(0.0f64, |x, y| x.max(y.abs()));
    Ok(Spectrum { eigenvalues: values, threshold: ZERO_THRESHOLD * largest, max_residual })
}

/// Lowest `count` nonzero resonance frequencies.
pub fn resonance_spectrum(system: &SemiDiscreteSystem, count: usize) -> Result<Vec<f64>, AnalysisError> {
    if !system.has_face_fields() {
        return Err(AnalysisError::NeedsStabilization);
    }
    let mut omegas = frequency_spectrum(system)?.omegas();
    omegas.truncate(count);
    Ok(omegas)
}

/// Lowest `count` TM resonances `pi sqrt(m^2 + n^2)` of the unit square,
/// with multiplicity.
pub fn exact_cavity_frequencies(count: usize) -> Vec<f64> {
    let limit = count + 2;
    let mut all: Vec<f64> = (1..=limit)
        .flat_map(|m| (1..=limit).map(move |n| PI * ((m * m + n * n) as f64).sqrt()))
        .collect();
    all.sort_by(f64::total_cmp);
    all.truncate(count);
    all
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpuriousRow {
    pub alpha: f64,
    /// Eigenvalues at or below the zero threshold.
    pub near_kernel_count: usize,
    /// Eigenvalues between the threshold and `band`.
    pub low_band_count: usize,
    pub threshold: f64,
    pub min_eigenvalue: f64,
}

/// Near-kernel dimension of the frequency-domain operator for each `alpha`.
/// `band` bounds the window searched for spurious low modes.
pub fn spurious_mode_scan(
    factory: impl Fn(f64) -> Result<SemiDiscreteSystem, DgError>,
    alphas: &[f64],
    band: f64,
) -> Result<Vec<SpuriousRow>, AnalysisError> {
    alphas
        .iter()
        .map(|&alpha| {
            let spectrum = frequency_spectrum(&factory(alpha)?)?;
            let t = spectrum.threshold;
            Ok(SpuriousRow {
                alpha,
                near_kernel_count: spectrum.kernel_dim(),
                low_band_count: spectrum.eigenvalues.iter().filter(|&&l| l > t && l < band).count(),
                threshold: t,
                min_eigenvalue: spectrum.eigenvalues.first().copied().unwrap_or(0.0),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRecord {
    /// Degree of `E`.
    pub p: usize,
    pub dof: usize,
    pub computed: Vec<f64>,
    pub exact: Vec<f64>,
    pub errors: Vec<f64>,
    pub seconds: f64,
}

/// Lowest `modes` cavity resonances for each `E` degree in `degrees`.
pub fn p_convergence_study(
    mesh: &Mesh2D,
    degrees: &[usize],
    modes: usize,
) -> Result<Vec<ConvergenceRecord>, AnalysisError> {
    let exact = exact_cavity_frequencies(modes);
    degrees
        .iter()
        .map(|&p| {
            let start = Instant::now();
            let k = p.saturating_sub(1);
            let system = SemiDiscreteSystem::new(mesh.clone(), DgConfig::new(k))?;
            let computed = resonance_spectrum(&system, modes)?;
            let errors = computed
                .iter()
                .zip(&exact)
                .map(|(c, e)| ((c - e) / e).abs())
                .collect();
            Ok(ConvergenceRecord {
                p: k + 1,
                dof: system.len_e(),
                computed,
                exact: exact.clone(),
                errors,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub p: usize,
    pub n: usize,
    pub t_sweep_ns: f64,
    pub t_dense_ns: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median time per application of the x-derivative sweep and of the stored
/// dense derivative matrix. Runs on the calling thread only.
pub fn scaling_benchmark(degrees: &[usize], repetitions: usize, seed: u64) -> Result<Vec<ScalingRow>, AnalysisError> {
    let reps = repetitions.max(11);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &p in degrees {
        let plan = SweepPlan::new(p, Direction::X)?;
        let re = ReferenceElement::new(2, p).map_err(DgError::from)?;
        let dense = derivative_matrix(&re, Direction::X);
        let n = num_modes(2, p);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; plan.output_len()];
        let mut scratch = vec![0.0; n];
        // batch enough applications that each sample is well above timer noise
        let inner = (200_000 / n).max(4);
        let inner_dense = (2_000_000 / (n * n)).max(4);
        let mut sink = 0.0;
        let time = |f: &mut dyn FnMut(), count: usize| {
            f();
            let samples = (0..reps)
                .map(|_| {
                    let t = Instant::now();
                    for _ in 0..count {
                        f();
                    }
                    t.elapsed().as_nanos() as f64 / count as f64
                })
                .collect();
            median(samples)
        };
        let t_sweep = time(
            &mut || {
                plan.apply_into(std::hint::black_box(&v), &mut out, &mut scratch);
                sink += out[0];
            },
            inner,
        );
        let mut out2 = vec![0.0; plan.output_len()];
        let t_dense = time(
            &mut || {
                dense_matvec(&dense, n, std::hint::black_box(&v), &mut out2);
                sink += out2[0];
            },
            inner_dense,
        );
        std::hint::black_box(sink);
        rows.push(ScalingRow { p, n, t_sweep_ns: t_sweep, t_dense_ns: t_dense });
    }
    Ok(rows)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).0
}

/// `(slope, intercept)` of the least-squares line through the points.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    SymplecticEuler,
    Leapfrog,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySample {
    pub step: usize,
    pub t: f64,
    pub energy: f64,
}

/// Outcome of a time loop.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub history: Vec<EnergySample>,
    pub final_state: State,
    /// Step at which the energy exceeded the blow-up factor, if any.
    pub blew_up_at: Option<usize>,
}

/// Energy growth factor treated as an instability.
pub const BLOW_UP_FACTOR: f64 = 1e6;

/// Integrate `steps` steps, recording the energy after every step. Stops
/// early once the energy exceeds [`BLOW_UP_FACTOR`] times its initial value.
pub fn run_time_loop(system: &SemiDiscreteSystem, initial: State, scheme: Scheme, dt: f64, steps: usize) -> RunResult {
    let e0 = initial.energy(system);
    let mut history = vec![EnergySample { step: 0, t: initial.t, energy: e0 }];
    let mut state = initial;
    let mut blew_up_at = None;
    for step in 1..=steps {
        state = match scheme {
            Scheme::SymplecticEuler => step_symplectic_euler(system, &state, dt),
            Scheme::Leapfrog => step_leapfrog(system, &state, dt),
        };
        let energy = state.energy(system);
        history.push(EnergySample { step, t: state.t, energy });
        if !(energy <= BLOW_UP_FACTOR * e0) && e0 > 0.0 || !energy.is_finite() {
            blew_up_at = Some(step);
            break;
        }
    }
    RunResult { history, final_state: state, blew_up_at }
}

/// Largest `|E_n / E_0 - 1|` and the fitted drift slope per step.
pub fn energy_deviation(history: &[EnergySample]) -> (f64, f64) {
    let e0 = history[0].energy;
    if e0 == 0.0 {
        return (0.0, 0.0);
    }
    let rel: Vec<f64> = history.iter().map(|s| s.energy / e0 - 1.0).collect();
    let steps: Vec<f64> = history.iter().map(|s| s.step as f64).collect();
    let max = rel.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    (max, linear_fit(&steps, &rel).0)
}

/// Standing TM mode `(m, n)` of the unit square at its field maximum.
pub fn cavity_mode_state(system: &SemiDiscreteSystem, m: usize, n: usize) -> State {
    let mut s = State::zeros(system);
    s.e = system.project_e(|x, y| (m as f64 * PI * x).sin() * (n as f64 * PI * y).sin());
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariableMassRow {
    pub p: usize,
    pub relative_error: f64,
    pub symmetry_error: f64,
    pub min_eigenvalue: f64,
}

/// Compares the reverse-integration inverse mass for `eps = 1 + x/2` with a
/// dense solve of the exact variable-coefficient mass, per `E` degree.
pub fn variable_mass_study(mesh: &Mesh2D, degrees: &[usize]) -> Result<Vec<VariableMassRow>, AnalysisError> {
    let profile = Profile::LinearX;
    degrees
        .iter()
        .map(|&p| {
            let mut cfg = DgConfig::new(p.saturating_sub(1));
            cfg.epsilon = Material::Profile(profile);
            let system = SemiDiscreteSystem::new(mesh.clone(), cfg)?;
            let mass = system.dense_mass_e()?;
            let target = system.project_e(|x, y| (x + 0.5 * y).exp() * (2.0 * y).cos());
            let f = &mass * nalgebra::DVector::from_vec(target.clone());
            let approx = system.apply_inverse_mass_variable(&|x, y| profile.eval(x, y), f.as_slice())?;
            let num: f64 = approx.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = target.iter().map(|b| b * b).sum::<f64>().sqrt();

            // the approximate inverse is block diagonal; probe one element
            let ne = system.modes_e();
            let mut block = DMatrix::<f64>::zeros(ne, ne);
            let mut unit = vec![0.0; system.len_e()];
            for c in 0..ne {
                unit.fill(0.0);
                unit[c] = 1.0;
                let col = system.apply_inverse_mass_variable(&|x, y| profile.eval(x, y), &unit)?;
                for r in 0..ne {
                    block[(r, c)] = col[r];
                }
            }
            let scale = block.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let symmetry_error = (&block - block.transpose()).iter().fold(0.0f64, |m, x| m.max(x.abs())) / scale;
            let sym = (&block + block.transpose()) * 0.5;
            let (vals, _) = jacobi_eigen(&sym)?;
            Ok(VariableMassRow { p, relative_error: num / den, symmetry_error, min_eigenvalue: vals[0] })
        })
        .collect()
}

pub fn write_energy_csv(out: &mut impl Write, seed: u64, history: &[EnergySample]) -> io::Result<()> {
    writeln!(out, "# seed={seed}")?;
    writeln!(out, "step,t,energy")?;
    for s in history {
        writeln!(out, "{},{:.17e},{:.17e}", s.step, s.t, s.energy)?;
    }
    Ok(())
}

pub fn write_convergence_csv(out: &mut impl Write, seed: u64, records: &[ConvergenceRecord]) -> io::Result<()> {
    writeln!(out, "# seed={seed} zero_threshold={ZERO_THRESHOLD:e}")?;
    writeln!(out, "p,dof,mode_index,omega_computed,omega_exact,rel_error")?;
    for r in records {
        for (i, ((c, e), err)) in r.computed.iter().zip(&r.exact).zip(&r.errors).enumerate() {
            writeln!(out, "{},{},{},{:.17e},{:.17e},{:.6e}", r.p, r.dof, i, c, e, err)?;
        }
    }
    Ok(())
}

pub fn write_scaling_csv(out: &mut impl Write, seed: u64, rows: &[ScalingRow]) -> io::Result<()> {
    let n: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ts: Vec<f64> = rows.iter().map(|r| r.t_sweep_ns).collect();
    let td: Vec<f64> = rows.iter().map(|r| r.t_dense_ns).collect();
    writeln!(out, "# seed={seed}")?;
    if rows.len() >= 2 {
        writeln!(
            out,
            "# slope_sweep={:.4} slope_dense={:.4}",
            loglog_slope(&n, &ts),
            loglog_slope(&n, &td)
        )?;
    }
    writeln!(out, "p,N,t_sweep_ns,t_dense_ns")?;
    for r in rows {
        writeln!(out, "{},{},{:.1},{:.1}", r.p, r.n, r.t_sweep_ns, r.t_dense_ns)?;
    }
    Ok(())
}

pub fn write_spurious_csv(out: &mut impl Write, seed: u64, rows: &[SpuriousRow]) -> io::Result<()> {
    writeln!(out, "# seed={seed} zero_threshold={ZERO_THRESHOLD:e}")?;
    writeln!(out, "alpha,near_kernel_count")?;
    for r in rows {
        writeln!(out, "{},{}", r.alpha, r.near_kernel_count)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_matches_reference_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = DMatrix::<f64>::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
        let a = &b + b.transpose();
        let (vals, vecs) = jacobi_eigen(&a).unwrap();
        let mut want: Vec<f64> = a.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        want.sort_by(f64::total_cmp);
        for (x, y) in vals.iter().zip(&want) {
            assert!((x - y).abs() < 1e-11);
        }
        let r = &a * &vecs - &vecs * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vals));
        assert!(r.amax() < 1e-11);
    }

    #[test]
    fn exact_frequencies_have_degeneracy() {
        let w = exact_cavity_frequencies(4);
        assert!((w[0] - PI * 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(w[1], w[2]);
        assert!((w[1] - PI * 5f64.sqrt()).abs() < 1e-14);
        assert!((w[3] - PI * 8f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn lowest_resonance_is_close_on_coarse_mesh() {
        let sys = SemiDiscreteSystem::new(Mesh2D::structured_square(2), DgConfig::new(3)).unwrap();
        let w = resonance_spectrum(&sys, 4).unwrap();
        let exact = exact_cavity_frequencies(4);
        for (a, b) in w.iter().zip(&exact) {
            assert!(((a - b) / b).abs() < 2e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn energy_is_quadratic() {
        let sys = SemiDiscreteSystem::new(Mesh2D::structured_square(1), DgConfig::new(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..sys.len_total()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = State::from_vec(&sys, 0.0, &v);
        let e = total_energy(&sys, &s);
        let scaled = State::from_vec(&sys, 0.0, &v.iter().map(|x| 3.0 * x).collect::<Vec<_>>());
        assert!((total_energy(&sys, &scaled) - 9.0 * e).abs() < 1e-12 * e);
        let d = sys.assemble_dense().unwrap();
        let x = nalgebra::DVector::from_vec(v);
        let want = 0.5 * (x.transpose() * &d.mass * &x)[(0, 0)];
        assert!((e - want).abs() < 1e-12 * want);
        assert_eq!(total_energy(&sys, &State::zeros(&sys)), 0.0);
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_energy_csv(&mut buf, 3, &[EnergySample { step: 0, t: 0.0, energy: 1.0 }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# seed=3\nstep,t,energy\n0,"));
    }

    #[test]
    fn fits() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        assert!((loglog_slope(&x, &y) - 2.0).abs() < 1e-12);
    }
}
