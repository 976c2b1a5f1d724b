use dgtd::basis::{eval_field, index_set, mode_index_2d, num_modes, ModalField, ReferenceElement};
use dgtd::dg::{DgConfig, SemiDiscreteSystem};
use dgtd::kernels::{deriv_project, deriv_sweep_2d, trace_coeffs, trace_transpose_add, Direction};
use dgtd::mesh::{parse_mesh, Mesh2D};
use dgtd::relations::rationalize;
use num_rational::Rational64;
use proptest::prelude::*;

fn coeffs(max_p: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (0..=max_p).prop_flat_map(|p| (Just(p), prop::collection::vec(-1.0f64..1.0, num_modes(2, p))))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn jittered_square(n: usize, jitter: &[(f64, f64)]) -> Mesh2D {
    let base = Mesh2D::structured_square(n);
    let h = 1.0 / n as f64;
    let vertices = base
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let interior = v[0] > 0.0 && v[0] < 1.0 && v[1] > 0.0 && v[1] < 1.0;
            let (dx, dy) = jitter[i % jitter.len()];
            if interior {
                [v[0] + 0.25 * h * dx, v[1] + 0.25 * h * dy]
            } else {
                *v
            }
        })
        .collect();
    Mesh2D::new(vertices, base.triangles().to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sweep_matches_projection((p, v) in coeffs(9), dir in prop_oneof![Just(Direction::X), Just(Direction::Y)]) {
        let re = ReferenceElement::new(2, p).unwrap();
        let fast = deriv_sweep_2d(&ModalField::scalar(2, p, v.clone()), dir).unwrap();
        let slow = deriv_project(&re, &v, dir);
        let scale = slow.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for (a, b) in fast.coeffs.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-11 * scale);
        }
    }

    #[test]
    fn trace_transpose_is_adjoint((p, v) in coeffs(10), edge in 0usize..3, seed in any::<u64>()) {
        let g: Vec<f64> = (0..=p).map(|m| ((seed.wrapping_mul(m as u64 + 7) % 1000) as f64) / 500.0 - 1.0).collect();
        let mut tr = vec![0.0; p + 1];
        trace_coeffs(p, &v, edge, &mut tr);
        let mut back = vec![0.0; v.len()];
        trace_transpose_add(p, &g, edge, &mut back);
        let lhs = dot(&tr, &g);
        let rhs = dot(&v, &back);
        prop_assert!((lhs - rhs).abs() <= 1e-11 * (1.0 + lhs.abs()));
    }

    #[test]
    fn lower_order_layout_is_a_prefix(p in 0usize..12) {
        let low = index_set(2, p);
        let high = index_set(2, p + 1);
        prop_assert_eq!(&high[..low.len()], &low[..]);
        for (pos, m) in high.iter().enumerate() {
            prop_assert_eq!(mode_index_2d(m[0], m[1]), pos);
        }
    }

    #[test]
    fn projection_reproduces_polynomials((p, v) in coeffs(6), x in 0.0f64..1.0, t in 0.0f64..1.0) {
        let re = ReferenceElement::new(2, p).unwrap();
        let field = ModalField::scalar(2, p, v.clone());
        let back = re.project_fn(|pt| eval_field(&field, pt)[0]);
        for (a, b) in back.coeffs.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-11);
        }
        let pt = [x * (1.0 - t), t];
        prop_assert!(eval_field(&field, &pt)[0].is_finite());
    }

    #[test]
    fn dg_skew_pairing(k in 0usize..4, jitter in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 9), seed in any::<u64>()) {
        let sys = SemiDiscreteSystem::new(jittered_square(2, &jitter), DgConfig::new(k)).unwrap();
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let e: Vec<f64> = (0..sys.len_e()).map(|_| next()).collect();
        let h: Vec<f64> = (0..sys.len_h()).map(|_| next()).collect();
        let hf: Vec<f64> = (0..sys.len_f()).map(|_| next()).collect();
        let re = sys.apply_curl_e_equation(&h, &hf);
        let (rh, rf) = sys.apply_curl_h_equation(&e);
        let a = dot(&e, &re);
        let b = dot(&h, &rh) + dot(&hf, &rf);
        let scale = dot(&e, &e).sqrt() * (dot(&h, &h) + dot(&hf, &hf)).sqrt();
        prop_assert!((a + b).abs() <= 1e-12 * scale);
    }

    #[test]
    fn element_maps_invert(jitter in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 9), r in 0.0f64..1.0, s in 0.0f64..1.0) {
        let mesh = jittered_square(3, &jitter);
        let p = [r * (1.0 - s), s];
        for e in 0..mesh.num_elements() {
            let g = mesh.geometry(e);
            let back = g.inverse_map(&g.map(&p));
            prop_assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
        }
        let again = parse_mesh(&mesh.to_text()).unwrap();
        prop_assert_eq!(again.num_faces(), mesh.num_faces());
    }

    #[test]
    fn rationalize_recovers_small_fractions(n in -500i64..500, d in 1i64..500) {
        let want = Rational64::new(n, d);
        let got = rationalize(n as f64 / d as f64, 1e-12).unwrap();
        prop_assert_eq!(got, want);
    }
}
