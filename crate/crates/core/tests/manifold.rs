mod common;

use lotkit::manifold::{CubicSpline, Side, SkewExp};
use lotkit::synthetic::{random_orthogonal, random_skew, rng};
use lotkit::{matrix_exp_skew, matrix_log_so, Error, OrthogonalPath, SpectrumPath};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exp_matches_taylor_and_log_inverts(seed in any::<u64>(), d in 2usize..9, norm in 0.0f64..3.0) {
        let mut r = rng(seed);
        let a = random_skew(d, norm, &mut r);
        let e = matrix_exp_skew(&a).unwrap();
        prop_assert!((&e - common::taylor_expm(&a)).amax() < 1e-12);
        prop_assert!(common::orthogonality_defect(&e) < 1e-12);
        prop_assert!((e.determinant() - 1.0).abs() < 1e-12);
        let back = matrix_log_so(&e).unwrap();
        prop_assert!((&back - &a).amax() < 1e-9 * (1.0 + norm), "{}", (&back - &a).amax());
        prop_assert!((&back + back.transpose()).amax() < 1e-14);
    }

    #[test]
    fn log_is_conjugation_equivariant(seed in any::<u64>(), d in 2usize..7) {
        let mut r = rng(seed);
        let a = random_skew(d, 1.5, &mut r);
        let q = random_orthogonal(d, &mut r);
        let rot = matrix_exp_skew(&a).unwrap();
        let lhs = matrix_log_so(&(&q * &rot * q.transpose())).unwrap();
        let rhs = &q * matrix_log_so(&rot).unwrap() * q.transpose();
        prop_assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn exp_of_negation_is_inverse(seed in any::<u64>(), d in 2usize..9, norm in 0.0f64..10.0) {
        let mut r = rng(seed);
        let a = random_skew(d, norm, &mut r);
        let prod = matrix_exp_skew(&a).unwrap() * matrix_exp_skew(&(-&a)).unwrap();
        prop_assert!((prod - DMatrix::identity(d, d)).amax() < 1e-12);
    }

    #[test]
    fn one_parameter_group(seed in any::<u64>(), s in -2.0f64..2.0, u in -2.0f64..2.0) {
        let mut r = rng(seed);
        let a = random_skew(5, 1.0, &mut r);
        let g = SkewExp::new(&a).unwrap();
        prop_assert!((g.exp(s) * g.exp(u) - g.exp(s + u)).amax() < 1e-12);
    }
}

#[test]
fn rotation_by_pi_is_ambiguous_and_reflection_rejected() {
    let mut r = DMatrix::identity(3, 3);
    r[(0, 0)] = -1.0;
    r[(1, 1)] = -1.0;
    assert!(matches!(
        matrix_log_so(&r),
        Err(Error::BranchAmbiguity { .. })
    ));
    let mut f = DMatrix::identity(3, 3);
    f[(2, 2)] = -1.0;
    assert!(matches!(matrix_log_so(&f), Err(Error::Reflection(_))));
}

/// Knots sampled from a single geodesic reproduce that geodesic between knots.
#[test]
fn path_through_geodesic_samples_is_the_geodesic() {
    let mut r = rng(51);
    let d = 6;
    let u0 = random_orthogonal(d, &mut r);
    let g = random_skew(d, 0.4, &mut r);
    let times: Vec<f64> = (0..5).map(|k| k as f64).collect();
    let frames: Vec<_> = times
        .iter()
        .map(|&t| &u0 * common::taylor_expm(&(&g * t)))
        .collect();
    let path = OrthogonalPath::new(times, frames.clone()).unwrap();
    for k in 0..=40 {
        let t = k as f64 * 0.1;
        let (u, u_dot) = path.interpolate(t).unwrap();
        let oracle = &u0 * common::taylor_expm(&(&g * t));
        assert!((&u - &oracle).amax() < 1e-10, "t = {}", t);
        assert!((&u_dot - &oracle * &g).amax() < 1e-10);
        assert!(common::orthogonality_defect(&u) < 1e-12);
    }
    for (k, f) in frames.iter().enumerate() {
        assert_eq!(&path.interpolate(k as f64).unwrap().0, f);
    }
    assert!(matches!(
        path.interpolate(4.5),
        Err(Error::OutsideDomain { .. })
    ));
}

#[test]
fn velocity_matches_finite_differences_and_sides_differ_at_knots() {
    let mut r = rng(52);
    let d = 5;
    let frames: Vec<_> = (0..4).map(|_| random_orthogonal(d, &mut r)).collect();
    let path = OrthogonalPath::aligned(vec![0.0, 1.0, 2.5, 3.0], frames).unwrap();
    let h = 1e-6;
    for &t in &[0.3, 1.7, 2.8] {
        let (_, u_dot) = path.interpolate(t).unwrap();
        let fd =
            (path.interpolate(t + h).unwrap().0 - path.interpolate(t - h).unwrap().0) / (2.0 * h);
        assert!((u_dot - fd).amax() < 1e-7);
    }
    let left = path.velocity_generator(1.0, Side::Left).unwrap();
    let right = path.velocity_generator(1.0, Side::Right).unwrap();
    let g: Vec<_> = path.generators().cloned().collect();
    assert!((left - &g[0]).amax() < 1e-14);
    assert!((right - &g[1] / 1.5).amax() < 1e-14);
}

#[test]
fn spline_log_derivative_of_exponential() {
    let times: Vec<f64> = (0..=20).map(|k| k as f64).collect();
    let spectra: Vec<DVector<f64>> = times
        .iter()
        .map(|&t| DVector::from_vec(vec![3.0 * (0.2 * t).exp(), (-0.1 * t).exp()]))
        .collect();
    let path = SpectrumPath::new(times, &spectra).unwrap();
    for k in 30..=170 {
        let t = k as f64 * 0.1;
        let (s, logd) = path.interpolate(t).unwrap();
        assert!((logd[0] - 0.2).abs() < 1e-3, "t = {} {}", t, logd[0]);
        assert!((logd[1] + 0.1).abs() < 1e-3);
        assert!((s[0] / (3.0 * (0.2 * t).exp()) - 1.0).abs() < 1e-3);
    }
    let first = path.truncate(1);
    assert_eq!(first.dim(), 1);
    assert_eq!(
        first.interpolate(4.2).unwrap().1[0],
        path.interpolate(4.2).unwrap().1[0]
    );
}

#[test]
fn spline_derivative_matches_finite_differences() {
    let x: Vec<f64> = vec![0.0, 0.5, 1.7, 2.0, 3.5];
    let y: Vec<f64> = x.iter().map(|v: &f64| v.sin() + 2.0).collect();
    let s = CubicSpline::natural(x.clone(), y.clone()).unwrap();
    for (xi, yi) in x.iter().zip(&y) {
        assert!((s.eval(*xi).unwrap().0 - yi).abs() < 1e-14);
    }
    let h = 1e-6;
    for &t in &[0.2, 1.0, 1.9, 3.0] {
        let fd = (s.eval(t + h).unwrap().0 - s.eval(t - h).unwrap().0) / (2.0 * h);
        assert!((s.eval(t).unwrap().1 - fd).abs() < 1e-7);
    }
    // Natural boundary: second derivative vanishes at the ends.
    let d2 = (s.eval(h).unwrap().1 - s.eval(0.0).unwrap().1) / h;
    assert!(d2.abs() < 1e-4);
}
