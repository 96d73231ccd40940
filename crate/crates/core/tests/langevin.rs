mod common;

use lotkit::geometry::BasisOptions;
use lotkit::langevin::{compare_distributions, simulate_ensemble, ConstantDrift};
use lotkit::synthetic::{gaussian_matrix, rigid_ensemble, rng};
use lotkit::{
    compute_bases, extrapolate, integrate, moment_oracle, SdeConfig, SimulationRun,
    TrajectoryEnsemble,
};
use nalgebra::{DMatrix, DVector};

fn config(dt: f64, alpha: f64, lambda: f64, reps: usize) -> SdeConfig {
    SdeConfig {
        step_size: dt,
        noise_alpha: alpha,
        noise_lambda: lambda,
        seed: 17,
        n_replicas_per_start: reps,
        subspace_k: None,
    }
}

fn rotation(omega: f64, domain: (f64, f64)) -> ConstantDrift {
    ConstantDrift {
        a: DMatrix::from_row_slice(2, 2, &[0.0, -omega, omega, 0.0]),
        domain,
    }
}

#[test]
fn noiseless_steps_are_explicit_euler_powers() {
    let drift = rotation(0.8, (0.0, 3.0));
    let starts = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let dt = 0.1;
    let run = integrate(&starts, &drift, &config(dt, 0.0, 0.0, 1), 0.0, 3.0).unwrap();
    let step = DMatrix::identity(2, 2) + &drift.a * dt;
    for (k, state) in run.states.iter().enumerate() {
        let oracle = step.pow(10 * k as u32) * &starts;
        assert!((state - oracle).amax() < 1e-12, "saved time {}", k);
    }
}

#[test]
fn rotation_converges_at_first_order() {
    let omega = 0.8;
    let drift = rotation(omega, (0.0, 3.0));
    let starts = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let exact = DVector::from_vec(vec![(omega * 3.0).cos(), (omega * 3.0).sin()]);
    let error = |dt: f64| {
        let run = integrate(&starts, &drift, &config(dt, 0.0, 0.0, 1), 0.0, 3.0).unwrap();
        (run.states[3].column(0) - &exact).norm()
    };
    let (coarse, fine) = (error(0.02), error(0.01));
    assert!(coarse < 0.03);
    assert!((coarse / fine - 2.0).abs() < 0.1, "{} / {}", coarse, fine);
    // Explicit Euler drifts outward: radius (1 + ω²Δt²)^{n/2}.
    let run = integrate(&starts, &drift, &config(0.01, 0.0, 0.0, 1), 0.0, 3.0).unwrap();
    let r = run.states[3].column(0).norm();
    assert!((r - (1.0 + omega * omega * 1e-4f64).powf(150.0)).abs() < 1e-12);
}

#[test]
fn moment_oracle_matches_scalar_closed_forms() {
    let (a, alpha, lambda) = (-0.3, 0.5, 0.2);
    let (t0, t1) = (1.0, 4.0);
    let drift = ConstantDrift {
        a: DMatrix::identity(2, 2) * a,
        domain: (0.0, 5.0),
    };
    let m0 = DVector::from_vec(vec![1.5, -0.5]);
    let p0 = DMatrix::identity(2, 2) * 0.7;
    let traj = moment_oracle(&drift, &config(0.05, alpha, lambda, 1), t0, t1, &m0, &p0).unwrap();
    assert_eq!(traj.times, vec![1.0, 2.0, 3.0, 4.0]);
    for (k, &t) in traj.times.iter().enumerate() {
        let mean = &m0 * (a * (t - t0)).exp();
        let growth = alpha * lambda / (lambda - 2.0 * a)
            * ((lambda * t).exp() - (2.0 * a * (t - t0) + lambda * t0).exp());
        let var = 0.7 * (2.0 * a * (t - t0)).exp() + growth;
        assert!((&traj.means[k] - mean).amax() < 1e-8);
        assert!((traj.covariances[k][(0, 0)] - var).abs() < 1e-8);
        assert!(traj.covariances[k][(0, 1)].abs() < 1e-12);
    }
}

#[test]
fn pure_diffusion_variance_matches_law() {
    let (alpha, lambda) = (0.3, 0.25);
    let (t0, t1) = (2.0, 5.0);
    let drift = ConstantDrift {
        a: DMatrix::zeros(3, 3),
        domain: (0.0, 6.0),
    };
    let cfg = config(0.05, alpha, lambda, 4000);
    let law = |t: f64| alpha * ((lambda * t).exp() - (lambda * t0).exp());
    let traj = moment_oracle(
        &drift,
        &cfg,
        t0,
        t1,
        &DVector::zeros(3),
        &DMatrix::zeros(3, 3),
    )
    .unwrap();
    for (k, &t) in traj.times.iter().enumerate() {
        assert!((traj.covariances[k][(1, 1)] - law(t)).abs() < 1e-8);
    }
    let run = integrate(&DMatrix::zeros(3, 1), &drift, &cfg, t0, t1).unwrap();
    let last = run.states.last().unwrap();
    let n = last.ncols() as f64;
    let se = law(t1) * (2.0 / (n - 1.0)).sqrt();
    for row in last.row_iter() {
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var - law(t1)).abs() < 4.0 * se, "{} vs {}", var, law(t1));
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let drift = rotation(0.5, (0.0, 2.0));
    let mut r = rng(61);
    let starts = gaussian_matrix(2, 50, &mut r);
    let cfg = config(0.05, 0.4, 0.3, 7);
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| integrate(&starts, &drift, &cfg, 0.0, 2.0).unwrap())
    };
    let (one, four) = (run_with(1), run_with(4));
    assert_eq!(one.states, four.states);
    let again = run_with(2);
    assert_eq!(one.states, again.states);
    let mut other = cfg.clone();
    other.seed += 1;
    let shifted = integrate(&starts, &drift, &other, 0.0, 2.0).unwrap();
    assert_ne!(shifted.states[2], one.states[2]);
}

#[test]
fn noiseless_simulation_tracks_transport() {
    let (e, _) = rigid_ensemble(5, 20, 5, 62).unwrap();
    let bases = compute_bases(&e, BasisOptions::default()).unwrap();
    let target = extrapolate(&e, &bases, 1, 3).unwrap();
    let error = |dt: f64| {
        let run = simulate_ensemble(&e, &bases, &config(dt, 0.0, 0.0, 1), 1, 4).unwrap();
        common::rel_frobenius(&run.cartesian(3), &target)
    };
    let (coarse, fine) = (error(0.02), error(0.01));
    assert!(fine < coarse);
    // Euler error halves with the step until the spline error floor is reached.
    assert!(coarse / fine > 1.6, "{} / {}", coarse, fine);
    assert!(fine < 0.02);
}

#[test]
fn full_subspace_equals_cartesian() {
    let (e, _) = rigid_ensemble(4, 12, 3, 63).unwrap();
    let bases = compute_bases(&e, BasisOptions::default()).unwrap();
    let mut cfg = config(0.05, 0.2, 0.1, 2);
    let full = simulate_ensemble(&e, &bases, &cfg, 0, 3).unwrap();
    cfg.subspace_k = Some(4);
    let explicit = simulate_ensemble(&e, &bases, &cfg, 0, 3).unwrap();
    assert!(full.subspace.is_none() && explicit.subspace.is_none());
    assert_eq!(full.states, explicit.states);

    cfg.subspace_k = Some(2);
    let reduced = simulate_ensemble(&e, &bases, &cfg, 0, 3).unwrap();
    let b = reduced.subspace.as_ref().unwrap();
    assert_eq!(b.shape(), (4, 2));
    assert!(common::orthogonality_defect(b) < 1e-12);
    assert_eq!(reduced.effective_dim(), 2);
    assert_eq!(reduced.cartesian(1).shape(), (4, 24));
}

fn run_from(states: Vec<DMatrix<f64>>, times: Vec<f64>) -> SimulationRun {
    SimulationRun {
        config: SdeConfig::default(),
        start_layer: times[0],
        end_layer: *times.last().unwrap(),
        saved_times: times,
        states,
        subspace: None,
    }
}

#[test]
fn comparison_of_identical_and_shifted_ensembles() {
    let mut r = rng(64);
    let layers: Vec<DMatrix<f64>> = (0..4).map(|_| gaussian_matrix(3, 500, &mut r)).collect();
    let truth = TrajectoryEnsemble::new(layers.clone(), Default::default()).unwrap();
    let bases = compute_bases(&truth, BasisOptions::default()).unwrap();
    let same = run_from(layers[1..].to_vec(), vec![1.0, 2.0, 3.0]);
    let cmp = compare_distributions(&same, &truth, &bases, (0, 1)).unwrap();
    for c in &cmp.per_time {
        assert_eq!((c.ks_first, c.ks_second), (0.0, 0.0));
        assert!((c.overlap_2d - 1.0).abs() < 1e-12);
        assert_eq!(c.mean_shift_over_spread, 0.0);
        assert_eq!(c.cov_rel_error, 0.0);
    }
    let shifted = run_from(
        layers[1..].iter().map(|m| m.add_scalar(100.0)).collect(),
        vec![1.0, 2.0, 3.0],
    );
    let cmp = compare_distributions(&shifted, &truth, &bases, (0, 1)).unwrap();
    for c in &cmp.per_time {
        assert!(c.overlap_2d < 1e-12);
        assert_eq!(c.ks_first, 1.0);
        assert!(c.mean_shift_over_spread > 10.0);
        assert!(c.cov_rel_error < 1e-12);
    }
    assert!(compare_distributions(&same, &truth, &bases, (0, 3)).is_err());
}

#[test]
fn saved_run_roundtrips_as_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sim.lote");
    let drift = rotation(0.3, (0.0, 2.5));
    let mut r = rng(65);
    let starts = gaussian_matrix(2, 3, &mut r);
    let run = integrate(&starts, &drift, &config(0.1, 0.1, 0.2, 2), 0.5, 2.5).unwrap();
    assert_eq!(run.saved_times, vec![0.5, 1.0, 2.0, 2.5]);
    run.save(&p).unwrap();
    let back = TrajectoryEnsemble::load(&p).unwrap();
    assert_eq!(back.layers(), run.to_ensemble().unwrap().layers());
    assert_eq!(back.meta()["saved_times"], "[0.5,1.0,2.0,2.5]");
    let tensor = run.to_tensor().unwrap();
    assert_eq!(tensor.shape, vec![6, 2, 4]);
    let flat = tensor.to_f64();
    // Trajectory 4 is replica 0 of start 2; entry [4, 1, 2] is coordinate 1 at saved time 2.
    assert_eq!(flat[(4 * 2 + 1) * 4 + 2], run.states[2][(1, 4)]);
    assert_eq!(run.states[0].column(4), starts.column(2));
}
