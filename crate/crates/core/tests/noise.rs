use lotkit::noise::{
    gaussianity_check, isotropy_report, summaries_to_tensors, IsotropyOptions, MomentMap,
    MomentOptions, MomentStat,
};
use lotkit::synthetic::{gaussian_matrix, law_residual_summaries, rng};
use lotkit::{fit_variance_law, moment_maps, CellMoments, FitWindow, ResidualField};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn field(deltas: DMatrix<f64>) -> ResidualField {
    ResidualField {
        t: 1,
        tau: 1,
        deltas,
    }
}

/// Two-pass textbook moments of one sample.
fn oracle_moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let c = |p: i32| x.iter().map(|v| (v - mean).powi(p)).sum::<f64>() / n;
    let unbiased = c(2) * n / (n - 1.0);
    (mean, unbiased, c(4) / c(2).powi(2) - 3.0)
}

#[test]
fn cell_moments_match_two_pass_oracle() {
    let mut r = rng(41);
    let m = gaussian_matrix(3, 57, &mut r).map(|v| v.powi(3) + 0.5);
    let cell = CellMoments::from_matrix(2, 5, &m);
    assert_eq!((cell.t, cell.target, cell.n_samples), (2, 5, 57));
    for i in 0..3 {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        let (mean, var, kurt) = oracle_moments(&row);
        assert!((cell.mean[i] - mean).abs() < 1e-13);
        assert!((cell.var[i] - var).abs() < 1e-12 * var);
        assert!((cell.excess_kurtosis[i] - kurt).abs() < 1e-11);
    }
}

#[test]
fn uniform_excess_kurtosis() {
    let mut r = rng(42);
    let m = DMatrix::from_fn(2, 200_000, |_, _| r.random::<f64>());
    let cell = CellMoments::from_matrix(1, 2, &m);
    for k in &cell.excess_kurtosis {
        // Uniform excess kurtosis is −6/5; its standard error here is about 0.004.
        assert!((k + 1.2).abs() < 0.02, "{}", k);
    }
}

#[test]
fn gaussian_log_variance_map() {
    let (d, n) = (8, 2000);
    let mut r = rng(43);
    let summaries: Vec<CellMoments> = lotkit::transport::grid_cells(4)
        .into_iter()
        .map(|(t, s)| CellMoments::from_matrix(t, s, &(gaussian_matrix(d, n, &mut r) * 2.0)))
        .collect();
    let maps = moment_maps(&summaries, 4, &MomentOptions::default()).unwrap();
    // ln of a sample variance has sd ≈ √(2/(n−1)); averaging over d coordinates.
    let se = (2.0 / ((n - 1) * d) as f64).sqrt();
    let kurt_se = (24.0 / (n * d) as f64).sqrt();
    for (t, s, v) in maps.log_variance.cells() {
        assert!((v - 4f64.ln()).abs() < 4.0 * se, "({}, {}) {}", t, s, v);
        // Mean |excess kurtosis| of Gaussians is of order its standard error.
        let k = maps.excess_kurtosis_abs.get(t, s).unwrap();
        assert!(k < 4.0 * kurt_se * (d as f64).sqrt());
        let m = maps.mean_over_sd.get(t, s).unwrap();
        assert!(m < 4.0 / (n as f64).sqrt());
    }
    assert_eq!(maps.log_variance.cells().len(), 6);
    assert!(maps.log_variance.get(0, 1).is_none());
    assert!(maps.log_variance.get(3, 2).is_none());
    assert_eq!(maps.get(MomentStat::MeanAbs).stat, MomentStat::MeanAbs);
}

#[test]
fn coordinate_subset_averages_only_selected_rows() {
    let m = DMatrix::from_fn(3, 10, |i, k| {
        (i as f64 + 1.0) * if k % 2 == 0 { 1.0 } else { -1.0 }
    });
    let cell = CellMoments::from_matrix(1, 2, &m);
    let opts = MomentOptions {
        coordinates: Some(vec![2]),
    };
    let maps = moment_maps(std::slice::from_ref(&cell), 2, &opts).unwrap();
    assert!((maps.log_variance.get(1, 2).unwrap() - cell.var[2].ln()).abs() < 1e-15);
    let bad = MomentOptions {
        coordinates: Some(vec![3]),
    };
    assert!(moment_maps(&[cell], 2, &bad).is_err());
}

#[test]
fn law_summaries_recover_parameters() {
    let (alpha, lambda) = (0.4, 0.15);
    let summaries = law_residual_summaries(12, 16, 400, alpha, lambda, 44);
    let maps = moment_maps(&summaries, 12, &MomentOptions::default()).unwrap();
    let model = fit_variance_law(&maps.log_variance, &FitWindow::default()).unwrap();
    assert!((model.lambda - lambda).abs() < 4.0 * model.lambda_se + 1e-3);
    assert!((model.ln_alpha - alpha.ln()).abs() < 4.0 * model.ln_alpha_se + 1e-2);
    assert!(model.fit_window.iter().all(|&(t, s)| t >= 3 && s <= 11));
    assert!((model.variance_at(5.0) - model.alpha * (5.0 * model.lambda).exp()).abs() < 1e-15);
}

#[test]
fn summary_tensors_layout() {
    let summaries = law_residual_summaries(3, 2, 10, 1.0, 0.0, 45);
    let tensors = summaries_to_tensors(&summaries, 3).unwrap();
    let names: Vec<&str> = tensors.iter().map(|t| t.0).collect();
    assert_eq!(names, ["delta_mean", "delta_var", "delta_kurt"]);
    let var = tensors[1].1.to_f64();
    assert_eq!(tensors[1].1.shape, vec![4, 4, 2]);
    for c in &summaries {
        let base = (c.t * 4 + c.target) * 2;
        assert_eq!(&var[base..base + 2], c.var.as_slice());
    }
    // (2, 1) lies below the diagonal.
    assert!(var[(2 * 4 + 1) * 2].is_nan());
}

#[test]
fn isotropy_of_iid_noise() {
    let mut r = rng(46);
    let x = gaussian_matrix(12, 3000, &mut r);
    let rep = isotropy_report(&field(x), &IsotropyOptions::default()).unwrap();
    assert!(rep.flagged_pairs.is_empty(), "{:?}", rep.flagged_pairs);
    assert!(rep.max_abs_correlation < rep.correlation_threshold);
    // Sample-variance CV for n = 3000 is about √(2/n) ≈ 0.026.
    assert!(rep.variance_cv < 0.08);
    assert!(rep.histogram_overlap > 0.9);
}

#[test]
fn correlated_pair_is_flagged() {
    let mut r = rng(47);
    let mut x = gaussian_matrix(6, 2000, &mut r);
    let mixed = x.row(1) * 0.6 + x.row(4) * 0.8;
    x.row_mut(4).copy_from(&mixed);
    let rep = isotropy_report(&field(x), &IsotropyOptions::default()).unwrap();
    assert_eq!(rep.max_pair, (1, 4));
    assert!((rep.max_abs_correlation - 0.6).abs() < 0.05);
    assert_eq!(rep.flagged_pairs.len(), 1);
}

#[test]
fn anisotropic_variances_lower_overlap() {
    let mut r = rng(48);
    let x = DMatrix::from_fn(4, 2000, |i, _| {
        r.sample::<f64, _>(rand_distr::StandardNormal) * (1 + 4 * i) as f64
    });
    let rep = isotropy_report(&field(x), &IsotropyOptions::default()).unwrap();
    assert!(rep.variance_cv > 1.0);
    assert!(rep.histogram_overlap < 0.8);
}

#[test]
fn gaussianity_flags() {
    let mut r = rng(49);
    let g = gaussian_matrix(1, 5000, &mut r);
    let rep = gaussianity_check(&field(g), 0).unwrap();
    assert!(!rep.non_gaussian, "{:?}", rep);
    for &(_, ratio) in &rep.tail_ratios {
        assert!((ratio - 1.0).abs() < 0.1);
    }
    // Laplace: excess kurtosis 3.
    let lap = DMatrix::from_fn(1, 5000, |_, _| {
        let u: f64 = r.random::<f64>() - 0.5;
        -u.signum() * (1.0 - 2.0 * u.abs()).ln()
    });
    let rep = gaussianity_check(&field(lap), 0).unwrap();
    assert!(rep.non_gaussian);
    assert!(rep.excess_kurtosis > 2.0);
    assert!(gaussianity_check(&field(DMatrix::zeros(1, 40)), 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noiseless_law_is_fitted_exactly(ln_alpha in -5.0f64..5.0, lambda in -1.0f64..1.0, n_layers in 7usize..20) {
        let mut values = DMatrix::from_element(n_layers + 1, n_layers + 1, f64::NAN);
        for t in 1..n_layers {
            for s in (t + 1)..=n_layers {
                values[(t, s)] = ln_alpha + lambda * s as f64;
            }
        }
        let map = MomentMap { stat: MomentStat::LogVariance, values };
        let model = fit_variance_law(&map, &FitWindow::default()).unwrap();
        prop_assert!((model.lambda - lambda).abs() < 1e-10);
        prop_assert!((model.ln_alpha - ln_alpha).abs() < 1e-9);
        prop_assert!(model.r_squared > 1.0 - 1e-9 || lambda.abs() < 1e-6);
    }
}
