//! Seeded synthetic ensembles with known structure.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::ensemble::TrajectoryEnsemble;
use crate::error::{Error, Result};
use crate::manifold::matrix_exp_skew;
use crate::noise::CellMoments;
use crate::transport::grid_cells;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// diagonal of R made positive).
pub fn random_orthogonal(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    random_orthonormal_columns(d, d, rng)
}

/// `rows × cols` matrix with orthonormal columns, `cols <= rows`.
pub fn random_orthonormal_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let qr = gaussian_matrix(rows, cols, rng).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Spectral norm of a skew-symmetric matrix.
pub fn skew_spectral_norm(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.tr_mul(a))
        .eigenvalues
        .max()
        .max(0.0)
        .sqrt()
}

/// Random skew-symmetric matrix with the given spectral norm.
pub fn random_skew(d: usize, spectral_norm: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let z = gaussian_matrix(d, d, rng);
    let a = (&z - z.transpose()) * 0.5;
    let norm = skew_spectral_norm(&a);
    if norm == 0.0 {
        return a;
    }
    a * (spectral_norm / norm)
}

/// Frames `U(l) = U₀ exp(l G)` and spectra `σ_i(l) = s_i e^{r_i l}` at integer layers.
///
/// `s_i` decreases linearly from 5 to 1 and the rates decrease with `i` from
/// `1.5·stretch_rate` to `stretch_rate`, so the singular values stay ordered
/// and separated at every layer.
#[derive(Debug, Clone)]
pub struct RotatingStretchingPath {
    pub frames: Vec<DMatrix<f64>>,
    pub spectra: Vec<DVector<f64>>,
    pub generator: DMatrix<f64>,
    pub rates: DVector<f64>,
}

pub fn rotating_stretching_path(
    d: usize,
    n_layers: usize,
    rotation_rate: f64,
    stretch_rate: f64,
    seed: u64,
) -> Result<RotatingStretchingPath> {
    if d < 2 {
        return Err(Error::Degenerate("need d >= 2".into()));
    }
    let mut rng = rng(seed);
    let u0 = random_orthogonal(d, &mut rng);
    let generator = random_skew(d, rotation_rate, &mut rng);
    let base = DVector::from_fn(d, |i, _| 5.0 - 4.0 * i as f64 / (d - 1) as f64);
    let rates = DVector::from_fn(d, |i, _| {
        stretch_rate * (1.5 - 0.5 * i as f64 / (d - 1) as f64)
    });
    let mut frames = Vec::with_capacity(n_layers + 1);
    let mut spectra = Vec::with_capacity(n_layers + 1);
    for l in 0..=n_layers {
        frames.push(&u0 * matrix_exp_skew(&(&generator * l as f64))?);
        spectra.push(base.zip_map(&rates, |s, r| s * (r * l as f64).exp()));
    }
    Ok(RotatingStretchingPath {
        frames,
        spectra,
        generator,
        rates,
    })
}

/// Ensemble `X(l) = U(l) diag(σ(l)) Vᵀ √N_s` with a fixed `N_s × D`
/// orthonormal `V`, so linear transport between any two layers is exact.
pub fn rigid_ensemble(
    d: usize,
    n_sequences: usize,
    n_layers: usize,
    seed: u64,
) -> Result<(TrajectoryEnsemble, RotatingStretchingPath)> {
    if n_sequences < d {
        return Err(Error::Degenerate(format!(
            "rigid ensembles need N_s >= D, got {} < {}",
            n_sequences, d
        )));
    }
    let path = rotating_stretching_path(d, n_layers, 0.3, 0.05, seed)?;
    let mut r = rng(seed ^ 0x5eed);
    let vt = random_orthonormal_columns(n_sequences, d, &mut r).transpose()
        * (n_sequences as f64).sqrt();
    let layers = path
        .frames
        .iter()
        .zip(&path.spectra)
        .map(|(u, s)| u * DMatrix::from_diagonal(s) * &vt)
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "synthetic_rigid".into());
    meta.insert("seed".into(), seed.to_string());
    Ok((TrajectoryEnsemble::new(layers, meta)?, path))
}

/// Rigid transport plus additive Gaussian noise injected each layer with
/// variance `α (e^{λ(l+1)} − e^{λl})` per coordinate, the discrete
/// counterpart of the Langevin noise law.
pub fn noisy_transport_ensemble(
    d: usize,
    n_sequences: usize,
    n_layers: usize,
    alpha: f64,
    lambda: f64,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let path = rotating_stretching_path(d, n_layers, 0.3, 0.05, seed)?;
    let mut r = rng(seed ^ 0x7a11);
    let mut x = gaussian_matrix(d, n_sequences, &mut r) * 3.0;
    let mut layers = vec![x.clone()];
    for l in 0..n_layers {
        let stretch = path.spectra[l + 1].component_div(&path.spectra[l]);
        let step =
            &path.frames[l + 1] * DMatrix::from_diagonal(&stretch) * path.frames[l].transpose();
        let var = alpha * ((lambda * (l + 1) as f64).exp() - (lambda * l as f64).exp());
        x = step * x + gaussian_matrix(d, n_sequences, &mut r) * var.max(0.0).sqrt();
        layers.push(x.clone());
    }
    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "synthetic_noisy_transport".into());
    meta.insert("seed".into(), seed.to_string());
    TrajectoryEnsemble::new(layers, meta)
}

/// Anisotropic Gaussian clouds whose mean drifts along a fixed direction,
/// with a power-law spectrum; layers are independent draws.
pub fn gaussian_cloud_ensemble(
    d: usize,
    n_sequences: usize,
    n_layers: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let mut r = rng(seed);
    let direction = random_orthonormal_columns(d, 1, &mut r);
    let layers: Vec<DMatrix<f64>> = (0..=n_layers)
        .map(|l| {
            let mut lr = rng(seed.wrapping_add(1 + l as u64));
            let scales =
                DVector::from_fn(d, |i, _| (1.0 + l as f64 * 0.1) / (1.0 + i as f64).sqrt());
            let basis = random_orthogonal(d, &mut lr);
            let z = gaussian_matrix(d, n_sequences, &mut lr);
            let mut x = basis * DMatrix::from_diagonal(&scales) * z;
            let offset = &direction * (2.0 * l as f64);
            for mut col in x.column_iter_mut() {
                col += &offset;
            }
            x
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "synthetic_gaussian_cloud".into());
    meta.insert("seed".into(), seed.to_string());
    TrajectoryEnsemble::new(layers, meta)
}

/// Residual-grid summaries whose cells hold independent Gaussian draws with
/// per-coordinate variance `α e^{λ(t+τ)}`.
pub fn law_residual_summaries(
    n_layers: usize,
    d: usize,
    n_sequences: usize,
    alpha: f64,
    lambda: f64,
    seed: u64,
) -> Vec<CellMoments> {
    grid_cells(n_layers)
        .into_par_iter()
        .map(|(t, s)| {
            let mut r = rng(seed);
            r.set_stream((t * (n_layers + 1) + s) as u64);
            let sd = (alpha * (lambda * s as f64).exp()).sqrt();
            CellMoments::from_matrix(t, s, &(gaussian_matrix(d, n_sequences, &mut r) * sd))
        })
        .collect()
}

/// Two independent Gaussian ensembles; `b` is shifted by `offset` along a
/// fixed unit direction at layers `>= gate_layer`.
pub fn gated_pair(
    d: usize,
    n_sequences: usize,
    n_layers: usize,
    gate_layer: usize,
    offset: f64,
    seed: u64,
) -> Result<(TrajectoryEnsemble, TrajectoryEnsemble)> {
    let mut r = rng(seed);
    let direction = random_orthonormal_columns(d, 1, &mut r);
    let mut a_layers = Vec::with_capacity(n_layers + 1);
    let mut b_layers = Vec::with_capacity(n_layers + 1);
    for l in 0..=n_layers {
        a_layers.push(gaussian_matrix(d, n_sequences, &mut r));
        let mut b = gaussian_matrix(d, n_sequences, &mut r);
        if l >= gate_layer {
            for mut col in b.column_iter_mut() {
                col.axpy(offset, &direction.column(0), 1.0);
            }
        }
        b_layers.push(b);
    }
    Ok((
        TrajectoryEnsemble::new(a_layers, BTreeMap::new())?,
        TrajectoryEnsemble::new(b_layers, BTreeMap::new())?,
    ))
}
