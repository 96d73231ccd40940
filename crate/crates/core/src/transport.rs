//! Rotation + stretch transport between layer bases and the residuals it leaves.
//!
//! A position at layer `t` is carried to layer `t + τ` by projecting onto
//! `U(t)`, scaling coordinate `i` by `σ_i(t+τ) / σ_i(t)`, and re-expanding in
//! `U(t+τ)`. The three factors are applied in that order and never multiplied
//! into a dense `D × D` operator unless [`TransportOperator::dense`] is called.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::TrajectoryEnsemble;
use crate::error::{Error, Result};
use crate::geometry::{basis_at, LayerBasis};
use crate::noise::CellMoments;

/// How the column signs of `U(t+τ)` are matched to those of `U(t)`.
///
/// Singular vectors are only defined up to sign, and the per-layer sign
/// convention does not tie layer `t` to layer `t + τ`. With `Correlation`,
/// direction `i` of the target basis is negated when the ensemble's
/// coordinates along `u_i(t)` and `u_i(t+τ)` are anti-correlated
/// (`Σ_k a_ik(t) a_ik(t+τ) < 0`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignAlignment {
    #[default]
    Correlation,
    None,
}

/// Factored transport `U(t+τ) · diag(s ⊙ Λ) · U(t)ᵀ`.
#[derive(Debug, Clone)]
pub struct TransportOperator<'a> {
    pub t: usize,
    pub tau: usize,
    pub source: &'a LayerBasis,
    pub target: &'a LayerBasis,
    /// `σ_i(t+τ) / σ_i(t)`, 1 on null-completed indices.
    pub stretch: DVector<f64>,
    /// ±1 per direction from sign alignment.
    pub signs: DVector<f64>,
}

impl<'a> TransportOperator<'a> {
    /// Operator without sign alignment.
    pub fn new(source: &'a LayerBasis, target: &'a LayerBasis) -> Result<Self> {
        if target.t < source.t {
            return Err(Error::OutOfRange {
                what: "target layer",
                value: target.t as i64,
                valid: format!(">= {}", source.t),
            });
        }
        if source.dim() != target.dim() {
            return Err(Error::DimensionMismatch(format!(
                "bases have D = {} and {}",
                source.dim(),
                target.dim()
            )));
        }
        let d = source.dim();
        let active = source.null_from.min(target.null_from);
        let mut stretch = DVector::from_element(d, 1.0);
        for i in 0..active {
            let from = source.sigma[i];
            if from == 0.0 {
                return Err(Error::ZeroSingularValue {
                    layer: source.t,
                    index: i,
                });
            }
            stretch[i] = target.sigma[i] / from;
        }
        if active < d {
            log::warn!(
                "transport {} -> {}: {} null-completed directions use unit stretch",
                source.t,
                target.t,
                d - active
            );
        }
        Ok(Self {
            t: source.t,
            tau: target.t - source.t,
            source,
            target,
            stretch,
            signs: DVector::from_element(d, 1.0),
        })
    }

    /// Sets signs from coordinate correlations: `coords_src = U(t)ᵀ X(t)`,
    /// `coords_dst = U(t+τ)ᵀ X(t+τ)`.
    pub fn align_signs(mut self, coords_src: &DMatrix<f64>, coords_dst: &DMatrix<f64>) -> Self {
        self.signs = correlation_signs(coords_src, coords_dst);
        self
    }

    /// Coefficients applied between projection and rotation.
    pub fn scale(&self) -> DVector<f64> {
        self.stretch.component_mul(&self.signs)
    }

    /// Transports every column of `x`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_to_coords(&(self.source.u.transpose() * x))
    }

    /// Transports columns already expressed in the source basis.
    pub fn apply_to_coords(&self, coords: &DMatrix<f64>) -> DMatrix<f64> {
        let mut scaled = coords.clone();
        let scale = self.scale();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= scale[i];
        }
        &self.target.u * scaled
    }

    /// The dense `D × D` matrix, for inspection only.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut right = self.source.u.transpose();
        let scale = self.scale();
        for (i, mut row) in right.row_iter_mut().enumerate() {
            row *= scale[i];
        }
        &self.target.u * right
    }
}

fn correlation_signs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(a.nrows(), |i, _| {
        if a.row(i).dot(&b.row(i)) < 0.0 {
            -1.0
        } else {
            1.0
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    pub t: usize,
    pub tau: usize,
    /// `D × N_s`, column `k` is `x_k(t+τ) − x̃_k(t, τ)`.
    pub deltas: DMatrix<f64>,
}

impl ResidualField {
    pub fn target(&self) -> usize {
        self.t + self.tau
    }
}

fn check_cell(ensemble: &TrajectoryEnsemble, t: usize, tau: usize) -> Result<()> {
    let n = ensemble.n_layers();
    if t < 1 || t + tau > n {
        return Err(Error::OutOfRange {
            what: "transport cell (t, t+tau) start",
            value: t as i64,
            valid: format!("1 <= t <= t+tau <= {} (got t+tau = {})", n, t + tau),
        });
    }
    Ok(())
}

fn check_dims(ensemble: &TrajectoryEnsemble, basis: &LayerBasis) -> Result<()> {
    if basis.dim() != ensemble.hidden_dim() {
        return Err(Error::DimensionMismatch(format!(
            "basis at layer {} has D = {}, ensemble has D = {}",
            basis.t,
            basis.dim(),
            ensemble.hidden_dim()
        )));
    }
    Ok(())
}

/// Builds the transport operator for cell `(t, t+τ)`.
pub fn transport_operator<'a>(
    ensemble: &TrajectoryEnsemble,
    bases: &'a [LayerBasis],
    t: usize,
    tau: usize,
    alignment: SignAlignment,
) -> Result<TransportOperator<'a>> {
    cell_operator(ensemble, bases, t, tau, alignment).map(|(op, _)| op)
}

/// The operator together with the source coordinates `U(t)ᵀ X(t)`.
fn cell_operator<'a>(
    ensemble: &TrajectoryEnsemble,
    bases: &'a [LayerBasis],
    t: usize,
    tau: usize,
    alignment: SignAlignment,
) -> Result<(TransportOperator<'a>, DMatrix<f64>)> {
    check_cell(ensemble, t, tau)?;
    let source = basis_at(bases, t)?;
    let target = basis_at(bases, t + tau)?;
    check_dims(ensemble, source)?;
    check_dims(ensemble, target)?;
    let op = TransportOperator::new(source, target)?;
    let coords = source.u.transpose() * ensemble.positions(t);
    let op = match alignment {
        SignAlignment::None => op,
        SignAlignment::Correlation => {
            let dst = target.u.transpose() * ensemble.positions(t + tau);
            op.align_signs(&coords, &dst)
        }
    };
    Ok((op, coords))
}

/// Extrapolated positions `x̃(t, τ)` for every sequence.
pub fn extrapolate(
    ensemble: &TrajectoryEnsemble,
    bases: &[LayerBasis],
    t: usize,
    tau: usize,
) -> Result<DMatrix<f64>> {
    extrapolate_with(ensemble, bases, t, tau, SignAlignment::default())
}

pub fn extrapolate_with(
    ensemble: &TrajectoryEnsemble,
    bases: &[LayerBasis],
    t: usize,
    tau: usize,
    alignment: SignAlignment,
) -> Result<DMatrix<f64>> {
    let (op, coords) = cell_operator(ensemble, bases, t, tau, alignment)?;
    Ok(op.apply_to_coords(&coords))
}

pub fn residuals(
    ensemble: &TrajectoryEnsemble,
    bases: &[LayerBasis],
    t: usize,
    tau: usize,
) -> Result<ResidualField> {
    residuals_with(ensemble, bases, t, tau, SignAlignment::default())
}

pub fn residuals_with(
    ensemble: &TrajectoryEnsemble,
    bases: &[LayerBasis],
    t: usize,
    tau: usize,
    alignment: SignAlignment,
) -> Result<ResidualField> {
    let predicted = extrapolate_with(ensemble, bases, t, tau, alignment)?;
    Ok(ResidualField {
        t,
        tau,
        deltas: ensemble.positions(t + tau) - predicted,
    })
}

/// All cells `1 <= t < t+τ <= T`, in lexicographic `(t, t+τ)` order.
pub fn grid_cells(n_layers: usize) -> Vec<(usize, usize)> {
    (1..n_layers)
        .flat_map(|t| ((t + 1)..=n_layers).map(move |s| (t, s)))
        .collect()
}

/// Shared per-layer work for grid evaluation: basis coordinates of every layer.
struct GridContext<'a> {
    ensemble: &'a TrajectoryEnsemble,
    bases: Vec<&'a LayerBasis>,
    coords: Vec<DMatrix<f64>>,
    alignment: SignAlignment,
}

impl<'a> GridContext<'a> {
    fn new(
        ensemble: &'a TrajectoryEnsemble,
        bases: &'a [LayerBasis],
        alignment: SignAlignment,
    ) -> Result<Self> {
        let n = ensemble.n_layers();
        let layer_bases = (0..=n)
            .map(|t| {
                let b = basis_at(bases, t)?;
                check_dims(ensemble, b)?;
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        let coords = (0..=n)
            .into_par_iter()
            .map(|t| layer_bases[t].u.transpose() * ensemble.positions(t))
            .collect();
        Ok(Self {
            ensemble,
            bases: layer_bases,
            coords,
            alignment,
        })
    }

    fn field(&self, t: usize, target: usize) -> Result<ResidualField> {
        let mut op = TransportOperator::new(self.bases[t], self.bases[target])?;
        if self.alignment == SignAlignment::Correlation {
            op = op.align_signs(&self.coords[t], &self.coords[target]);
        }
        let predicted = op.apply_to_coords(&self.coords[t]);
        Ok(ResidualField {
            t,
            tau: target - t,
            deltas: self.ensemble.positions(target) - predicted,
        })
    }
}

/// Residual fields for the complete upper-triangular grid, keyed by `(t, t+τ)`.
///
/// Cells are computed in parallel; each cell is single-threaded, so results
/// do not depend on scheduling.
pub fn residual_grid(
    ensemble: &TrajectoryEnsemble,
    bases: &[LayerBasis],
) -> Result<BTreeMap<(usize, usize), ResidualField>> {
    residual_grid_with(ensemble, bases, SignAlignment::default())
}

pub fn residual_grid_with(
    ensemble: &TrajectoryEnsemble,
    bases: &[LayerBasis],
    alignment: SignAlignment,
) -> Result<BTreeMap<(usize, usize), ResidualField>> {
    let ctx = GridContext::new(ensemble, bases, alignment)?;
    grid_cells(ensemble.n_layers())
        .into_par_iter()
        .map(|(t, s)| ctx.field(t, s).map(|f| ((t, s), f)))
        .collect()
}

/// Memory-bounded grid: per-cell per-coordinate moments, discarding each
/// residual field as soon as it is summarized.
pub fn residual_grid_summaries(
    ensemble: &TrajectoryEnsemble,
    bases: &[LayerBasis],
    alignment: SignAlignment,
) -> Result<Vec<CellMoments>> {
    let ctx = GridContext::new(ensemble, bases, alignment)?;
    grid_cells(ensemble.n_layers())
        .into_par_iter()
        .map(|(t, s)| ctx.field(t, s).map(|f| CellMoments::from_field(&f)))
        .collect()
}
