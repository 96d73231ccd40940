//! Residual statistics: per-cell moment maps, the exponential variance law
//! fit, and isotropy / Gaussianity diagnostics.
//!
//! Per coordinate, variance uses the unbiased estimator and excess kurtosis the
//! biased moment ratio `m4 / m2² − 3`. Maps average the per-coordinate value
//! over coordinates, taking absolute values of means and kurtoses.

use nalgebra::{DMatrix, RowDVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::container::Tensor;
use crate::error::{Error, Result};
use crate::transport::ResidualField;

/// Below this many samples per cell the moment estimates are not reported.
pub const MIN_MOMENT_SAMPLES: usize = 8;
/// Minimum samples for the isotropy and Gaussianity diagnostics.
pub const MIN_DIAGNOSTIC_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentStat {
    MeanAbs,
    MeanOverSd,
    LogVariance,
    ExcessKurtosisAbs,
}

impl MomentStat {
    pub const ALL: [MomentStat; 4] = [
        MomentStat::MeanAbs,
        MomentStat::MeanOverSd,
        MomentStat::LogVariance,
        MomentStat::ExcessKurtosisAbs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MomentStat::MeanAbs => "mean_abs",
            MomentStat::MeanOverSd => "mean_over_sd",
            MomentStat::LogVariance => "log_variance",
            MomentStat::ExcessKurtosisAbs => "excess_kurtosis_abs",
        }
    }
}

/// Per-coordinate moments of one residual cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMoments {
    pub t: usize,
    pub target: usize,
    pub n_samples: usize,
    pub mean: Vec<f64>,
    /// Unbiased sample variance.
    pub var: Vec<f64>,
    /// `m4 / m2² − 3`; NaN where the coordinate has zero spread.
    pub excess_kurtosis: Vec<f64>,
}

struct RowMoments {
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

fn row_moments<'a>(values: impl Iterator<Item = &'a f64> + Clone, n: usize) -> RowMoments {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in values {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    RowMoments {
        mean,
        m2: m2 / nf,
        m3: m3 / nf,
        m4: m4 / nf,
    }
}

impl CellMoments {
    pub fn from_field(field: &ResidualField) -> Self {
        Self::from_matrix(field.t, field.target(), &field.deltas)
    }

    /// Moments of each row of `deltas` (`D × N_s`) across its columns.
    pub fn from_matrix(t: usize, target: usize, deltas: &DMatrix<f64>) -> Self {
        let n = deltas.ncols();
        let d = deltas.nrows();
        let mut mean = Vec::with_capacity(d);
        let mut var = Vec::with_capacity(d);
        let mut kurt = Vec::with_capacity(d);
        // Transposing once makes every coordinate contiguous.
        let rows = deltas.transpose();
        for i in 0..d {
            let m = row_moments(rows.column(i).iter(), n);
            mean.push(m.mean);
            var.push(if n > 1 {
                m.m2 * n as f64 / (n - 1) as f64
            } else {
                0.0
            });
            kurt.push(if m.m2 > 0.0 {
                m.m4 / (m.m2 * m.m2) - 3.0
            } else {
                f64::NAN
            });
        }
        Self {
            t,
            target,
            n_samples: n,
            mean,
            var,
            excess_kurtosis: kurt,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Summaries for a whole residual grid.
pub fn summarize_grid<'a>(fields: impl IntoIterator<Item = &'a ResidualField>) -> Vec<CellMoments> {
    let fields: Vec<_> = fields.into_iter().collect();
    fields
        .par_iter()
        .map(|f| CellMoments::from_field(f))
        .collect()
}

/// `(T+1) × (T+1)` map; cell `(t, t+τ)` is defined only for `t < t+τ`.
/// Undefined cells hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMap {
    pub stat: MomentStat,
    pub values: DMatrix<f64>,
}

impl MomentMap {
    pub fn get(&self, t: usize, target: usize) -> Option<f64> {
        if t >= target || target >= self.values.ncols() {
            return None;
        }
        let v = self.values[(t, target)];
        v.is_finite().then_some(v)
    }

    /// Defined cells as `(t, t+τ, value)`, lexicographic order.
    pub fn cells(&self) -> Vec<(usize, usize, f64)> {
        let n = self.values.ncols();
        (0..n)
            .flat_map(|t| ((t + 1)..n).map(move |s| (t, s)))
            .filter_map(|(t, s)| self.get(t, s).map(|v| (t, s, v)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentMaps {
    pub mean_abs: MomentMap,
    pub mean_over_sd: MomentMap,
    pub log_variance: MomentMap,
    pub excess_kurtosis_abs: MomentMap,
}

impl MomentMaps {
    pub fn get(&self, stat: MomentStat) -> &MomentMap {
        match stat {
            MomentStat::MeanAbs => &self.mean_abs,
            MomentStat::MeanOverSd => &self.mean_over_sd,
            MomentStat::LogVariance => &self.log_variance,
            MomentStat::ExcessKurtosisAbs => &self.excess_kurtosis_abs,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentOptions {
    /// Cartesian coordinates to average over; all when `None`.
    pub coordinates: Option<Vec<usize>>,
}

/// Builds the four aggregated maps from per-cell summaries.
pub fn moment_maps(
    summaries: &[CellMoments],
    n_layers: usize,
    opts: &MomentOptions,
) -> Result<MomentMaps> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::Degenerate("empty residual grid".into()))?;
    if first.n_samples < MIN_MOMENT_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_MOMENT_SAMPLES,
            got: first.n_samples,
        });
    }
    let d = first.dim();
    let coords: Vec<usize> = match &opts.coordinates {
        Some(c) => {
            if let Some(&bad) = c.iter().find(|&&i| i >= d) {
                return Err(Error::OutOfRange {
                    what: "coordinate",
                    value: bad as i64,
                    valid: format!("0..{}", d),
                });
            }
            if c.is_empty() {
                return Err(Error::InvalidConfig("empty coordinate subset".into()));
            }
            c.clone()
        }
        None => (0..d).collect(),
    };
    let size = n_layers + 1;
    let blank = || DMatrix::from_element(size, size, f64::NAN);
    let mut maps = [blank(), blank(), blank(), blank()];
    for cell in summaries {
        if cell.target >= size || cell.t >= cell.target {
            return Err(Error::OutOfRange {
                what: "cell target layer",
                value: cell.target as i64,
                valid: format!("t < t+tau <= {}", n_layers),
            });
        }
        if cell.n_samples < MIN_MOMENT_SAMPLES {
            return Err(Error::TooFewSamples {
                needed: MIN_MOMENT_SAMPLES,
                got: cell.n_samples,
            });
        }
        if cell.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "cell ({}, {}) has D = {}, expected {}",
                cell.t,
                cell.target,
                cell.dim(),
                d
            )));
        }
        let k = coords.len() as f64;
        let spread_ok = coords.iter().all(|&i| cell.var[i] > 0.0);
        let mean_abs = coords.iter().map(|&i| cell.mean[i].abs()).sum::<f64>() / k;
        let (over_sd, log_var, kurt) = if spread_ok {
            (
                coords
                    .iter()
                    .map(|&i| cell.mean[i].abs() / cell.var[i].sqrt())
                    .sum::<f64>()
                    / k,
                coords.iter().map(|&i| cell.var[i].ln()).sum::<f64>() / k,
                coords
                    .iter()
                    .map(|&i| cell.excess_kurtosis[i].abs())
                    .sum::<f64>()
                    / k,
            )
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        let idx = (cell.t, cell.target);
        maps[0][idx] = mean_abs;
        maps[1][idx] = over_sd;
        maps[2][idx] = log_var;
        maps[3][idx] = kurt;
    }
    let [a, b, c, e] = maps;
    Ok(MomentMaps {
        mean_abs: MomentMap {
            stat: MomentStat::MeanAbs,
            values: a,
        },
        mean_over_sd: MomentMap {
            stat: MomentStat::MeanOverSd,
            values: b,
        },
        log_variance: MomentMap {
            stat: MomentStat::LogVariance,
            values: c,
        },
        excess_kurtosis_abs: MomentMap {
            stat: MomentStat::ExcessKurtosisAbs,
            values: e,
        },
    })
}

/// Cell selection for the variance-law fit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitWindow {
    /// Smallest source layer `t` included.
    pub start_min: usize,
    pub start_max: Option<usize>,
    pub target_min: Option<usize>,
    /// Largest target layer included; `None` means `T − 1` (final layer excluded).
    pub target_max: Option<usize>,
}

impl Default for FitWindow {
    fn default() -> Self {
        Self {
            start_min: 3,
            start_max: None,
            target_min: None,
            target_max: None,
        }
    }
}

impl FitWindow {
    /// Every cell of the grid.
    pub fn all() -> Self {
        Self {
            start_min: 0,
            start_max: None,
            target_min: None,
            target_max: Some(usize::MAX),
        }
    }

    pub fn contains(&self, t: usize, target: usize, n_layers: usize) -> bool {
        let target_max = self.target_max.unwrap_or(n_layers.saturating_sub(1));
        t >= self.start_min
            && self.start_max.is_none_or(|m| t <= m)
            && self.target_min.is_none_or(|m| target >= m)
            && target <= target_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Variance prefactor `α = exp(intercept)`.
    pub alpha: f64,
    pub ln_alpha: f64,
    /// Exponential rate per layer.
    pub lambda: f64,
    pub fit_window: Vec<(usize, usize)>,
    pub r_squared: f64,
    pub residual_sd_of_fit: f64,
    pub lambda_se: f64,
    pub ln_alpha_se: f64,
}

impl NoiseModel {
    /// `α e^{λ s}` at target layer `s`.
    pub fn variance_at(&self, target: f64) -> f64 {
        self.alpha * (self.lambda * target).exp()
    }
}

/// Ordinary least squares of `ln var` against `t + τ` over the window cells.
pub fn fit_variance_law(map: &MomentMap, window: &FitWindow) -> Result<NoiseModel> {
    if map.stat != MomentStat::LogVariance {
        return Err(Error::InvalidConfig(format!(
            "variance law is fitted to log_variance, got {}",
            map.stat.name()
        )));
    }
    let n_layers = map.values.ncols() - 1;
    let cells: Vec<(usize, usize, f64)> = map
        .cells()
        .into_iter()
        .filter(|&(t, s, _)| window.contains(t, s, n_layers))
        .collect();
    if cells.is_empty() {
        return Err(Error::EmptyFitWindow);
    }
    let mut distinct: Vec<usize> = cells.iter().map(|c| c.1).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Underdetermined(distinct.len()));
    }
    let n = cells.len() as f64;
    let x_mean = cells.iter().map(|c| c.1 as f64).sum::<f64>() / n;
    let y_mean = cells.iter().map(|c| c.2).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(_, s, y) in &cells {
        let dx = s as f64 - x_mean;
        let dy = y - y_mean;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let lambda = sxy / sxx;
    let ln_alpha = y_mean - lambda * x_mean;
    let sse: f64 = cells
        .iter()
        .map(|&(_, s, y)| (y - ln_alpha - lambda * s as f64).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let dof = (cells.len() - 2) as f64;
    let residual_sd = (sse / dof).sqrt();
    Ok(NoiseModel {
        alpha: ln_alpha.exp(),
        ln_alpha,
        lambda,
        fit_window: cells.iter().map(|c| (c.0, c.1)).collect(),
        r_squared,
        residual_sd_of_fit: residual_sd,
        lambda_se: residual_sd / sxx.sqrt(),
        ln_alpha_se: residual_sd * (1.0 / n + x_mean * x_mean / sxx).sqrt(),
    })
}

/// `delta_mean`, `delta_var`, `delta_kurt`, each `[T+1, T+1, D]`; NaN outside the grid.
pub fn summaries_to_tensors(
    summaries: &[CellMoments],
    n_layers: usize,
) -> Result<Vec<(&'static str, Tensor)>> {
    let d = summaries.first().map(|c| c.dim()).unwrap_or(0);
    let size = n_layers + 1;
    let mut out = [
        vec![f64::NAN; size * size * d],
        vec![f64::NAN; size * size * d],
        vec![f64::NAN; size * size * d],
    ];
    for c in summaries {
        if c.target >= size {
            return Err(Error::OutOfRange {
                what: "cell target layer",
                value: c.target as i64,
                valid: format!("<= {}", n_layers),
            });
        }
        let base = (c.t * size + c.target) * d;
        out[0][base..base + d].copy_from_slice(&c.mean);
        out[1][base..base + d].copy_from_slice(&c.var);
        out[2][base..base + d].copy_from_slice(&c.excess_kurtosis);
    }
    let [m, v, k] = out;
    let shape = vec![size, size, d];
    Ok(vec![
        ("delta_mean", Tensor::f64(shape.clone(), m)?),
        ("delta_var", Tensor::f64(shape.clone(), v)?),
        ("delta_kurt", Tensor::f64(shape, k)?),
    ])
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsotropyOptions {
    /// Number of leading coordinates in the correlation check.
    pub correlation_subset: usize,
    /// Family-wise false-positive rate for the correlation threshold.
    pub family_alpha: f64,
    pub histogram_bins: usize,
}

impl Default for IsotropyOptions {
    fn default() -> Self {
        Self {
            correlation_subset: 64,
            family_alpha: 0.01,
            histogram_bins: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotropyReport {
    pub variances: Vec<f64>,
    /// Coefficient of variation of the per-coordinate variances.
    pub variance_cv: f64,
    pub max_abs_correlation: f64,
    pub max_pair: (usize, usize),
    /// Bonferroni-corrected `|ρ|` threshold (Fisher z) for the subset.
    pub correlation_threshold: f64,
    /// Pairs above the threshold as `(i, j, ρ)`.
    pub flagged_pairs: Vec<(usize, usize, f64)>,
    /// Mean overlap coefficient between each coordinate's histogram and the pooled one.
    pub histogram_overlap: f64,
}

pub fn isotropy_report(field: &ResidualField, opts: &IsotropyOptions) -> Result<IsotropyReport> {
    let x = &field.deltas;
    let (d, n) = x.shape();
    if n < MIN_DIAGNOSTIC_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_DIAGNOSTIC_SAMPLES,
            got: n,
        });
    }
    let moments = CellMoments::from_field(field);
    if let Some(i) = moments.var.iter().position(|&v| v <= 0.0) {
        return Err(Error::Degenerate(format!(
            "coordinate {} has zero variance",
            i
        )));
    }
    let var_mean = moments.var.iter().sum::<f64>() / d as f64;
    let var_sd = if d > 1 {
        (moments
            .var
            .iter()
            .map(|v| (v - var_mean).powi(2))
            .sum::<f64>()
            / (d - 1) as f64)
            .sqrt()
    } else {
        0.0
    };

    let p = opts.correlation_subset.min(d);
    let standardized: Vec<RowDVector<f64>> = (0..p)
        .map(|i| {
            let sd = (moments.var[i] * (n - 1) as f64 / n as f64).sqrt();
            x.row(i).map(|v| (v - moments.mean[i]) / sd)
        })
        .collect();
    let mut max_abs = 0.0;
    let mut max_pair = (0, 0);
    let mut correlations = Vec::new();
    for i in 0..p {
        for j in (i + 1)..p {
            let rho = standardized[i].dot(&standardized[j]) / n as f64;
            if rho.abs() > max_abs {
                max_abs = rho.abs();
                max_pair = (i, j);
            }
            correlations.push((i, j, rho));
        }
    }
    let pairs = (p * p.saturating_sub(1) / 2).max(1) as f64;
    let z = standard_normal().inverse_cdf(1.0 - opts.family_alpha / (2.0 * pairs));
    let threshold = (z / ((n as f64) - 3.0).sqrt()).tanh();
    let flagged_pairs = correlations
        .into_iter()
        .filter(|c| c.2.abs() > threshold)
        .collect();

    Ok(IsotropyReport {
        variances: moments.var.clone(),
        variance_cv: var_sd / var_mean,
        max_abs_correlation: max_abs,
        max_pair,
        correlation_threshold: threshold,
        flagged_pairs,
        histogram_overlap: histogram_overlap(x, opts.histogram_bins.max(2)),
    })
}

fn histogram_overlap(x: &DMatrix<f64>, bins: usize) -> f64 {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if hi <= lo {
        return 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let bin_of = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    let n = x.ncols() as f64;
    let per_coord: Vec<Vec<f64>> = x
        .row_iter()
        .map(|row| {
            let mut h = vec![0.0; bins];
            row.iter().for_each(|&v| h[bin_of(v)] += 1.0 / n);
            h
        })
        .collect();
    let d = per_coord.len() as f64;
    let mut pooled = vec![0.0; bins];
    for h in &per_coord {
        for (p, v) in pooled.iter_mut().zip(h) {
            *p += v / d;
        }
    }
    per_coord
        .iter()
        .map(|h| h.iter().zip(&pooled).map(|(a, b)| a.min(*b)).sum::<f64>())
        .sum::<f64>()
        / d
}

/// Tail probabilities used for quantile-spread ratios.
pub const TAIL_PROBABILITIES: [f64; 2] = [0.9, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub coordinate: usize,
    pub n_samples: usize,
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub skewness_se: f64,
    pub kurtosis_se: f64,
    /// `(p, (q(p) − q(1−p)) / (2 z_p sd))`; 1 for a Gaussian.
    pub tail_ratios: Vec<(f64, f64)>,
    /// Skewness or excess kurtosis more than 3 standard errors from 0.
    pub non_gaussian: bool,
}

pub fn gaussianity_check(field: &ResidualField, coordinate: usize) -> Result<GaussianityReport> {
    let (d, n) = field.deltas.shape();
    if coordinate >= d {
        return Err(Error::OutOfRange {
            what: "coordinate",
            value: coordinate as i64,
            valid: format!("0..{}", d),
        });
    }
    if n < MIN_DIAGNOSTIC_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_DIAGNOSTIC_SAMPLES,
            got: n,
        });
    }
    let row: Vec<f64> = field.deltas.row(coordinate).iter().copied().collect();
    let m = row_moments(row.iter(), n);
    if m.m2 <= 0.0 {
        return Err(Error::Degenerate(format!(
            "coordinate {} has zero variance",
            coordinate
        )));
    }
    let skewness = m.m3 / m.m2.powf(1.5);
    let excess_kurtosis = m.m4 / (m.m2 * m.m2) - 3.0;
    let nf = n as f64;
    let skewness_se = (6.0 / nf).sqrt();
    let kurtosis_se = (24.0 / nf).sqrt();
    let sd = (m.m2 * nf / (nf - 1.0)).sqrt();

    let mut sorted = row;
    sorted.sort_by(|a, b| a.total_cmp(b));
    let normal = standard_normal();
    let tail_ratios = TAIL_PROBABILITIES
        .iter()
        .map(|&p| {
            let spread = quantile(&sorted, p) - quantile(&sorted, 1.0 - p);
            (p, spread / (2.0 * normal.inverse_cdf(p) * sd))
        })
        .collect();
    Ok(GaussianityReport {
        coordinate,
        n_samples: n,
        mean: m.mean,
        sd,
        skewness,
        excess_kurtosis,
        skewness_se,
        kurtosis_se,
        tail_ratios,
        non_gaussian: skewness.abs() > 3.0 * skewness_se
            || excess_kurtosis.abs() > 3.0 * kurtosis_se,
    })
}

/// Linear-interpolated empirical quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(deltas: DMatrix<f64>) -> ResidualField {
        ResidualField {
            t: 1,
            tau: 1,
            deltas,
        }
    }

    fn log_var_map(n_layers: usize, f: impl Fn(usize, usize) -> f64) -> MomentMap {
        let mut values = DMatrix::from_element(n_layers + 1, n_layers + 1, f64::NAN);
        for t in 1..n_layers {
            for s in (t + 1)..=n_layers {
                values[(t, s)] = f(t, s);
            }
        }
        MomentMap {
            stat: MomentStat::LogVariance,
            values,
        }
    }

    #[test]
    fn zero_grid_flags_undefined_cells() {
        let cell = CellMoments::from_matrix(1, 2, &DMatrix::zeros(4, 10));
        let maps = moment_maps(&[cell], 3, &MomentOptions::default()).unwrap();
        assert_eq!(maps.mean_abs.get(1, 2), Some(0.0));
        assert_eq!(maps.log_variance.get(1, 2), None);
        assert_eq!(maps.excess_kurtosis_abs.get(1, 2), None);
    }

    #[test]
    fn too_few_samples() {
        let cell = CellMoments::from_matrix(1, 2, &DMatrix::from_element(2, 7, 1.0));
        assert!(matches!(
            moment_maps(&[cell], 3, &MomentOptions::default()),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn moments_of_known_row() {
        // values 1..=4: mean 2.5, unbiased var 5/3, m2 = 1.25, m4 = 2.5625
        let m = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let c = CellMoments::from_matrix(0, 1, &m);
        assert_eq!(c.mean[0], 2.5);
        assert!((c.var[0] - 5.0 / 3.0).abs() < 1e-15);
        assert!((c.excess_kurtosis[0] - (2.5625 / 1.5625 - 3.0)).abs() < 1e-15);
    }

    #[test]
    fn flat_variance_fits_zero_rate() {
        let map = log_var_map(10, |_, _| 2.0f64.ln());
        let fit = fit_variance_law(&map, &FitWindow::default()).unwrap();
        assert!(fit.lambda.abs() < 1e-12);
        assert!((fit.alpha - 2.0).abs() < 1e-12);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn exact_law_is_recovered() {
        let map = log_var_map(24, |_, s| 0.64f64.ln() + 0.18 * s as f64);
        let fit = fit_variance_law(&map, &FitWindow::default()).unwrap();
        assert!((fit.lambda - 0.18).abs() < 1e-12);
        assert!((fit.alpha - 0.64).abs() < 1e-12);
        assert!(fit.fit_window.iter().all(|&(t, s)| t >= 3 && s <= 23));
    }

    #[test]
    fn empty_and_underdetermined_windows() {
        let map = log_var_map(6, |_, s| s as f64);
        let none = FitWindow {
            start_min: 100,
            ..FitWindow::default()
        };
        assert!(matches!(
            fit_variance_law(&map, &none),
            Err(Error::EmptyFitWindow)
        ));
        let narrow = FitWindow {
            start_min: 1,
            start_max: None,
            target_min: Some(5),
            target_max: Some(6),
        };
        assert!(matches!(
            fit_variance_law(&map, &narrow),
            Err(Error::Underdetermined(2))
        ));
    }

    #[test]
    fn diagnostics_need_samples() {
        let f = field(DMatrix::from_fn(3, 20, |i, k| (i + k) as f64));
        assert!(isotropy_report(&f, &IsotropyOptions::default()).is_err());
        assert!(gaussianity_check(&f, 0).is_err());
    }

    #[test]
    fn zero_variance_coordinate_is_degenerate() {
        let f = field(DMatrix::from_fn(
            3,
            40,
            |i, k| if i == 1 { 0.0 } else { k as f64 },
        ));
        assert!(matches!(
            isotropy_report(&f, &IsotropyOptions::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn quantile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile(&v, 0.5), 1.5);
        assert_eq!(quantile(&v, 1.0), 3.0);
    }
}
