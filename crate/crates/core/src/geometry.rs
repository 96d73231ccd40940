//! Per-layer singular bases, basis-angle maps and cluster statistics.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, Tensor};
use crate::ensemble::{LayerSlice, TrajectoryEnsemble};
use crate::error::{Error, Result};

/// Relative gap below which two adjacent singular values are flagged.
pub const NEAR_DEGENERATE_RATIO: f64 = 1e-6;
/// Number of leading directions reported by [`cluster_stats`].
pub const CLUSTER_DIRECTIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// Each column's largest-magnitude entry (first one on ties) is made non-negative.
    LargestAbsNonNegative,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisOptions {
    /// Subtract the per-coordinate ensemble mean before decomposing.
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBasis {
    pub t: usize,
    /// `D × D`, columns `u_i(t)` in descending singular-value order.
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub sign_convention: SignConvention,
    /// Indices `>= null_from` are an arbitrary orthonormal completion (`N_s < D`).
    pub null_from: usize,
    /// Indices whose singular value is within [`NEAR_DEGENERATE_RATIO`] of a neighbour.
    pub near_degenerate: Vec<usize>,
    pub centered: bool,
}

impl LayerBasis {
    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_null_completed(&self, i: usize) -> bool {
        i >= self.null_from
    }
}

/// Makes the largest-|entry| of every column non-negative. Returns which
/// columns were flipped.
pub fn fix_signs(u: &mut DMatrix<f64>) -> Vec<bool> {
    let mut flipped = Vec::with_capacity(u.ncols());
    for mut col in u.column_iter_mut() {
        let mut best = 0usize;
        for (r, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = r;
            }
        }
        let flip = col[best] < 0.0;
        if flip {
            col.neg_mut();
        }
        flipped.push(flip);
    }
    flipped
}

/// Full SVD of the (optionally centered) `D × N_s` slice.
pub fn compute_basis(slice: LayerSlice<'_>, opts: BasisOptions) -> Result<LayerBasis> {
    decompose(slice, opts, false).map(|(b, _)| b)
}

/// As [`compute_basis`], also returning `Vᵀ` (`r × N_s`, `r = min(D, N_s)`)
/// with signs consistent with the fixed `U`, so that
/// `U[:, ..r] · diag(σ[..r]) · Vᵀ` reconstructs the decomposed matrix.
pub fn compute_basis_with_vt(
    slice: LayerSlice<'_>,
    opts: BasisOptions,
) -> Result<(LayerBasis, DMatrix<f64>)> {
    decompose(slice, opts, true).map(|(b, vt)| (b, vt.unwrap()))
}

fn decompose(
    slice: LayerSlice<'_>,
    opts: BasisOptions,
    want_vt: bool,
) -> Result<(LayerBasis, Option<DMatrix<f64>>)> {
    let (d, n) = slice.matrix.shape();
    let mut m = slice.matrix.clone();
    if opts.center {
        for mut row in m.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
    }
    if m.iter().all(|&x| x == 0.0) {
        return Err(Error::Degenerate(format!(
            "layer {} matrix is all zeros",
            slice.t
        )));
    }
    if n < d {
        log::warn!(
            "layer {}: N_s = {} < D = {}; trailing {} directions are null-completed",
            slice.t,
            n,
            d,
            d - n
        );
    }
    let rank_cap = d.min(n);
    let svd = m
        .try_svd(true, want_vt, f64::EPSILON, 200 * rank_cap.max(10))
        .ok_or(Error::SvdNonConvergence(slice.t))?;
    let thin_u = svd.u.expect("requested U");
    let mut vt = svd.v_t;

    let mut u = complete_orthonormal(thin_u, d);
    let mut sigma = DVector::zeros(d);
    sigma.rows_mut(0, rank_cap).copy_from(&svd.singular_values);

    let flipped = fix_signs(&mut u);
    if let Some(vt) = vt.as_mut() {
        for (i, &f) in flipped.iter().take(rank_cap).enumerate() {
            if f {
                vt.row_mut(i).neg_mut();
            }
        }
    }

    let mut near_degenerate = Vec::new();
    for i in 0..rank_cap.saturating_sub(1) {
        let (a, b) = (sigma[i], sigma[i + 1]);
        if a > 0.0 && b > 0.0 && (a - b) <= NEAR_DEGENERATE_RATIO * a {
            if near_degenerate.last() != Some(&i) {
                near_degenerate.push(i);
            }
            near_degenerate.push(i + 1);
        }
    }

    Ok((
        LayerBasis {
            t: slice.t,
            u,
            sigma,
            sign_convention: SignConvention::LargestAbsNonNegative,
            null_from: rank_cap,
            near_degenerate,
            centered: opts.center,
        },
        vt,
    ))
}

/// Extends `D × r` orthonormal columns to a `D × D` orthogonal matrix by
/// Gram–Schmidt (twice) against the Cartesian axes, taken in order.
fn complete_orthonormal(thin: DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let r = thin.ncols();
    if r == d {
        return thin;
    }
    let mut u = DMatrix::zeros(d, d);
    u.columns_mut(0, r).copy_from(&thin);
    let mut filled = r;
    for axis in 0..d {
        if filled == d {
            break;
        }
        let mut v = DVector::zeros(d);
        v[axis] = 1.0;
        for _ in 0..2 {
            let basis = u.columns(0, filled);
            let coeffs = basis.tr_mul(&v);
            v -= basis * coeffs;
        }
        let norm = v.norm();
        if norm > 0.5 {
            u.column_mut(filled).copy_from(&(v / norm));
            filled += 1;
        }
    }
    debug_assert_eq!(filled, d);
    u
}

/// Bases for every layer time `0..=T`. Each SVD is independent, so the
/// parallel result equals the sequential one.
pub fn compute_bases(ensemble: &TrajectoryEnsemble, opts: BasisOptions) -> Result<Vec<LayerBasis>> {
    (0..=ensemble.n_layers())
        .into_par_iter()
        .map(|t| compute_basis(ensemble.slice(t)?, opts))
        .collect()
}

/// Looks up the basis for layer time `t`.
pub fn basis_at(bases: &[LayerBasis], t: usize) -> Result<&LayerBasis> {
    bases
        .get(t)
        .filter(|b| b.t == t)
        .or_else(|| bases.iter().find(|b| b.t == t))
        .ok_or(Error::OutOfRange {
            what: "basis layer",
            value: t as i64,
            valid: format!("{:?}", bases.iter().map(|b| b.t).collect::<Vec<_>>()),
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisAngleMap {
    pub i: usize,
    pub layers: Vec<usize>,
    /// `angles[(a, b)] = arccos(u_i(layers[a]) · u_i(layers[b]))`, radians.
    pub angles: DMatrix<f64>,
}

pub fn basis_angles(bases: &[LayerBasis], i: usize) -> Result<BasisAngleMap> {
    let d = bases
        .first()
        .ok_or_else(|| Error::Degenerate("no bases given".into()))?
        .dim();
    if let Some(b) = bases.iter().find(|b| b.dim() != d) {
        return Err(Error::DimensionMismatch(format!(
            "basis at layer {} has D = {}, expected {}",
            b.t,
            b.dim(),
            d
        )));
    }
    if i >= d {
        return Err(Error::OutOfRange {
            what: "singular-vector index",
            value: i as i64,
            valid: format!("0..{}", d),
        });
    }
    let n = bases.len();
    let mut angles = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let dot = bases[a].u.column(i).dot(&bases[b].u.column(i));
            let angle = dot.clamp(-1.0, 1.0).acos();
            angles[(a, b)] = angle;
            angles[(b, a)] = angle;
        }
    }
    Ok(BasisAngleMap {
        i,
        layers: bases.iter().map(|b| b.t).collect(),
        angles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub t: usize,
    pub mean_along_u1: f64,
    pub sd_along_u1: f64,
    /// `|mean| / sd` of the projections onto `u_1 … u_8`.
    pub displacement_over_spread: Vec<f64>,
}

/// Projection statistics of each layer's positions onto its own leading
/// singular directions.
pub fn cluster_stats(
    ensemble: &TrajectoryEnsemble,
    bases: &[LayerBasis],
) -> Result<Vec<ClusterRecord>> {
    let n = ensemble.n_sequences();
    let k = CLUSTER_DIRECTIONS.min(ensemble.hidden_dim());
    (0..=ensemble.n_layers())
        .map(|t| {
            let basis = basis_at(bases, t)?;
            if basis.dim() != ensemble.hidden_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "basis D = {}, ensemble D = {}",
                    basis.dim(),
                    ensemble.hidden_dim()
                )));
            }
            let proj = basis.u.columns(0, k).transpose() * ensemble.positions(t);
            let mut ratios = Vec::with_capacity(k);
            let mut first = (0.0, 0.0);
            for (i, row) in proj.row_iter().enumerate() {
                let mean = row.sum() / n as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let sd = var.sqrt();
                if sd == 0.0 {
                    return Err(Error::Degenerate(format!(
                        "zero spread along u_{} at layer {}",
                        i + 1,
                        t
                    )));
                }
                if i == 0 {
                    first = (mean, sd);
                }
                ratios.push(mean.abs() / sd);
            }
            Ok(ClusterRecord {
                t,
                mean_along_u1: first.0,
                sd_along_u1: first.1,
                displacement_over_spread: ratios,
            })
        })
        .collect()
}

/// Writes `U` `[T+1, D, D]` and `sigma` `[T+1, D]` (f64) plus per-layer
/// bookkeeping in the metadata.
pub fn save_bases(
    path: impl AsRef<Path>,
    bases: &[LayerBasis],
    extra_meta: &BTreeMap<String, String>,
) -> Result<()> {
    let d = bases
        .first()
        .ok_or_else(|| Error::Degenerate("no bases to save".into()))?
        .dim();
    for (t, b) in bases.iter().enumerate() {
        if b.t != t || b.dim() != d {
            return Err(Error::InconsistentMetadata(format!(
                "bases must cover layers 0..=T in order with equal D; entry {} is layer {} (D = {})",
                t,
                b.t,
                b.dim()
            )));
        }
    }
    let u_data: Vec<f64> = bases
        .iter()
        .flat_map(|b| (0..d).flat_map(move |r| (0..d).map(move |c| b.u[(r, c)])))
        .collect();
    let s_data: Vec<f64> = bases.iter().flat_map(|b| b.sigma.iter().copied()).collect();
    let u = Tensor::f64(vec![bases.len(), d, d], u_data)?;
    let s = Tensor::f64(vec![bases.len(), d], s_data)?;

    let mut meta = extra_meta.clone();
    meta.insert("sign_convention".into(), "largest_abs_non_negative".into());
    meta.insert("centered".into(), bases[0].centered.to_string());
    meta.insert(
        "null_from".into(),
        serde_json::to_string(&bases.iter().map(|b| b.null_from).collect::<Vec<_>>()).unwrap(),
    );
    meta.insert(
        "near_degenerate".into(),
        serde_json::to_string(&bases.iter().map(|b| &b.near_degenerate).collect::<Vec<_>>())
            .unwrap(),
    );
    meta.insert("n_layers".into(), (bases.len() - 1).to_string());
    meta.insert("hidden_dim".into(), d.to_string());
    write_container(path, &meta, &[("U", &u), ("sigma", &s)])?;
    Ok(())
}

pub fn load_bases(path: impl AsRef<Path>) -> Result<Vec<LayerBasis>> {
    let reader = read_container(path)?;
    let u = reader.read("U")?;
    let s = reader.read("sigma")?;
    if u.shape.len() != 3 || u.shape[1] != u.shape[2] || s.shape != u.shape[..2] {
        return Err(Error::ShapeMismatch {
            name: "U".into(),
            detail: format!("U {:?} and sigma {:?} are inconsistent", u.shape, s.shape),
        });
    }
    let (layers, d) = (u.shape[0], u.shape[1]);
    let (u, s) = (u.to_f64(), s.to_f64());
    let meta = reader.metadata();
    let parse_list = |key: &str| -> Result<Option<serde_json::Value>> {
        meta.get(key)
            .map(|v| {
                serde_json::from_str(v).map_err(|e| Error::InconsistentMetadata(e.to_string()))
            })
            .transpose()
    };
    let null_from: Option<Vec<usize>> = parse_list("null_from")?
        .map(|v| serde_json::from_value(v).map_err(|e| Error::InconsistentMetadata(e.to_string())))
        .transpose()?;
    let near: Option<Vec<Vec<usize>>> = parse_list("near_degenerate")?
        .map(|v| serde_json::from_value(v).map_err(|e| Error::InconsistentMetadata(e.to_string())))
        .transpose()?;
    let centered = meta.get("centered").map(|v| v == "true").unwrap_or(false);
    Ok((0..layers)
        .map(|t| LayerBasis {
            t,
            u: DMatrix::from_fn(d, d, |r, c| u[t * d * d + r * d + c]),
            sigma: DVector::from_fn(d, |i, _| s[t * d + i]),
            sign_convention: SignConvention::LargestAbsNonNegative,
            null_from: null_from
                .as_ref()
                .and_then(|v| v.get(t).copied())
                .unwrap_or(d),
            near_degenerate: near
                .as_ref()
                .and_then(|v| v.get(t).cloned())
                .unwrap_or_default(),
            centered,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(m: &DMatrix<f64>) -> LayerSlice<'_> {
        LayerSlice { t: 0, matrix: m }
    }

    #[test]
    fn identity_matrix() {
        let m = DMatrix::<f64>::identity(5, 5);
        let b = compute_basis(slice(&m), BasisOptions::default()).unwrap();
        assert!((&b.u - DMatrix::identity(5, 5)).norm() < 1e-12);
        assert!(b.sigma.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        // all equal: every index is near-degenerate
        assert_eq!(b.near_degenerate, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let m = DMatrix::<f64>::zeros(3, 4);
        assert!(matches!(
            compute_basis(slice(&m), BasisOptions::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn sign_fix_is_idempotent() {
        let mut u = DMatrix::from_row_slice(3, 2, &[0.1, -0.9, -0.8, 0.2, 0.3, 0.1]);
        let first = fix_signs(&mut u);
        assert_eq!(first, vec![true, true]);
        let once = u.clone();
        assert_eq!(fix_signs(&mut u), vec![false, false]);
        assert_eq!(u, once);
    }

    #[test]
    fn wide_deficit_is_null_completed() {
        let m = DMatrix::from_fn(6, 3, |i, k| {
            ((i + 1) * (k + 2)) as f64 + (i * k) as f64 * 0.5
        });
        let b = compute_basis(slice(&m), BasisOptions::default()).unwrap();
        assert_eq!(b.null_from, 3);
        assert!(b.is_null_completed(4));
        assert_eq!(b.sigma[5], 0.0);
        let gram = b.u.transpose() * &b.u;
        assert!((gram - DMatrix::identity(6, 6)).norm() < 1e-12);
    }

    #[test]
    fn centering_removes_mean_direction() {
        let m = DMatrix::from_fn(2, 4, |i, k| if i == 0 { 100.0 } else { k as f64 });
        let raw = compute_basis(slice(&m), BasisOptions { center: false }).unwrap();
        let centered = compute_basis(slice(&m), BasisOptions { center: true }).unwrap();
        assert!(raw.u[(0, 0)].abs() > 0.99);
        assert!(centered.u[(1, 0)].abs() > 0.99);
        assert!(centered.centered);
    }

    #[test]
    fn angles_of_identical_bases_are_zero() {
        let m = DMatrix::from_fn(4, 10, |i, k| ((i * 7 + k * 3) % 5) as f64 + i as f64);
        let b = compute_basis(slice(&m), BasisOptions::default()).unwrap();
        let map = basis_angles(&[b.clone(), b], 0).unwrap();
        assert_eq!(map.angles, DMatrix::zeros(2, 2));
    }

    #[test]
    fn angle_index_out_of_range() {
        let m = DMatrix::<f64>::identity(3, 3);
        let b = compute_basis(slice(&m), BasisOptions::default()).unwrap();
        assert!(matches!(
            basis_angles(&[b], 3),
            Err(Error::OutOfRange { .. })
        ));
    }
}
