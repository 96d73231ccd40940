//! In-memory trajectory ensembles.
//!
//! Positions are held as one `D × N_s` matrix per layer time, with layer 0 the
//! embedding output and layers `1..=T` the post-layer states.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::container::{read_container, write_container, DType, Tensor, TensorData};
use crate::error::{Error, Result};

pub const POSITIONS: &str = "positions";
pub const TOKEN_IDS: &str = "token_ids";
pub const META_LAYERS: &str = "n_layers";
pub const META_HIDDEN: &str = "hidden_dim";
pub const META_SEQUENCES: &str = "n_sequences";

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    layers: Vec<DMatrix<f64>>,
    meta: BTreeMap<String, String>,
}

/// Read-only view of the ensemble at one layer time. Column `k` is sequence `k`.
#[derive(Debug, Clone, Copy)]
pub struct LayerSlice<'a> {
    pub t: usize,
    pub matrix: &'a DMatrix<f64>,
}

impl TrajectoryEnsemble {
    /// Builds an ensemble from per-layer matrices (index 0 = embedding output).
    /// Shape keys in `meta` are overwritten with the actual shape.
    pub fn new(layers: Vec<DMatrix<f64>>, mut meta: BTreeMap<String, String>) -> Result<Self> {
        if layers.len() < 3 {
            return Err(Error::Degenerate(format!(
                "need at least 2 layers plus the embedding state, got {} matrices",
                layers.len()
            )));
        }
        let (d, n) = layers[0].shape();
        if d < 2 || n < 2 {
            return Err(Error::Degenerate(format!(
                "hidden_dim and n_sequences must be >= 2, got {}x{}",
                d, n
            )));
        }
        for (t, m) in layers.iter().enumerate() {
            if m.shape() != (d, n) {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} is {:?}, layer 0 is {:?}",
                    t,
                    m.shape(),
                    (d, n)
                )));
            }
            check_finite(t, m)?;
        }
        meta.insert(META_LAYERS.into(), (layers.len() - 1).to_string());
        meta.insert(META_HIDDEN.into(), d.to_string());
        meta.insert(META_SEQUENCES.into(), n.to_string());
        Ok(Self { layers, meta })
    }

    /// Number of transformer layers `T` (the ensemble holds `T + 1` layer times).
    pub fn n_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn n_sequences(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    pub fn slice(&self, t: usize) -> Result<LayerSlice<'_>> {
        self.layers
            .get(t)
            .map(|matrix| LayerSlice { t, matrix })
            .ok_or(Error::OutOfRange {
                what: "layer time",
                value: t as i64,
                valid: format!("0..={}", self.n_layers()),
            })
    }

    /// Positions at layer `t`. Panics when `t > T`; use [`slice`](Self::slice)
    /// for checked access.
    pub fn positions(&self, t: usize) -> &DMatrix<f64> {
        &self.layers[t]
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    /// Selects sequences by index, in the given order.
    pub fn subsample(&self, indices: &[usize]) -> Result<Self> {
        let n = self.n_sequences();
        let mut seen = HashSet::with_capacity(indices.len());
        for &k in indices {
            if k >= n {
                return Err(Error::OutOfRange {
                    what: "sequence index",
                    value: k as i64,
                    valid: format!("0..{}", n),
                });
            }
            if !seen.insert(k) {
                return Err(Error::DuplicateIndex(k));
            }
        }
        let layers = self
            .layers
            .iter()
            .map(|m| m.select_columns(indices))
            .collect();
        let mut meta = self.meta.clone();
        meta.insert("parent_sha256".into(), self.content_hash());
        Self::new(layers, meta)
    }

    /// SHA-256 over the shape and the little-endian f64 position values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for dim in [self.n_layers() + 1, self.hidden_dim(), self.n_sequences()] {
            h.update((dim as u64).to_le_bytes());
        }
        for m in &self.layers {
            for x in m.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Row-major `[T+1, D, N_s]` tensor in the requested floating dtype.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (d, n) = (self.hidden_dim(), self.n_sequences());
        let shape = vec![self.layers.len(), d, n];
        let row_major = self
            .layers
            .iter()
            .flat_map(|m| (0..d).flat_map(move |i| (0..n).map(move |k| m[(i, k)])));
        match dtype {
            DType::F32 => Tensor::f32(shape, row_major.map(|x| x as f32).collect()),
            DType::F64 => Tensor::f64(shape, row_major.collect()),
            DType::I64 => Err(Error::InvalidConfig(
                "positions must be stored as f32 or f64".into(),
            )),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let tensor = self.to_tensor(dtype)?;
        write_container(path, &self.meta, &[(POSITIONS, &tensor)])?;
        Ok(())
    }

    /// Loads and validates the `positions` tensor of a LOTE ensemble file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = read_container(path)?;
        let meta = reader.metadata().clone();
        let tensor = reader.read(POSITIONS)?;
        Self::from_tensor(&tensor, meta)
    }

    pub fn from_tensor(tensor: &Tensor, meta: BTreeMap<String, String>) -> Result<Self> {
        if tensor.shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                name: POSITIONS.into(),
                detail: format!("expected rank 3 [T+1, D, N_s], got {:?}", tensor.shape),
            });
        }
        let (layers, d, n) = (tensor.shape[0], tensor.shape[1], tensor.shape[2]);
        for (key, actual) in [
            (META_LAYERS, layers.saturating_sub(1)),
            (META_HIDDEN, d),
            (META_SEQUENCES, n),
        ] {
            let declared = meta
                .get(key)
                .ok_or_else(|| Error::InconsistentMetadata(format!("missing key '{}'", key)))?;
            let declared: usize = declared.trim().parse().map_err(|_| {
                Error::InconsistentMetadata(format!("'{}' = {:?} is not an integer", key, declared))
            })?;
            if declared != actual {
                return Err(Error::InconsistentMetadata(format!(
                    "{} = {} but positions tensor implies {}",
                    key, declared, actual
                )));
            }
        }
        let stride = d * n;
        let build = |t: usize| -> DMatrix<f64> {
            match &tensor.data {
                TensorData::F32(v) => {
                    DMatrix::from_fn(d, n, |i, k| v[t * stride + i * n + k] as f64)
                }
                TensorData::F64(v) => DMatrix::from_fn(d, n, |i, k| v[t * stride + i * n + k]),
                TensorData::I64(_) => unreachable!(),
            }
        };
        if tensor.dtype() == DType::I64 {
            return Err(Error::DtypeMismatch {
                name: POSITIONS.into(),
                found: "i64".into(),
                expected: "f32 or f64".into(),
            });
        }
        Self::new((0..layers).map(build).collect(), meta)
    }
}

fn check_finite(t: usize, m: &DMatrix<f64>) -> Result<()> {
    for (k, col) in m.column_iter().enumerate() {
        if col.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                layer: t,
                sequence: k,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(t: usize, d: usize, n: usize) -> TrajectoryEnsemble {
        let layers = (0..=t)
            .map(|l| DMatrix::from_fn(d, n, |i, k| (l * 100 + i * 10 + k) as f64))
            .collect();
        TrajectoryEnsemble::new(layers, BTreeMap::new()).unwrap()
    }

    #[test]
    fn slice_bounds() {
        let e = toy(3, 2, 4);
        assert_eq!(e.slice(0).unwrap().matrix[(1, 2)], 12.0);
        assert_eq!(e.slice(3).unwrap().matrix[(0, 0)], 300.0);
        assert!(matches!(e.slice(4), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn subsample_identity_and_swap() {
        let e = toy(2, 3, 2);
        let same = e.subsample(&[0, 1]).unwrap();
        assert_eq!(same.layers, e.layers);
        assert_eq!(same.meta()["parent_sha256"], e.content_hash());
        let swapped = e.subsample(&[1, 0]).unwrap();
        for t in 0..=2 {
            assert_eq!(swapped.positions(t).column(0), e.positions(t).column(1));
            assert_eq!(swapped.positions(t).column(1), e.positions(t).column(0));
        }
    }

    #[test]
    fn subsample_rejects_bad_indices() {
        let e = toy(2, 2, 3);
        assert!(matches!(
            e.subsample(&[0, 0]),
            Err(Error::DuplicateIndex(0))
        ));
        assert!(matches!(e.subsample(&[3]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn nan_reports_layer_and_sequence() {
        let mut layers: Vec<_> = (0..=4).map(|_| DMatrix::from_element(3, 9, 1.0)).collect();
        layers[3][(1, 7)] = f64::NAN;
        match TrajectoryEnsemble::new(layers, BTreeMap::new()) {
            Err(Error::NonFinite { layer, sequence }) => assert_eq!((layer, sequence), (3, 7)),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn metadata_must_match_shape() {
        let e = toy(2, 2, 12);
        let tensor = e.to_tensor(DType::F32).unwrap();
        let mut meta = e.meta().clone();
        meta.insert(META_SEQUENCES.into(), "10".into());
        assert!(matches!(
            TrajectoryEnsemble::from_tensor(&tensor, meta),
            Err(Error::InconsistentMetadata(_))
        ));
    }

    #[test]
    fn tensor_roundtrip_is_exact_for_f64() {
        let e = toy(3, 4, 5);
        let tensor = e.to_tensor(DType::F64).unwrap();
        let back = TrajectoryEnsemble::from_tensor(&tensor, e.meta().clone()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn too_small_ensembles_are_rejected() {
        let layers = (0..=1).map(|_| DMatrix::from_element(2, 2, 1.0)).collect();
        assert!(TrajectoryEnsemble::new(layers, BTreeMap::new()).is_err());
    }
}
