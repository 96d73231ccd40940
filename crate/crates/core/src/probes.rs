//! Dimensionality and separability probes.
//!
//! The KL probe compares next-token distributions produced from truncated
//! hidden states against the untruncated ones. The separability probe trains a
//! perceptron per layer to tell two ensembles apart.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, Tensor};
use crate::ensemble::{TrajectoryEnsemble, META_HIDDEN};
use crate::error::{Error, Result};

pub const LOGITS_TRUE: &str = "logits_true";
pub const LOGITS_TRUNCATED_PREFIX: &str = "logits_truncated_K";
/// Allowed deviation of a probability vector's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-4;
pub const PERCEPTRON_EPOCHS: usize = 100;
pub const MIN_PROBE_SAMPLES: usize = 100;
pub const MAX_IMBALANCE: f64 = 10.0;

/// Entry name holding logits from hidden states truncated to rank `k`.
pub fn truncated_logits_name(k: usize) -> String {
    format!("{}{}", LOGITS_TRUNCATED_PREFIX, k)
}

fn check_lengths(p: usize, q: usize) -> Result<()> {
    if p != q || p == 0 {
        return Err(Error::DimensionMismatch(format!(
            "distributions have lengths {} and {}",
            p, q
        )));
    }
    Ok(())
}

fn check_probabilities(v: &[f64], which: &str) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{} has entry {}",
            which, x
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!(
            "{} sums to {}",
            which, sum
        )));
    }
    Ok(())
}

/// `Σ p_i (ln p_i − ln q_i)` with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p.len(), q.len())?;
    check_probabilities(p, "p")?;
    check_probabilities(q, "q")?;
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InvalidDistribution(format!(
                "q[{}] = 0 where p[{}] = {}",
                i, i, pi
            )));
        }
        total += pi * (pi.ln() - qi.ln());
    }
    Ok(total.max(0.0))
}

/// Log-softmax via the max-shifted log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidDistribution("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|x| x - lse).collect())
}

/// KL divergence between the softmax distributions of two logit vectors.
pub fn kl_from_logits(logits_p: &[f64], logits_q: &[f64]) -> Result<f64> {
    check_lengths(logits_p.len(), logits_q.len())?;
    let lp = log_softmax(logits_p)?;
    let lq = log_softmax(logits_q)?;
    let total: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(total.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlCurve {
    pub k_values: Vec<usize>,
    pub mean_kl: Vec<f64>,
    /// Mean KL between the true distributions of sequences `i` and `i+1 mod N_s`.
    pub baseline_kl: f64,
}

/// Default truncation ranks: powers of two below `d`, then `d`.
pub fn default_k_grid(d: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..usize::BITS)
        .map(|p| 1usize << p)
        .take_while(|&k| k < d)
        .collect();
    ks.push(d);
    ks
}

fn logit_rows(tensor: &Tensor, name: &str) -> Result<DMatrix<f64>> {
    if tensor.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            name: name.into(),
            detail: format!("expected [N_s, vocab], got {:?}", tensor.shape),
        });
    }
    let (n, v) = (tensor.shape[0], tensor.shape[1]);
    let data = tensor.to_f64();
    // Stored row-major; column k of the result is sequence k.
    Ok(DMatrix::from_column_slice(v, n, &data))
}

fn mean_pairwise_kl(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let kls = (0..p.ncols())
        .into_par_iter()
        .map(|k| kl_from_logits(p.column(k).as_slice(), q.column(k).as_slice()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(kls.iter().sum::<f64>() / kls.len() as f64)
}

/// Mean KL of each truncated distribution against the true one.
pub fn kl_curve(
    truncated: &BTreeMap<usize, Tensor>,
    true_logits: &Tensor,
    hidden_dim: usize,
) -> Result<KlCurve> {
    let truth = logit_rows(true_logits, LOGITS_TRUE)?;
    if truth.ncols() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: truth.ncols(),
        });
    }
    let mut k_values = Vec::with_capacity(truncated.len());
    let mut mean_kl = Vec::with_capacity(truncated.len());
    for (&k, tensor) in truncated {
        if k == 0 || k > hidden_dim {
            return Err(Error::OutOfRange {
                what: "truncation rank K",
                value: k as i64,
                valid: format!("1..={}", hidden_dim),
            });
        }
        let name = truncated_logits_name(k);
        let rows = logit_rows(tensor, &name)?;
        if rows.shape() != truth.shape() {
            return Err(Error::ShapeMismatch {
                name,
                detail: format!(
                    "shape [{}, {}] differs from {} [{}, {}]",
                    rows.ncols(),
                    rows.nrows(),
                    LOGITS_TRUE,
                    truth.ncols(),
                    truth.nrows()
                ),
            });
        }
        k_values.push(k);
        mean_kl.push(mean_pairwise_kl(&rows, &truth)?);
    }
    let n = truth.ncols();
    let shifted = DMatrix::from_fn(truth.nrows(), n, |i, k| truth[(i, (k + 1) % n)]);
    let baseline_kl = mean_pairwise_kl(&truth, &shifted)?;
    Ok(KlCurve {
        k_values,
        mean_kl,
        baseline_kl,
    })
}

/// Reads `logits_true` and every `logits_truncated_K{K}` entry of a LOTE file.
/// `hidden_dim` falls back to the file's `hidden_dim` metadata.
pub fn kl_curve_from_file(path: impl AsRef<Path>, hidden_dim: Option<usize>) -> Result<KlCurve> {
    let reader = read_container(path)?;
    let d = match hidden_dim {
        Some(d) => d,
        None => reader
            .metadata()
            .get(META_HIDDEN)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| {
                Error::InconsistentMetadata(format!(
                    "'{}' missing; pass the hidden dimension explicitly",
                    META_HIDDEN
                ))
            })?,
    };
    let truth = reader.read(LOGITS_TRUE)?;
    let mut truncated = BTreeMap::new();
    for entry in &reader.manifest().entries {
        if let Some(k) = entry.name.strip_prefix(LOGITS_TRUNCATED_PREFIX) {
            let k: usize = k.parse().map_err(|_| {
                Error::MalformedManifest(format!("entry '{}' has a non-integer rank", entry.name))
            })?;
            truncated.insert(k, reader.read(&entry.name)?);
        }
    }
    kl_curve(&truncated, &truth, d)
}

/// Train/test partition of the sequence indices of two classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSplit {
    pub train_a: Vec<usize>,
    pub test_a: Vec<usize>,
    pub train_b: Vec<usize>,
    pub test_b: Vec<usize>,
}

impl ProbeSplit {
    pub fn new(n_a: usize, n_b: usize, split_ratio: f64, seed: u64) -> Result<Self> {
        if !(split_ratio > 0.0 && split_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split ratio must lie in (0, 1), got {}",
                split_ratio
            )));
        }
        for n in [n_a, n_b] {
            if n < MIN_PROBE_SAMPLES {
                return Err(Error::TooFewSamples {
                    needed: MIN_PROBE_SAMPLES,
                    got: n,
                });
            }
        }
        let ratio = n_a.max(n_b) as f64 / n_a.min(n_b) as f64;
        if ratio > MAX_IMBALANCE {
            return Err(Error::ClassImbalance(ratio));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut part = |n: usize| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let cut = ((n as f64) * split_ratio).round() as usize;
            let test = idx.split_off(cut.clamp(1, n - 1));
            (idx, test)
        };
        let (train_a, test_a) = part(n_a);
        let (train_b, test_b) = part(n_b);
        Ok(Self {
            train_a,
            test_a,
            train_b,
            test_b,
        })
    }

    pub fn n_test(&self) -> usize {
        self.test_a.len() + self.test_b.len()
    }
}

/// Linear classifier `score = w·z + b` on standardized inputs `z`; a positive
/// score predicts class b, anything else class a.
#[derive(Debug, Clone, PartialEq)]
pub struct Perceptron {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
    pub weights: DVector<f64>,
    pub bias: f64,
    pub epochs: usize,
}

impl Perceptron {
    pub fn predicts_b(&self, x: &DVector<f64>) -> bool {
        let z = (x - &self.mean).component_div(&self.scale);
        self.weights.dot(&z) + self.bias > 0.0
    }
}

/// Online mistake-driven training with seeded per-epoch shuffles; stops after
/// an epoch without mistakes or after [`PERCEPTRON_EPOCHS`].
pub fn train_perceptron(a: &DMatrix<f64>, b: &DMatrix<f64>, seed: u64) -> Result<Perceptron> {
    let d = a.nrows();
    if b.nrows() != d {
        return Err(Error::DimensionMismatch(format!(
            "classes have dimensions {} and {}",
            d,
            b.nrows()
        )));
    }
    let n = a.ncols() + b.ncols();
    let column = |k: usize| {
        if k < a.ncols() {
            a.column(k)
        } else {
            b.column(k - a.ncols())
        }
    };
    let mut mean = DVector::zeros(d);
    for k in 0..n {
        mean += column(k);
    }
    mean /= n as f64;
    let mut scale = DVector::zeros(d);
    for k in 0..n {
        scale += (column(k) - &mean).map(|v| v * v);
    }
    let scale = scale.map(|v| {
        let sd = (v / n as f64).sqrt();
        if sd > 0.0 {
            sd
        } else {
            1.0
        }
    });
    let samples: Vec<(DVector<f64>, f64)> = (0..n)
        .map(|k| {
            let label = if k < a.ncols() { -1.0 } else { 1.0 };
            ((column(k) - &mean).component_div(&scale), label)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut weights = DVector::zeros(d);
    let mut bias = 0.0;
    let mut epochs = 0;
    while epochs < PERCEPTRON_EPOCHS {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut mistakes = 0;
        for &k in &order {
            let (z, y) = &samples[k];
            let predicted = if weights.dot(z) + bias > 0.0 {
                1.0
            } else {
                -1.0
            };
            if predicted != *y {
                weights.axpy(*y, z, 1.0);
                bias += y;
                mistakes += 1;
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    Ok(Perceptron {
        mean,
        scale,
        weights,
        bias,
        epochs,
    })
}

/// Held-out accuracy of a perceptron trained on layer-`t` positions.
pub fn train_linear_probe(
    a: &TrajectoryEnsemble,
    b: &TrajectoryEnsemble,
    t: usize,
    split: &ProbeSplit,
    seed: u64,
) -> Result<f64> {
    if a.hidden_dim() != b.hidden_dim() {
        return Err(Error::DimensionMismatch(format!(
            "ensembles have D = {} and {}",
            a.hidden_dim(),
            b.hidden_dim()
        )));
    }
    let (xa, xb) = (a.slice(t)?.matrix, b.slice(t)?.matrix);
    if split.train_a.len() + split.test_a.len() != xa.ncols()
        || split.train_b.len() + split.test_b.len() != xb.ncols()
    {
        return Err(Error::DimensionMismatch(
            "split does not match ensemble sizes".into(),
        ));
    }
    let model = train_perceptron(
        &xa.select_columns(&split.train_a),
        &xb.select_columns(&split.train_b),
        seed,
    )?;
    let correct_a = split
        .test_a
        .iter()
        .filter(|&&k| !model.predicts_b(&xa.column(k).into_owned()))
        .count();
    let correct_b = split
        .test_b
        .iter()
        .filter(|&&k| model.predicts_b(&xb.column(k).into_owned()))
        .count();
    Ok((correct_a + correct_b) as f64 / split.n_test() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub layers: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub split_ratio: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Probe accuracy at every layer `1..=T`, sharing one split across layers.
pub fn separability_sweep(
    a: &TrajectoryEnsemble,
    b: &TrajectoryEnsemble,
    split_ratio: f64,
    seed: u64,
) -> Result<SeparabilityReport> {
    if a.n_layers() != b.n_layers() {
        return Err(Error::DimensionMismatch(format!(
            "ensembles have {} and {} layers",
            a.n_layers(),
            b.n_layers()
        )));
    }
    let split = ProbeSplit::new(a.n_sequences(), b.n_sequences(), split_ratio, seed)?;
    let layers: Vec<usize> = (1..=a.n_layers()).collect();
    let accuracies = layers
        .par_iter()
        .map(|&t| train_linear_probe(a, b, t, &split, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparabilityReport {
        layers,
        accuracies,
        split_ratio,
        seed,
        n_train: split.train_a.len() + split.train_b.len(),
        n_test: split.n_test(),
    })
}
