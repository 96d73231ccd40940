//! Euler–Maruyama integration of the linear Langevin dynamics
//! `dx = A(t) x dt + √(αλ e^{λt}) dW` with `A = U̇Uᵀ + U Ṡ Uᵀ`, and a
//! deterministic moment oracle for the same equation.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{write_container, Tensor};
use crate::ensemble::{TrajectoryEnsemble, META_HIDDEN, META_LAYERS, META_SEQUENCES, POSITIONS};
use crate::error::{Error, Result};
use crate::geometry::LayerBasis;
use crate::manifold::{OrthogonalPath, Side, SpectrumPath};
use crate::stats::{histogram_overlap_2d, ks_two_sample};

/// Replica columns advanced together; fixed so results do not depend on the thread count.
const BLOCK: usize = 64;
/// Subspace used when none is configured and `D` is at least [`LARGE_DIM`].
pub const DEFAULT_SUBSPACE: usize = 256;
pub const LARGE_DIM: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdeConfig {
    pub step_size: f64,
    pub noise_alpha: f64,
    pub noise_lambda: f64,
    pub seed: u64,
    pub n_replicas_per_start: usize,
    pub subspace_k: Option<usize>,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            noise_alpha: 0.0,
            noise_lambda: 0.0,
            seed: 0,
            n_replicas_per_start: 10,
            subspace_k: None,
        }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= 0.5) {
            return Err(Error::InvalidConfig(format!(
                "step_size must lie in (0, 0.5], got {}",
                self.step_size
            )));
        }
        if self.n_replicas_per_start == 0 {
            return Err(Error::InvalidConfig(
                "n_replicas_per_start must be >= 1".into(),
            ));
        }
        if !self.noise_alpha.is_finite() || !self.noise_lambda.is_finite() {
            return Err(Error::InvalidConfig(
                "noise parameters must be finite".into(),
            ));
        }
        if self.noise_alpha < 0.0 || self.noise_alpha * self.noise_lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "diffusion rate αλ must be non-negative (α = {}, λ = {})",
                self.noise_alpha, self.noise_lambda
            )));
        }
        Ok(())
    }

    /// Variance growth rate `αλ e^{λt}`.
    pub fn diffusion_rate(&self, t: f64) -> f64 {
        self.noise_alpha * self.noise_lambda * (self.noise_lambda * t).exp()
    }

    pub fn resolved_subspace(&self, d: usize) -> usize {
        match self.subspace_k {
            Some(k) => k.min(d),
            None if d >= LARGE_DIM => DEFAULT_SUBSPACE,
            None => d,
        }
    }
}

/// Time-dependent drift matrix `A(t)` of a linear SDE.
pub trait LinearDrift: Sync {
    fn dim(&self) -> usize;
    fn domain(&self) -> (f64, f64);
    /// Times where `A` may be discontinuous; integration steps never straddle them.
    fn breakpoints(&self) -> Vec<f64>;
    /// `A(t)`, taken from the interval on `side` when `t` is a breakpoint.
    fn matrix(&self, t: f64, side: Side) -> Result<DMatrix<f64>>;
}

/// Drift built from an interpolated frame and spectrum.
#[derive(Debug, Clone)]
pub struct PathDrift {
    pub frame: OrthogonalPath,
    pub spectrum: SpectrumPath,
}

impl PathDrift {
    pub fn new(frame: OrthogonalPath, spectrum: SpectrumPath) -> Result<Self> {
        if frame.dim() != spectrum.dim() {
            return Err(Error::DimensionMismatch(format!(
                "frame dimension {} but spectrum has {} values",
                frame.dim(),
                spectrum.dim()
            )));
        }
        Ok(Self { frame, spectrum })
    }
}

impl LinearDrift for PathDrift {
    fn dim(&self) -> usize {
        self.frame.dim()
    }

    fn domain(&self) -> (f64, f64) {
        let (a, b) = self.frame.domain();
        let (c, d) = self.spectrum.domain();
        (a.max(c), b.min(d))
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.frame.times().to_vec()
    }

    fn matrix(&self, t: f64, side: Side) -> Result<DMatrix<f64>> {
        let (u, _) = self.frame.interpolate_on(t, side)?;
        let mut inner = self.frame.velocity_generator(t, side)?;
        let (_, logd) = self.spectrum.interpolate(t)?;
        for i in 0..logd.len() {
            inner[(i, i)] += logd[i];
        }
        Ok(&u * inner * u.transpose())
    }
}

/// Time-independent drift over a fixed domain.
#[derive(Debug, Clone)]
pub struct ConstantDrift {
    pub a: DMatrix<f64>,
    pub domain: (f64, f64),
}

impl LinearDrift for ConstantDrift {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn domain(&self) -> (f64, f64) {
        self.domain
    }

    fn breakpoints(&self) -> Vec<f64> {
        vec![self.domain.0, self.domain.1]
    }

    fn matrix(&self, t: f64, _side: Side) -> Result<DMatrix<f64>> {
        let (min, max) = self.domain;
        if !(t >= min && t <= max) {
            return Err(Error::OutsideDomain { t, min, max });
        }
        Ok(self.a.clone())
    }
}

/// `(U̇Uᵀ + U Ṡ Uᵀ) x` evaluated as a chain of matrix-vector products.
pub fn drift(
    u: &DMatrix<f64>,
    u_dot: &DMatrix<f64>,
    spectrum_logderiv: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = x.len();
    if u.shape() != (d, d) || u_dot.shape() != (d, d) || spectrum_logderiv.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "drift needs {}x{} frames and {} log-derivatives",
            d, d, d
        )));
    }
    let coords = u.tr_mul(x);
    Ok(u_dot * &coords + u * coords.component_mul(spectrum_logderiv))
}

/// Step boundaries from `t0` to `t1`: every breakpoint and saved time is a boundary.
fn timeline(t0: f64, t1: f64, breakpoints: &[f64]) -> Vec<f64> {
    let mut cuts: Vec<f64> = vec![t0, t1];
    let first = t0.floor() as i64 + 1;
    let last = t1.ceil() as i64 - 1;
    cuts.extend(
        (first..=last)
            .map(|k| k as f64)
            .filter(|&k| k > t0 && k < t1),
    );
    cuts.extend(breakpoints.iter().copied().filter(|&b| b > t0 && b < t1));
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    cuts
}

/// Times saved by the integrator: `t0`, every integer strictly inside, and `t1`.
pub fn saved_times(t0: f64, t1: f64) -> Vec<f64> {
    timeline(t0, t1, &[])
}

fn steps_between(a: f64, b: f64, dt: f64) -> usize {
    (((b - a) / dt) - 1e-9).ceil().max(1.0) as usize
}

fn check_interval(drift: &dyn LinearDrift, t0: f64, t1: f64) -> Result<()> {
    let (min, max) = drift.domain();
    if !(t0 < t1) {
        return Err(Error::InvalidConfig(format!(
            "need t0 < t1, got {} and {}",
            t0, t1
        )));
    }
    for t in [t0, t1] {
        if !(t >= min && t <= max) {
            return Err(Error::OutsideDomain { t, min, max });
        }
    }
    Ok(())
}

/// Simulated ensemble at the saved times.
#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub config: SdeConfig,
    pub start_layer: f64,
    pub end_layer: f64,
    pub saved_times: Vec<f64>,
    /// One `D_eff × (n_starts · n_replicas)` matrix per saved time; column
    /// `s · n_replicas + r` is replica `r` of start `s`.
    pub states: Vec<DMatrix<f64>>,
    /// `D × D_eff` orthonormal basis of the simulation subspace; `None` when
    /// the simulation runs in Cartesian coordinates.
    pub subspace: Option<DMatrix<f64>>,
}

impl SimulationRun {
    pub fn n_trajectories(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn effective_dim(&self) -> usize {
        self.states[0].nrows()
    }

    /// States at saved time `k` in Cartesian coordinates.
    pub fn cartesian(&self, k: usize) -> DMatrix<f64> {
        match &self.subspace {
            Some(b) => b * &self.states[k],
            None => self.states[k].clone(),
        }
    }

    /// Row-major `[n_trajectories, D_eff, n_saved_times]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let (d, n, s) = (
            self.effective_dim(),
            self.n_trajectories(),
            self.saved_times.len(),
        );
        let mut data = Vec::with_capacity(n * d * s);
        for c in 0..n {
            for i in 0..d {
                for st in &self.states {
                    data.push(st[(i, c)]);
                }
            }
        }
        Tensor::f64(vec![n, d, s], data)
    }

    /// Simulated positions as an ensemble whose layer `k` is saved time `k`.
    pub fn to_ensemble(&self) -> Result<TrajectoryEnsemble> {
        let layers = (0..self.states.len()).map(|k| self.cartesian(k)).collect();
        TrajectoryEnsemble::new(layers, self.metadata())
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("source".into(), "langevin_simulation".into());
        meta.insert(
            "saved_times".into(),
            serde_json::to_string(&self.saved_times).expect("serializable"),
        );
        meta.insert(
            "sde_config".into(),
            serde_json::to_string(&self.config).expect("serializable"),
        );
        meta
    }

    /// Writes Cartesian positions `[n_saved, D, N]` as a LOTE ensemble file;
    /// layer index `k` corresponds to `saved_times[k]`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let layers: Vec<_> = (0..self.states.len()).map(|k| self.cartesian(k)).collect();
        let (d, n) = layers[0].shape();
        let data = layers
            .iter()
            .flat_map(|m| (0..d).flat_map(move |i| (0..n).map(move |k| m[(i, k)])))
            .collect();
        let tensor = Tensor::f64(vec![layers.len(), d, n], data)?;
        let mut meta = self.metadata();
        meta.insert(META_LAYERS.into(), (layers.len() - 1).to_string());
        meta.insert(META_HIDDEN.into(), d.to_string());
        meta.insert(META_SEQUENCES.into(), n.to_string());
        write_container(path, &meta, &[(POSITIONS, &tensor)])?;
        Ok(())
    }
}

struct ReplicaBlock {
    x: DMatrix<f64>,
    rngs: Vec<ChaCha8Rng>,
}

fn replica_rng(seed: u64, start: usize, replica: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((start as u64) << 32) | replica as u64);
    rng
}

/// Integrates replicas of each start column of `starts` (`D_eff × n_starts`)
/// from `t0` to `t1`.
pub fn integrate(
    starts: &DMatrix<f64>,
    drift: &dyn LinearDrift,
    config: &SdeConfig,
    t0: f64,
    t1: f64,
) -> Result<SimulationRun> {
    config.validate()?;
    check_interval(drift, t0, t1)?;
    let d = drift.dim();
    if starts.nrows() != d || starts.ncols() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "starts are {}x{}, drift dimension is {}",
            starts.nrows(),
            starts.ncols(),
            d
        )));
    }
    let reps = config.n_replicas_per_start;
    let total = starts.ncols() * reps;
    let mut blocks: Vec<ReplicaBlock> = (0..total)
        .step_by(BLOCK)
        .map(|first| {
            let cols: Vec<usize> = (first..(first + BLOCK).min(total)).collect();
            ReplicaBlock {
                x: DMatrix::from_fn(d, cols.len(), |i, j| starts[(i, cols[j] / reps)]),
                rngs: cols
                    .iter()
                    .map(|&c| replica_rng(config.seed, c / reps, c % reps))
                    .collect(),
            }
        })
        .collect();

    let gather = |blocks: &[ReplicaBlock]| {
        let mut m = DMatrix::zeros(d, total);
        for (b, block) in blocks.iter().enumerate() {
            m.columns_mut(b * BLOCK, block.x.ncols())
                .copy_from(&block.x);
        }
        m
    };

    let cuts = timeline(t0, t1, &drift.breakpoints());
    let saved = saved_times(t0, t1);
    let mut states = vec![gather(&blocks)];
    let mut step = 0usize;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = steps_between(a, b, config.step_size);
        let h = (b - a) / n as f64;
        for k in 0..n {
            let t = a + h * k as f64;
            let drift_h = drift.matrix(t, Side::Right)? * h;
            let noise_sd = (config.diffusion_rate(t) * h).sqrt();
            let ok = blocks.par_iter_mut().all(|block| {
                let mut next = &drift_h * &block.x;
                next += &block.x;
                if noise_sd > 0.0 {
                    for (j, rng) in block.rngs.iter_mut().enumerate() {
                        for v in next.column_mut(j).iter_mut() {
                            let eta: f64 = StandardNormal.sample(rng);
                            *v += noise_sd * eta;
                        }
                    }
                }
                let finite = next.iter().all(|v| v.is_finite());
                block.x = next;
                finite
            });
            step += 1;
            if !ok {
                return Err(Error::BlowUp { step, t: t + h });
            }
        }
        if saved.contains(&b) {
            states.push(gather(&blocks));
        }
    }
    Ok(SimulationRun {
        config: config.clone(),
        start_layer: t0,
        end_layer: t1,
        saved_times: saved,
        states,
        subspace: None,
    })
}

/// Mean and covariance of the SDE solution at the saved times.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrajectory {
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

/// Integrates `ṁ = A m` and `Ṗ = A P + P Aᵀ + αλe^{λt} I` with classical
/// fourth-order Runge–Kutta on the integrator's step grid.
pub fn moment_oracle(
    drift: &dyn LinearDrift,
    config: &SdeConfig,
    t0: f64,
    t1: f64,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
) -> Result<MomentTrajectory> {
    config.validate()?;
    check_interval(drift, t0, t1)?;
    let d = drift.dim();
    if mean0.len() != d || cov0.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "initial moments must be {} and {}x{}",
            d, d, d
        )));
    }
    if (cov0 - cov0.transpose()).amax() > 1e-12 * cov0.amax().max(1.0) {
        return Err(Error::InvalidConfig(
            "initial covariance is not symmetric".into(),
        ));
    }
    let identity = DMatrix::<f64>::identity(d, d);
    let rhs = |t: f64, side: Side, m: &DVector<f64>, p: &DMatrix<f64>| -> Result<_> {
        let a = drift.matrix(t, side)?;
        let ap = &a * p;
        let dp = &ap + ap.transpose() + &identity * config.diffusion_rate(t);
        Ok((&a * m, dp))
    };

    let cuts = timeline(t0, t1, &drift.breakpoints());
    let saved = saved_times(t0, t1);
    let mut m = mean0.clone();
    let mut p = cov0.clone();
    let mut out = MomentTrajectory {
        times: saved.clone(),
        means: vec![m.clone()],
        covariances: vec![p.clone()],
    };
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = steps_between(a, b, config.step_size);
        let h = (b - a) / n as f64;
        for k in 0..n {
            let t = a + h * k as f64;
            let end_side = if k + 1 == n { Side::Left } else { Side::Right };
            let (k1m, k1p) = rhs(t, Side::Right, &m, &p)?;
            let (k2m, k2p) = rhs(
                t + h / 2.0,
                Side::Right,
                &(&m + &k1m * (h / 2.0)),
                &(&p + &k1p * (h / 2.0)),
            )?;
            let (k3m, k3p) = rhs(
                t + h / 2.0,
                Side::Right,
                &(&m + &k2m * (h / 2.0)),
                &(&p + &k2p * (h / 2.0)),
            )?;
            let (k4m, k4p) = rhs(t + h, end_side, &(&m + &k3m * h), &(&p + &k3p * h))?;
            m += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
            p += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
            p = (&p + p.transpose()) * 0.5;
        }
        if saved.contains(&b) {
            out.means.push(m.clone());
            out.covariances.push(p.clone());
        }
    }
    Ok(out)
}

/// Drift path for simulating from layer `t0`, with the optional subspace basis.
///
/// With `k < D` the frames are reduced to `K × K` orthogonal matrices
/// `polar(Bᵀ U_K(l))` for `B = U_K(t0)`; with `k = D` the full frames are used
/// in Cartesian coordinates.
pub fn subspace_drift(
    bases: &[LayerBasis],
    t0: usize,
    k: usize,
) -> Result<(PathDrift, Option<DMatrix<f64>>)> {
    let d = bases
        .first()
        .ok_or_else(|| Error::Degenerate("no bases".into()))?
        .dim();
    if k == 0 || k > d {
        return Err(Error::OutOfRange {
            what: "subspace dimension",
            value: k as i64,
            valid: format!("1..={}", d),
        });
    }
    let origin = bases.iter().find(|b| b.t == t0).ok_or(Error::OutOfRange {
        what: "start layer",
        value: t0 as i64,
        valid: format!(
            "{}..={}",
            bases.first().map(|b| b.t).unwrap_or(0),
            bases.last().map(|b| b.t).unwrap_or(0)
        ),
    })?;
    let times: Vec<f64> = bases.iter().map(|b| b.t as f64).collect();
    if k == d {
        let frame = OrthogonalPath::from_bases(bases)?;
        let spectrum = SpectrumPath::from_bases(bases)?;
        return Ok((PathDrift::new(frame, spectrum)?, None));
    }
    let b = origin.u.columns(0, k).into_owned();
    let frames = bases
        .iter()
        .map(|l| polar(&(b.transpose() * l.u.columns(0, k))))
        .collect::<Result<Vec<_>>>()?;
    let frame = OrthogonalPath::aligned(times, frames)?;
    let spectrum = SpectrumPath::from_bases(bases)?.truncate(k);
    Ok((PathDrift::new(frame, spectrum)?, Some(b)))
}

/// Orthogonal polar factor.
fn polar(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or(Error::SvdNonConvergence(0))?;
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    Ok(u * vt)
}

/// Simulates replicas of the true positions at layer `t0` through the interpolated bases.
pub fn simulate_ensemble(
    ensemble: &TrajectoryEnsemble,
    bases: &[LayerBasis],
    config: &SdeConfig,
    t0: usize,
    t1: usize,
) -> Result<SimulationRun> {
    config.validate()?;
    let k = config.resolved_subspace(ensemble.hidden_dim());
    let (path, subspace) = subspace_drift(bases, t0, k)?;
    let x0 = ensemble.slice(t0)?.matrix;
    let starts = match &subspace {
        Some(b) => b.transpose() * x0,
        None => x0.clone(),
    };
    let mut run = integrate(&starts, &path, config, t0 as f64, t1 as f64)?;
    run.subspace = subspace;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeComparison {
    pub t: usize,
    pub overlap_2d: f64,
    pub ks_first: f64,
    pub ks_second: f64,
    /// `‖Δ mean‖ / √tr(C_true)` in the projection plane.
    pub mean_shift_over_spread: f64,
    /// `‖C_sim − C_true‖_F / ‖C_true‖_F` in the projection plane.
    pub cov_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionComparison {
    pub plane: (usize, usize),
    pub per_time: Vec<TimeComparison>,
}

/// Bins per axis for the projected 2-D histograms.
pub const COMPARISON_BINS: usize = 32;

/// Projects simulated and true ensembles on `(u_i(t), u_j(t))` at every saved layer.
pub fn compare_distributions(
    run: &SimulationRun,
    truth: &TrajectoryEnsemble,
    bases: &[LayerBasis],
    plane: (usize, usize),
) -> Result<DistributionComparison> {
    let d = truth.hidden_dim();
    for idx in [plane.0, plane.1] {
        if idx >= d {
            return Err(Error::OutOfRange {
                what: "plane index",
                value: idx as i64,
                valid: format!("0..{}", d),
            });
        }
    }
    let mut per_time = Vec::with_capacity(run.saved_times.len());
    for (k, &time) in run.saved_times.iter().enumerate() {
        if time.fract() != 0.0 || time < 0.0 || time as usize > truth.n_layers() {
            return Err(Error::OutOfRange {
                what: "saved time",
                value: time as i64,
                valid: format!("integer layers 0..={}", truth.n_layers()),
            });
        }
        let t = time as usize;
        let basis = bases
            .iter()
            .find(|b| b.t == t)
            .ok_or(Error::MissingTensor(format!("basis for layer {}", t)))?;
        let axes = basis.u.select_columns([plane.0, plane.1].iter());
        let sim = axes.transpose() * run.cartesian(k);
        let tru = axes.transpose() * truth.positions(t);
        per_time.push(compare_planar(t, &sim, &tru));
    }
    Ok(DistributionComparison { plane, per_time })
}

fn planar_moments(p: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = p.ncols() as f64;
    let mean = p.column_mean();
    let centered = DMatrix::from_fn(p.nrows(), p.ncols(), |i, k| p[(i, k)] - mean[i]);
    let cov = &centered * centered.transpose() / (n - 1.0).max(1.0);
    (mean, cov)
}

fn compare_planar(t: usize, sim: &DMatrix<f64>, tru: &DMatrix<f64>) -> TimeComparison {
    let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<_>>();
    let (ms, cs) = planar_moments(sim);
    let (mt, ct) = planar_moments(tru);
    TimeComparison {
        t,
        overlap_2d: histogram_overlap_2d(sim, tru, COMPARISON_BINS),
        ks_first: ks_two_sample(&row(sim, 0), &row(tru, 0)),
        ks_second: ks_two_sample(&row(sim, 1), &row(tru, 1)),
        mean_shift_over_spread: (ms - mt).norm() / ct.trace().sqrt(),
        cov_rel_error: (cs - &ct).norm() / ct.norm(),
    }
}
