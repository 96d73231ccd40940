//! Continuous interpolation of per-layer frames and spectra.
//!
//! Frames follow the geodesic `U(t) = U₁ exp(α G)` with `G = log(U₁ᵀ U₂)` on
//! each knot interval; singular values follow natural cubic splines.
//!
//! Both matrix functions use the spectral calculus of a symmetric companion
//! matrix. For skew `A`, `−A²` is symmetric PSD with eigenvalues `θ²`, and
//! `exp(A) = cos(√M) + A·sinc(√M)` with `M = −A²`. For a rotation `R`, the
//! symmetric and skew parts `S`, `K` commute and `log R = K·g(S)` with
//! `g(c) = arccos(c) / √(1 − c²)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::LayerBasis;

/// Eigenvalues of the rotation closer than this to −1 make the principal log ambiguous.
pub const BRANCH_TOLERANCE: f64 = 1e-6;
/// Skewness tolerance on generator inputs.
pub const SKEW_TOLERANCE: f64 = 1e-8;
/// Per-dimension orthonormality tolerance (Frobenius) on frame and rotation inputs.
pub const ORTHO_TOLERANCE: f64 = 1e-10;
/// Spline samples per knot interval in the positivity check.
const POSITIVITY_SAMPLES: usize = 16;

fn frobenius_defect_orthogonal(m: &DMatrix<f64>) -> f64 {
    (m.transpose() * m - DMatrix::identity(m.ncols(), m.ncols())).norm()
}

fn check_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} must be square and non-empty, got {}x{}",
            what,
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate(format!(
            "{} has non-finite entries",
            what
        )));
    }
    Ok(m.nrows())
}

/// `θ / sin θ` for `θ ∈ [0, π)`.
fn theta_over_sin(theta: f64) -> f64 {
    if theta < 1e-4 {
        1.0 + theta * theta / 6.0
    } else {
        theta / theta.sin()
    }
}

/// `sin θ / θ`.
fn sinc(theta: f64) -> f64 {
    if theta.abs() < 1e-4 {
        1.0 - theta * theta / 6.0
    } else {
        theta.sin() / theta
    }
}

/// Principal logarithm of a rotation matrix.
pub fn matrix_log_so(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = check_square(r, "rotation")?;
    let defect = frobenius_defect_orthogonal(r);
    if defect > ORTHO_TOLERANCE * d as f64 {
        return Err(Error::NotOrthogonal(defect));
    }
    let det = r.determinant();
    if det < 0.0 {
        return Err(Error::Reflection(det));
    }
    let s = (r + r.transpose()) * 0.5;
    let k = (r - r.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(s, f64::EPSILON, 0).ok_or(Error::EigenNonConvergence)?;
    let min_c = eig.eigenvalues.min();
    if min_c < -1.0 + BRANCH_TOLERANCE {
        return Err(Error::BranchAmbiguity {
            angle: min_c.clamp(-1.0, 1.0).acos(),
            tolerance: BRANCH_TOLERANCE,
        });
    }
    let g = eig
        .eigenvalues
        .map(|c| theta_over_sin(c.clamp(-1.0, 1.0).acos()));
    let q = &eig.eigenvectors;
    let a = k * (q * DMatrix::from_diagonal(&g) * q.transpose());
    Ok((&a - a.transpose()) * 0.5)
}

/// Exponential of a skew-symmetric matrix.
pub fn matrix_exp_skew(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(SkewExp::new(a)?.exp(1.0))
}

/// Spectral data of a skew generator for repeated evaluation of `exp(s·A)`.
#[derive(Debug, Clone)]
pub struct SkewExp {
    q: DMatrix<f64>,
    /// `A·Q`.
    aq: DMatrix<f64>,
    theta: DVector<f64>,
}

impl SkewExp {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        check_square(a, "generator")?;
        let asym = (a + a.transpose()).norm();
        if asym > SKEW_TOLERANCE * a.norm().max(1.0) {
            return Err(Error::NotSkewSymmetric(asym));
        }
        let m = a.transpose() * a;
        let eig = SymmetricEigen::try_new(m, f64::EPSILON, 0).ok_or(Error::EigenNonConvergence)?;
        let theta = eig.eigenvalues.map(|mu| mu.max(0.0).sqrt());
        let aq = a * &eig.eigenvectors;
        Ok(Self {
            q: eig.eigenvectors,
            aq,
            theta,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// `exp(s·A)`.
    pub fn exp(&self, s: f64) -> DMatrix<f64> {
        let mut left = self.q.clone();
        for (j, mut col) in left.column_iter_mut().enumerate() {
            col *= (s * self.theta[j]).cos();
        }
        for j in 0..self.dim() {
            let w = s * sinc(s * self.theta[j]);
            left.column_mut(j).axpy(w, &self.aq.column(j), 1.0);
        }
        left * self.q.transpose()
    }
}

#[derive(Debug, Clone)]
struct Segment {
    generator: DMatrix<f64>,
    spectral: SkewExp,
}

/// Piecewise-geodesic path through orthogonal knot frames.
#[derive(Debug, Clone)]
pub struct OrthogonalPath {
    times: Vec<f64>,
    frames: Vec<DMatrix<f64>>,
    segments: Vec<Segment>,
}

fn check_times(times: &[f64], count: usize) -> Result<()> {
    if times.len() != count || count < 2 {
        return Err(Error::DimensionMismatch(format!(
            "need at least 2 knots with one time each, got {} times for {} knots",
            times.len(),
            count
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidConfig(
            "knot times must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Which interval an evaluation exactly at an interior knot belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Side {
    Left,
    #[default]
    Right,
}

/// Index of the knot interval containing `t`; interior knots belong to the
/// interval on `side`.
fn locate_on(times: &[f64], t: f64, side: Side) -> Result<usize> {
    let (min, max) = (times[0], times[times.len() - 1]);
    if !(t >= min && t <= max) {
        return Err(Error::OutsideDomain { t, min, max });
    }
    let upper = match side {
        Side::Right => times.partition_point(|&k| k <= t),
        Side::Left => times.partition_point(|&k| k < t),
    };
    Ok(upper.saturating_sub(1).min(times.len() - 2))
}

fn locate(times: &[f64], t: f64) -> Result<usize> {
    locate_on(times, t, Side::Right)
}

impl OrthogonalPath {
    /// Path through the given frames as stored, without sign adjustment.
    pub fn new(times: Vec<f64>, frames: Vec<DMatrix<f64>>) -> Result<Self> {
        check_times(&times, frames.len())?;
        let d = check_square(&frames[0], "frame")?;
        for f in &frames {
            if f.shape() != (d, d) {
                return Err(Error::DimensionMismatch(format!(
                    "frame is {:?}, expected {}x{}",
                    f.shape(),
                    d,
                    d
                )));
            }
            let defect = frobenius_defect_orthogonal(f);
            if defect > ORTHO_TOLERANCE * d as f64 {
                return Err(Error::NotOrthogonal(defect));
            }
        }
        let segments = frames
            .windows(2)
            .map(|w| {
                let generator = matrix_log_so(&(w[0].transpose() * &w[1]))?;
                let spectral = SkewExp::new(&generator)?;
                Ok(Segment {
                    generator,
                    spectral,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            times,
            frames,
            segments,
        })
    }

    /// Path after choosing column signs of each knot to follow the previous one.
    ///
    /// Column `j` of a knot is flipped when it anti-correlates with column `j` of
    /// its predecessor. If the relative rotation is still improper, the least
    /// aligned column is flipped as well.
    pub fn aligned(times: Vec<f64>, mut frames: Vec<DMatrix<f64>>) -> Result<Self> {
        for l in 1..frames.len() {
            let (done, rest) = frames.split_at_mut(l);
            let prev = &done[l - 1];
            let cur = &mut rest[0];
            let d = cur.ncols().min(prev.ncols());
            let overlap: Vec<f64> = (0..d).map(|j| prev.column(j).dot(&cur.column(j))).collect();
            for (j, &o) in overlap.iter().enumerate() {
                if o < 0.0 {
                    cur.column_mut(j).neg_mut();
                }
            }
            if prev.shape() == cur.shape() && (prev.transpose() * &*cur).determinant() < 0.0 {
                let worst = (0..d)
                    .min_by(|&a, &b| overlap[a].abs().total_cmp(&overlap[b].abs()))
                    .unwrap_or(0);
                log::warn!(
                    "knot {}: relative rotation improper after sign alignment, flipping column {}",
                    l,
                    worst
                );
                cur.column_mut(worst).neg_mut();
            }
        }
        Self::new(times, frames)
    }

    /// Path through the bases of consecutive layers, with times equal to layer indices.
    pub fn from_bases(bases: &[LayerBasis]) -> Result<Self> {
        let times = bases.iter().map(|b| b.t as f64).collect();
        Self::aligned(times, bases.iter().map(|b| b.u.clone()).collect())
    }

    pub fn dim(&self) -> usize {
        self.frames[0].nrows()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.times[0], self.times[self.times.len() - 1])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn frames(&self) -> &[DMatrix<f64>] {
        &self.frames
    }

    pub fn generators(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.segments.iter().map(|s| &s.generator)
    }

    /// Generator of the interval containing `t` divided by its length, i.e.
    /// `Uᵀ U̇` at `t`.
    pub fn velocity_generator(&self, t: f64, side: Side) -> Result<DMatrix<f64>> {
        let s = locate_on(&self.times, t, side)?;
        let h = self.times[s + 1] - self.times[s];
        Ok(&self.segments[s].generator / h)
    }

    /// `(U(t), U̇(t))`. Knot times return the stored knot frame; the derivative
    /// at an interior knot comes from the interval to its right.
    pub fn interpolate(&self, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.interpolate_on(t, Side::Right)
    }

    pub fn interpolate_on(&self, t: f64, side: Side) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let s = locate_on(&self.times, t, side)?;
        let (t1, t2) = (self.times[s], self.times[s + 1]);
        let h = t2 - t1;
        let seg = &self.segments[s];
        let u = if t == t1 {
            self.frames[s].clone()
        } else if t == t2 {
            self.frames[s + 1].clone()
        } else {
            &self.frames[s] * seg.spectral.exp((t - t1) / h)
        };
        let u_dot = &u * &seg.generator / h;
        Ok((u, u_dot))
    }
}

/// Natural cubic spline through `(x_k, y_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn natural(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        check_times(&x, y.len())?;
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives (Thomas algorithm).
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                let h0 = x[i + 1] - x[i];
                let h1 = x[i + 2] - x[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self { x, y, m })
    }

    /// Value and first derivative at `t`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        let i = locate(&self.x, t)?;
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let value = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let deriv = (y1 - y0) / h + ((1.0 - 3.0 * a * a) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0;
        Ok((value, deriv))
    }
}

/// Per-index splines of the singular values over layer time.
#[derive(Debug, Clone)]
pub struct SpectrumPath {
    splines: Vec<Option<CubicSpline>>,
    domain: (f64, f64),
}

impl SpectrumPath {
    /// `spectra[k]` holds the singular values at `times[k]`. Indices with a
    /// non-positive knot value are inactive: their logarithmic derivative is 0.
    pub fn new(times: Vec<f64>, spectra: &[DVector<f64>]) -> Result<Self> {
        check_times(&times, spectra.len())?;
        let d = spectra[0].len();
        if spectra.iter().any(|s| s.len() != d) {
            return Err(Error::DimensionMismatch(
                "spectra have different lengths".into(),
            ));
        }
        let domain = (times[0], times[times.len() - 1]);
        let mut splines = Vec::with_capacity(d);
        for i in 0..d {
            let y: Vec<f64> = spectra.iter().map(|s| s[i]).collect();
            if y.iter().any(|&v| !(v > 0.0)) {
                splines.push(None);
                continue;
            }
            let spline = CubicSpline::natural(times.clone(), y)?;
            for w in times.windows(2) {
                for k in 1..POSITIVITY_SAMPLES {
                    let t = w[0] + (w[1] - w[0]) * k as f64 / POSITIVITY_SAMPLES as f64;
                    let (v, _) = spline.eval(t)?;
                    if !(v > 0.0) {
                        return Err(Error::NonPositiveSpectrum {
                            index: i,
                            t,
                            value: v,
                        });
                    }
                }
            }
            splines.push(Some(spline));
        }
        Ok(Self { splines, domain })
    }

    pub fn from_bases(bases: &[LayerBasis]) -> Result<Self> {
        let times = bases.iter().map(|b| b.t as f64).collect();
        let spectra: Vec<_> = bases.iter().map(|b| b.sigma.clone()).collect();
        Self::new(times, &spectra)
    }

    /// Restriction to the leading `k` indices.
    pub fn truncate(&self, k: usize) -> Self {
        Self {
            splines: self.splines.iter().take(k).cloned().collect(),
            domain: self.domain,
        }
    }

    pub fn dim(&self) -> usize {
        self.splines.len()
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    /// `(σ(t), σ̇(t)/σ(t))`; inactive indices report `σ = 0` and log-derivative 0.
    pub fn interpolate(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let (min, max) = self.domain;
        if !(t >= min && t <= max) {
            return Err(Error::OutsideDomain { t, min, max });
        }
        let d = self.dim();
        let mut sigma = DVector::zeros(d);
        let mut logd = DVector::zeros(d);
        for (i, spline) in self.splines.iter().enumerate() {
            if let Some(s) = spline {
                let (v, dv) = s.eval(t)?;
                if !(v > 0.0) {
                    return Err(Error::NonPositiveSpectrum {
                        index: i,
                        t,
                        value: v,
                    });
                }
                sigma[i] = v;
                logd[i] = dv / v;
            }
        }
        Ok((sigma, logd))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot2(theta: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
    }

    #[test]
    fn log_of_identity_is_zero() {
        let a = matrix_log_so(&DMatrix::identity(5, 5)).unwrap();
        assert_eq!(a.amax(), 0.0);
    }

    #[test]
    fn log_of_plane_rotation() {
        let a = matrix_log_so(&rot2(0.3)).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -0.3, 0.3, 0.0]);
        assert!((a - expected).amax() < 1e-15);
    }

    #[test]
    fn exp_closed_forms() {
        assert!(
            (matrix_exp_skew(&DMatrix::zeros(4, 4)).unwrap() - DMatrix::identity(4, 4)).amax()
                == 0.0
        );
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[
                0.0,
                -std::f64::consts::FRAC_PI_2,
                std::f64::consts::FRAC_PI_2,
                0.0,
            ],
        );
        let r = matrix_exp_skew(&a).unwrap();
        assert!((r - rot2(std::f64::consts::FRAC_PI_2)).amax() < 1e-15);
    }

    #[test]
    fn half_turn_is_ambiguous() {
        let r = rot2(std::f64::consts::PI);
        assert!(matches!(
            matrix_log_so(&r),
            Err(Error::BranchAmbiguity { .. })
        ));
    }

    #[test]
    fn reflection_is_rejected() {
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, -1.0]));
        assert!(matches!(matrix_log_so(&r), Err(Error::Reflection(_))));
    }

    #[test]
    fn non_skew_generator_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            matrix_exp_skew(&a),
            Err(Error::NotSkewSymmetric(_))
        ));
    }

    #[test]
    fn path_knots_and_midpoint() {
        let path =
            OrthogonalPath::new(vec![0.0, 1.0], vec![DMatrix::identity(2, 2), rot2(0.8)]).unwrap();
        assert_eq!(path.interpolate(0.0).unwrap().0, DMatrix::identity(2, 2));
        assert_eq!(path.interpolate(1.0).unwrap().0, rot2(0.8));
        assert!((path.interpolate(0.5).unwrap().0 - rot2(0.4)).amax() < 1e-15);
        assert!(matches!(
            path.interpolate(1.5),
            Err(Error::OutsideDomain { .. })
        ));
    }

    #[test]
    fn interior_knot_uses_right_segment() {
        let frames = vec![DMatrix::identity(2, 2), rot2(0.2), rot2(0.9)];
        let path = OrthogonalPath::new(vec![0.0, 1.0, 2.0], frames).unwrap();
        let (_, u_dot) = path.interpolate(1.0).unwrap();
        let expected = rot2(0.2) * DMatrix::from_row_slice(2, 2, &[0.0, -0.7, 0.7, 0.0]);
        assert!((u_dot - expected).amax() < 1e-14);
    }

    #[test]
    fn alignment_removes_sign_flips() {
        let mut flipped = rot2(0.1);
        flipped.column_mut(0).neg_mut();
        flipped.column_mut(1).neg_mut();
        let path = OrthogonalPath::aligned(vec![0.0, 1.0], vec![DMatrix::identity(2, 2), flipped])
            .unwrap();
        assert!((path.frames()[1].clone() - rot2(0.1)).amax() < 1e-15);
    }

    #[test]
    fn spline_reproduces_linear_data() {
        let s = CubicSpline::natural(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]).unwrap();
        let (v, dv) = s.eval(2.5).unwrap();
        assert!((v - 6.0).abs() < 1e-14);
        assert!((dv - 2.0).abs() < 1e-14);
    }

    #[test]
    fn constant_spectrum_has_zero_log_derivative() {
        let spectra = vec![DVector::from_element(3, 2.5); 5];
        let p = SpectrumPath::new((0..5).map(|t| t as f64).collect(), &spectra).unwrap();
        let (s, l) = p.interpolate(2.3).unwrap();
        assert!((s.add_scalar(-2.5)).amax() < 1e-15);
        assert_eq!(l.amax(), 0.0);
    }

    #[test]
    fn zero_knot_index_is_inactive() {
        let spectra: Vec<_> = (0..4)
            .map(|t| DVector::from_vec(vec![1.0 + t as f64, 0.0]))
            .collect();
        let p = SpectrumPath::new((0..4).map(|t| t as f64).collect(), &spectra).unwrap();
        let (s, l) = p.interpolate(1.5).unwrap();
        assert_eq!((s[1], l[1]), (0.0, 0.0));
    }

    #[test]
    fn negative_overshoot_is_an_error() {
        let values = [1.0, 1e-3, 1.0, 1e-3, 1.0];
        let spectra: Vec<_> = values.iter().map(|&v| DVector::from_vec(vec![v])).collect();
        assert!(matches!(
            SpectrumPath::new((0..5).map(|t| t as f64).collect(), &spectra),
            Err(Error::NonPositiveSpectrum { index: 0, .. })
        ));
    }
}
