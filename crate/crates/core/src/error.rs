use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Missing or malformed input data.
    Input,
    /// Invalid parameters or option combinations.
    Config,
    /// A numerical routine failed or met a degenerate case.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("input not found: {0}")]
    InputNotFound(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes {found:?}, not a LOTE v1 container")]
    BadMagic { found: [u8; 8] },

    #[error("unsupported container version {0} (expected 1)")]
    UnsupportedVersion(u64),

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("entry '{name}' lies outside the data section ({end} > {available} bytes)")]
    EntryOutOfBounds {
        name: String,
        end: u64,
        available: u64,
    },

    #[error("entries '{first}' and '{second}' overlap")]
    OverlappingEntries { first: String, second: String },

    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),

    #[error("invalid tensor name {0:?}: names must be non-empty ASCII")]
    InvalidName(String),

    #[error("tensor '{name}': {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("tensor '{name}' has dtype {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        found: String,
        expected: String,
    },

    #[error("missing tensor '{0}'")]
    MissingTensor(String),

    #[error("non-finite value at layer {layer}, sequence {sequence}")]
    NonFinite { layer: usize, sequence: usize },

    #[error("metadata inconsistent with data: {0}")]
    InconsistentMetadata(String),

    #[error("{what} {value} out of range (valid: {valid})")]
    OutOfRange {
        what: &'static str,
        value: i64,
        valid: String,
    },

    #[error("duplicate index {0}")]
    DuplicateIndex(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("SVD did not converge at layer {0}")]
    SvdNonConvergence(usize),

    #[error("eigendecomposition did not converge")]
    EigenNonConvergence,

    #[error("singular value {index} is zero at layer {layer}; cannot form stretch ratio")]
    ZeroSingularValue { layer: usize, index: usize },

    #[error("matrix is not skew-symmetric (deviation {0:.3e})")]
    NotSkewSymmetric(f64),

    #[error("matrix is not orthogonal (deviation {0:.3e})")]
    NotOrthogonal(f64),

    #[error("rotation has determinant {0:.6}; the matrix logarithm needs det = +1")]
    Reflection(f64),

    #[error(
        "rotation has an eigenvalue within {tolerance:.0e} of -1 (angle {angle:.6} rad); \
         the principal logarithm is ambiguous, use denser knots"
    )]
    BranchAmbiguity { angle: f64, tolerance: f64 },

    #[error("time {t} outside domain [{min}, {max}]")]
    OutsideDomain { t: f64, min: f64, max: f64 },

    #[error("spectrum index {index} non-positive ({value:.3e}) at t = {t}")]
    NonPositiveSpectrum { index: usize, t: f64, value: f64 },

    #[error("non-finite state at integration step {step} (t = {t})")]
    BlowUp { step: usize, t: f64 },

    #[error("fit window is empty")]
    EmptyFitWindow,

    #[error("fit underdetermined: {0} distinct abscissae, need at least 3")]
    Underdetermined(usize),

    #[error("too few samples: {got} (need at least {needed})")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("class imbalance {0:.1}:1 exceeds 10:1")]
    ClassImbalance(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::InputNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            InputNotFound(_)
            | Io { .. }
            | BadMagic { .. }
            | UnsupportedVersion(_)
            | Truncated(_)
            | MalformedManifest(_)
            | EntryOutOfBounds { .. }
            | OverlappingEntries { .. }
            | DuplicateName(_)
            | InvalidName(_)
            | ShapeMismatch { .. }
            | DtypeMismatch { .. }
            | MissingTensor(_)
            | NonFinite { .. }
            | InconsistentMetadata(_)
            | DimensionMismatch(_) => ErrorCategory::Input,
            OutOfRange { .. }
            | DuplicateIndex(_)
            | EmptyFitWindow
            | Underdetermined(_)
            | TooFewSamples { .. }
            | ClassImbalance(_)
            | InvalidConfig(_)
            | OutsideDomain { .. } => ErrorCategory::Config,
            Degenerate(_)
            | SvdNonConvergence(_)
            | EigenNonConvergence
            | ZeroSingularValue { .. }
            | NotSkewSymmetric(_)
            | NotOrthogonal(_)
            | Reflection(_)
            | BranchAmbiguity { .. }
            | NonPositiveSpectrum { .. }
            | BlowUp { .. }
            | InvalidDistribution(_) => ErrorCategory::Numerical,
        }
    }

    /// Stable snake_case code for machine-readable error reports.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            InputNotFound(_) => "input_not_found",
            Io { .. } => "io_error",
            BadMagic { .. } => "bad_magic",
            UnsupportedVersion(_) => "unsupported_version",
            Truncated(_) => "truncated",
            MalformedManifest(_) => "malformed_manifest",
            EntryOutOfBounds { .. } => "entry_out_of_bounds",
            OverlappingEntries { .. } => "overlapping_entries",
            DuplicateName(_) => "duplicate_name",
            InvalidName(_) => "invalid_name",
            ShapeMismatch { .. } => "shape_mismatch",
            DtypeMismatch { .. } => "dtype_mismatch",
            MissingTensor(_) => "missing_tensor",
            NonFinite { .. } => "non_finite",
            InconsistentMetadata(_) => "inconsistent_metadata",
            OutOfRange { .. } => "out_of_range",
            DuplicateIndex(_) => "duplicate_index",
            DimensionMismatch(_) => "dimension_mismatch",
            Degenerate(_) => "degenerate",
            SvdNonConvergence(_) => "svd_non_convergence",
            EigenNonConvergence => "eigen_non_convergence",
            ZeroSingularValue { .. } => "zero_singular_value",
            NotSkewSymmetric(_) => "not_skew_symmetric",
            NotOrthogonal(_) => "not_orthogonal",
            Reflection(_) => "reflection",
            BranchAmbiguity { .. } => "branch_ambiguity",
            OutsideDomain { .. } => "outside_domain",
            NonPositiveSpectrum { .. } => "non_positive_spectrum",
            BlowUp { .. } => "blow_up",
            EmptyFitWindow => "empty_fit_window",
            Underdetermined(_) => "underdetermined_fit",
            TooFewSamples { .. } => "too_few_samples",
            InvalidDistribution(_) => "invalid_distribution",
            ClassImbalance(_) => "class_imbalance",
            InvalidConfig(_) => "invalid_config",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
