//! Toolkit for analysing token trajectories through the layers of a transformer
//! as an ensemble of paths in hidden-state space.
//!
//! The pipeline runs from a [`TrajectoryEnsemble`] through per-layer singular
//! bases ([`geometry`]), linear transport between layers ([`transport`]),
//! residual statistics ([`noise`]), continuous interpolation of the bases
//! ([`manifold`]) and stochastic simulation ([`langevin`]). Trajectories are
//! stored in the LOTE tensor container ([`container`]).

pub mod container;
pub mod ensemble;
pub mod error;
pub mod geometry;
pub mod langevin;
pub mod manifold;
pub mod noise;
pub mod probes;
pub mod stats;
pub mod synthetic;
pub mod transport;

pub use container::{read_container, write_container, ContainerReader, DType, Tensor};
pub use ensemble::{LayerSlice, TrajectoryEnsemble};
pub use error::{Error, ErrorCategory, Result};
pub use geometry::{compute_bases, compute_basis, BasisOptions, LayerBasis};
pub use langevin::{integrate, moment_oracle, SdeConfig, SimulationRun};
pub use manifold::{matrix_exp_skew, matrix_log_so, OrthogonalPath, SpectrumPath};
pub use noise::{fit_variance_law, moment_maps, CellMoments, FitWindow, MomentMaps, NoiseModel};
pub use probes::{kl_divergence, separability_sweep, KlCurve, SeparabilityReport};
pub use transport::{extrapolate, residuals, ResidualField, SignAlignment, TransportOperator};
