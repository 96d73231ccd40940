//! Pipeline configuration: one JSON file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use lotkit::noise::IsotropyOptions;
use lotkit::{FitWindow, SdeConfig, SignAlignment};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// File name of the resolved configuration written next to every output set.
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Trajectory ensemble (`positions`).
    pub ensemble: Option<PathBuf>,
    /// Precomputed bases (`U`, `sigma`); computed from the ensemble when absent.
    pub bases: Option<PathBuf>,
    /// Residual summaries (`delta_mean`, `delta_var`, `delta_kurt`).
    pub residuals: Option<PathBuf>,
    /// Logit files holding `logits_true` and `logits_truncated_K{K}` entries.
    pub logits: Vec<PathBuf>,
    /// The two labelled ensembles of the separability probe.
    pub probe_a: Option<PathBuf>,
    pub probe_b: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Single seed for every random choice; copied into `sde.seed`.
    pub seed: u64,
    /// Subtract the per-layer mean before the SVD.
    pub center: bool,
    pub sign_alignment: SignAlignment,
    pub fit_window: FitWindow,
    /// Coordinates averaged in the moment maps; all when absent.
    pub moment_coordinates: Option<Vec<usize>>,
    /// `(t, t+τ)` cell for the isotropy and Gaussianity diagnostics.
    pub diagnostic_cell: Option<(usize, usize)>,
    pub isotropy: IsotropyOptions,
    /// Hidden dimension for the KL probe; read from the logit metadata when absent.
    pub hidden_dim: Option<usize>,
    /// Truncation ranks to evaluate; every rank present in the inputs when absent.
    pub k_grid: Option<Vec<usize>>,
    /// Train fraction of the separability probe.
    pub split_ratio: f64,
    pub sde: SdeConfig,
    pub simulate_from: usize,
    /// Final simulated layer; `T` when absent.
    pub simulate_to: Option<usize>,
    /// Singular-direction index pairs for the distribution comparison.
    pub planes: Vec<(usize, usize)>,
    /// Interior evaluation points of the interpolation check.
    pub interp_samples: usize,
    pub plots: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ensemble: None,
            bases: None,
            residuals: None,
            logits: Vec::new(),
            probe_a: None,
            probe_b: None,
            out_dir: PathBuf::from("lotkit_out"),
            seed: 0,
            center: false,
            sign_alignment: SignAlignment::default(),
            fit_window: FitWindow::default(),
            moment_coordinates: None,
            diagnostic_cell: None,
            isotropy: IsotropyOptions::default(),
            hidden_dim: None,
            k_grid: None,
            split_ratio: 0.7,
            sde: SdeConfig::default(),
            simulate_from: 1,
            simulate_to: None,
            planes: vec![(0, 1), (2, 3)],
            interp_samples: 100,
            plots: true,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Core(lotkit::Error::InputNotFound(path.to_path_buf()))
            } else {
                CliError::ConfigFile {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                }
            }
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Checks value ranges and propagates the global seed.
    pub fn resolve(mut self) -> CliResult<Self> {
        self.sde.seed = self.seed;
        self.sde.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(CliError::Config(format!(
                "split_ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        if self.interp_samples == 0 {
            return Err(CliError::Config("interp_samples must be >= 1".into()));
        }
        if let Some(to) = self.simulate_to {
            if to <= self.simulate_from {
                return Err(CliError::Config(format!(
                    "simulate_to ({}) must exceed simulate_from ({})",
                    to, self.simulate_from
                )));
            }
        }
        if let Some(ks) = &self.k_grid {
            if ks.is_empty() || ks.contains(&0) {
                return Err(CliError::Config("k_grid must hold positive ranks".into()));
            }
        }
        if !(self.isotropy.family_alpha > 0.0 && self.isotropy.family_alpha < 1.0) {
            return Err(CliError::Config(
                "isotropy.family_alpha must lie in (0, 1)".into(),
            ));
        }
        Ok(self)
    }

    pub fn ensemble_path(&self) -> CliResult<&Path> {
        self.ensemble
            .as_deref()
            .ok_or(CliError::MissingInput("ensemble"))
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write_resolved(&self) -> CliResult<()> {
        crate::output::write_json(&self.out_dir.join(RESOLVED_CONFIG), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(
            r#"{"seed": 4, "fit_window": {"start_min": 2}, "sde": {"step_size": 0.1}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.fit_window.start_min, 2);
        assert_eq!(cfg.fit_window.target_max, None);
        assert_eq!(cfg.sde.step_size, 0.1);
        assert_eq!(cfg.sde.n_replicas_per_start, 10);
        assert_eq!(cfg.planes, vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn resolve_propagates_seed_and_checks_ranges() {
        let cfg = PipelineConfig {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(cfg.resolve().unwrap().sde.seed, 9);
        let bad = PipelineConfig {
            split_ratio: 1.0,
            ..Default::default()
        };
        assert_eq!(bad.resolve().unwrap_err().exit_code(), 3);
        let mut sde = PipelineConfig::default();
        sde.sde.step_size = 2.0;
        assert_eq!(sde.resolve().unwrap_err().exit_code(), 3);
    }

    #[test]
    fn roundtrip_through_json() {
        let cfg = PipelineConfig {
            k_grid: Some(vec![1, 4]),
            diagnostic_cell: Some((3, 5)),
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
    }
}
