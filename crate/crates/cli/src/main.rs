mod commands;
mod config;
mod error;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{SynthKind, SynthSpec};
use crate::config::PipelineConfig;
use crate::error::CliResult;

#[derive(Parser)]
#[command(
    name = "lotkit",
    version,
    about = "Analyse and simulate hidden-state trajectories of transformer layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every pipeline command; they override the config file.
#[derive(Args, Debug, Default)]
struct Common {
    /// JSON configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip SVG output.
    #[arg(long)]
    no_plots: bool,
    /// Trajectory ensemble file.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Precomputed bases file.
    #[arg(long)]
    bases: Option<PathBuf>,
    /// Residual summary file.
    #[arg(long)]
    residuals: Option<PathBuf>,
    /// Logit file; repeat to merge several.
    #[arg(long)]
    logits: Vec<PathBuf>,
    #[arg(long)]
    probe_a: Option<PathBuf>,
    #[arg(long)]
    probe_b: Option<PathBuf>,
    /// Subtract the per-layer mean before the SVD.
    #[arg(long)]
    center: bool,
    /// Hidden dimension for the KL probe.
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Truncation ranks, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    from: Option<usize>,
    #[arg(long)]
    to: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    noise_alpha: Option<f64>,
    #[arg(long)]
    noise_lambda: Option<f64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Simulation subspace dimension.
    #[arg(long)]
    subspace: Option<usize>,
    /// Interior evaluation points of the interpolation check.
    #[arg(long)]
    samples: Option<usize>,
    /// Smallest source layer of the variance-law fit.
    #[arg(long)]
    fit_start_min: Option<usize>,
    #[arg(long)]
    fit_start_max: Option<usize>,
    #[arg(long)]
    fit_target_min: Option<usize>,
    /// Largest target layer of the variance-law fit.
    #[arg(long)]
    fit_target_max: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer singular bases, spectra, angle maps and cluster statistics.
    Svd(Common),
    /// Transport residuals over the layer grid.
    Extrapolate(Common),
    /// Moment maps, variance-law fit and residual diagnostics.
    Noise(Common),
    /// Checks the interpolated frames and spectra.
    InterpCheck(Common),
    /// Langevin simulation compared against the true ensemble.
    Simulate(Common),
    /// KL divergence of truncated logits against the true ones.
    ProbeKl(Common),
    /// Linear separability of two ensembles by layer.
    ProbeSep(Common),
    /// Every stage whose inputs are available.
    Report(Common),
    /// Writes synthetic inputs.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SynthKind,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    sequences: usize,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    /// First separable layer of the gated pair.
    #[arg(long, default_value_t = 6)]
    gate: usize,
    #[arg(long, default_value_t = 6.0)]
    offset: f64,
    /// Vocabulary size of synthetic logits.
    #[arg(long, default_value_t = 64)]
    vocab: usize,
}

fn build_config(c: Common) -> CliResult<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    set!(cfg.out_dir, c.out_dir);
    set!(cfg.seed, c.seed);
    set!(cfg.split_ratio, c.split_ratio);
    set!(cfg.simulate_from, c.from);
    set!(cfg.sde.step_size, c.step_size);
    set!(cfg.sde.noise_alpha, c.noise_alpha);
    set!(cfg.sde.noise_lambda, c.noise_lambda);
    set!(cfg.sde.n_replicas_per_start, c.replicas);
    set!(cfg.interp_samples, c.samples);
    set!(cfg.fit_window.start_min, c.fit_start_min);
    cfg.fit_window.start_max = c.fit_start_max.or(cfg.fit_window.start_max);
    cfg.fit_window.target_min = c.fit_target_min.or(cfg.fit_window.target_min);
    cfg.fit_window.target_max = c.fit_target_max.or(cfg.fit_window.target_max);
    cfg.ensemble = c.ensemble.or(cfg.ensemble);
    cfg.bases = c.bases.or(cfg.bases);
    cfg.residuals = c.residuals.or(cfg.residuals);
    cfg.probe_a = c.probe_a.or(cfg.probe_a);
    cfg.probe_b = c.probe_b.or(cfg.probe_b);
    cfg.hidden_dim = c.hidden_dim.or(cfg.hidden_dim);
    cfg.k_grid = c.k.or(cfg.k_grid);
    cfg.simulate_to = c.to.or(cfg.simulate_to);
    cfg.sde.subspace_k = c.subspace.or(cfg.sde.subspace_k);
    if !c.logits.is_empty() {
        cfg.logits = c.logits;
    }
    cfg.center |= c.center;
    cfg.plots &= !c.no_plots;
    cfg.resolve()
}

fn run(cli: Cli) -> CliResult<()> {
    let (common, stage): (Common, fn(&PipelineConfig) -> CliResult<serde_json::Value>) =
        match cli.command {
            Command::Svd(c) => (c, commands::svd),
            Command::Extrapolate(c) => (c, commands::extrapolate),
            Command::Noise(c) => (c, commands::noise),
            Command::InterpCheck(c) => (c, commands::interp_check),
            Command::Simulate(c) => (c, commands::simulate),
            Command::ProbeKl(c) => (c, commands::probe_kl),
            Command::ProbeSep(c) => (c, commands::probe_sep),
            Command::Report(c) => (c, commands::report),
            Command::Synth(s) => {
                let spec = SynthSpec {
                    kind: s.kind,
                    dim: s.dim,
                    sequences: s.sequences,
                    layers: s.layers,
                    seed: s.seed,
                    alpha: s.alpha,
                    lambda: s.lambda,
                    gate: s.gate,
                    offset: s.offset,
                    vocab: s.vocab,
                };
                for p in commands::synth(&spec, &s.out_dir)? {
                    println!("{}", p.display());
                }
                return Ok(());
            }
        };
    let cfg = build_config(common)?;
    output::ensure_dir(&cfg.out_dir)?;
    cfg.write_resolved()?;
    let summary = stage(&cfg)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
