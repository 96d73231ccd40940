//! One function per subcommand. Each writes its artefacts into `out_dir` and
//! returns a JSON summary used by `report`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lotkit::geometry::{basis_angles, cluster_stats, load_bases, save_bases};
use lotkit::langevin::{
    compare_distributions, simulate_ensemble, subspace_drift, DistributionComparison,
};
use lotkit::noise::{
    gaussianity_check, isotropy_report, summaries_to_tensors, MomentMaps, MomentOptions, MomentStat,
};
use lotkit::probes::{kl_curve, LOGITS_TRUE, LOGITS_TRUNCATED_PREFIX};
use lotkit::transport::{grid_cells, residual_grid_summaries, residuals_with};
use lotkit::{
    compute_bases, fit_variance_law, moment_maps, read_container, separability_sweep,
    write_container, BasisOptions, CellMoments, DType, Error, LayerBasis, NoiseModel, Tensor,
    TrajectoryEnsemble,
};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::output::{ensure_dir, num, write_csv, write_json, write_text};
use crate::svg::{heatmap, line_plot, Series};

pub const BASES_FILE: &str = "bases.lote";
pub const RESIDUALS_FILE: &str = "residuals.lote";
pub const SIMULATED_FILE: &str = "simulated.lote";
/// Angle heatmaps are drawn for the leading directions only.
const ANGLE_MAPS: usize = 4;
/// Points per cloud in the overlay scatter plots.
const SCATTER_POINTS: usize = 2000;
/// Central-difference step of the interpolation check.
const FD_STEP: f64 = 1e-5;

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn plot(cfg: &PipelineConfig, name: &str, svg: impl FnOnce() -> String) -> CliResult<()> {
    if cfg.plots {
        write_text(&out(cfg, name), &svg())?;
    }
    Ok(())
}

fn load_ensemble(path: &Path) -> CliResult<TrajectoryEnsemble> {
    log::info!("loading ensemble {}", path.display());
    Ok(TrajectoryEnsemble::load(path)?)
}

/// Bases from the configured file, or computed from the ensemble.
fn obtain_bases(
    cfg: &PipelineConfig,
    ens: Option<&TrajectoryEnsemble>,
) -> CliResult<Vec<LayerBasis>> {
    let bases = match (&cfg.bases, ens) {
        (Some(path), _) => load_bases(path)?,
        (None, Some(e)) => compute_bases(e, BasisOptions { center: cfg.center })?,
        (None, None) => return Err(CliError::MissingInput("ensemble or bases")),
    };
    if let Some(e) = ens {
        if bases.len() != e.layers().len() || bases[0].dim() != e.hidden_dim() {
            return Err(Error::DimensionMismatch(format!(
                "bases cover {} layers of D = {}, ensemble has {} layers of D = {}",
                bases.len(),
                bases[0].dim(),
                e.layers().len(),
                e.hidden_dim()
            ))
            .into());
        }
    }
    Ok(bases)
}

pub fn svd(cfg: &PipelineConfig) -> CliResult<Value> {
    let ens = load_ensemble(cfg.ensemble_path()?)?;
    svd_with(cfg, &ens).map(|(v, _)| v)
}

fn svd_with(cfg: &PipelineConfig, ens: &TrajectoryEnsemble) -> CliResult<(Value, Vec<LayerBasis>)> {
    let bases = compute_bases(ens, BasisOptions { center: cfg.center })?;
    let d = ens.hidden_dim();
    let mut meta = BTreeMap::new();
    meta.insert("ensemble_hash".to_string(), ens.content_hash());
    save_bases(out(cfg, BASES_FILE), &bases, &meta)?;

    let mut head = vec!["layer".to_string()];
    head.extend((1..=d).map(|i| format!("sigma_{}", i)));
    let rows: Vec<Vec<String>> = bases
        .iter()
        .map(|b| {
            let mut row = vec![b.t.to_string()];
            row.extend(b.sigma.iter().map(|&s| num(s)));
            row
        })
        .collect();
    write_csv(&out(cfg, "spectra.csv"), &head, &rows)?;

    let mut angle_rows = Vec::new();
    for i in 0..ANGLE_MAPS.min(d) {
        let map = basis_angles(&bases, i)?;
        for (a, &la) in map.layers.iter().enumerate() {
            for (b, &lb) in map.layers.iter().enumerate() {
                angle_rows.push(vec![
                    (i + 1).to_string(),
                    la.to_string(),
                    lb.to_string(),
                    num(map.angles[(a, b)]),
                ]);
            }
        }
        plot(cfg, &format!("angles_u{}.svg", i + 1), || {
            heatmap(
                &format!("angle between u_{} at two layers (rad)", i + 1),
                "layer",
                "layer",
                &map.angles,
                &map.layers,
                &map.layers,
            )
        })?;
    }
    write_csv(
        &out(cfg, "angles.csv"),
        &header(&["direction", "layer_a", "layer_b", "angle_rad"]),
        &angle_rows,
    )?;

    let clusters = cluster_stats(ens, &bases)?;
    let k = clusters
        .first()
        .map(|c| c.displacement_over_spread.len())
        .unwrap_or(0);
    let mut head = header(&["layer", "mean_along_u1", "sd_along_u1"]);
    head.extend((1..=k).map(|i| format!("displacement_over_spread_u{}", i)));
    let rows: Vec<Vec<String>> = clusters
        .iter()
        .map(|c| {
            let mut row = vec![c.t.to_string(), num(c.mean_along_u1), num(c.sd_along_u1)];
            row.extend(c.displacement_over_spread.iter().map(|&v| num(v)));
            row
        })
        .collect();
    write_csv(&out(cfg, "cluster.csv"), &head, &rows)?;

    let summary = json!({
        "n_layers": ens.n_layers(),
        "hidden_dim": d,
        "n_sequences": ens.n_sequences(),
        "null_from": bases.iter().map(|b| b.null_from).collect::<Vec<_>>(),
        "near_degenerate_layers": bases.iter().filter(|b| !b.near_degenerate.is_empty()).map(|b| b.t).collect::<Vec<_>>(),
    });
    Ok((summary, bases))
}

pub fn extrapolate(cfg: &PipelineConfig) -> CliResult<Value> {
    let ens = load_ensemble(cfg.ensemble_path()?)?;
    let bases = obtain_bases(cfg, Some(&ens))?;
    extrapolate_with(cfg, &ens, &bases).map(|(v, _)| v)
}

fn extrapolate_with(
    cfg: &PipelineConfig,
    ens: &TrajectoryEnsemble,
    bases: &[LayerBasis],
) -> CliResult<(Value, Vec<CellMoments>)> {
    let summaries = residual_grid_summaries(ens, bases, cfg.sign_alignment)?;
    write_residual_file(
        &out(cfg, RESIDUALS_FILE),
        &summaries,
        ens.n_layers(),
        ens.n_sequences(),
    )?;

    let mean = |v: &[f64]| {
        let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        if f.is_empty() {
            f64::NAN
        } else {
            f.iter().sum::<f64>() / f.len() as f64
        }
    };
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|c| {
            let abs: Vec<f64> = c.mean.iter().map(|m| m.abs()).collect();
            vec![
                c.t.to_string(),
                c.target.to_string(),
                (c.target - c.t).to_string(),
                num(mean(&abs)),
                num(mean(&c.var)),
                num(mean(&c.excess_kurtosis)),
            ]
        })
        .collect();
    write_csv(
        &out(cfg, "residual_summary.csv"),
        &header(&[
            "t",
            "target",
            "tau",
            "mean_abs_mean",
            "mean_var",
            "mean_excess_kurtosis",
        ]),
        &rows,
    )?;
    Ok((json!({ "cells": summaries.len() }), summaries))
}

fn write_residual_file(
    path: &Path,
    summaries: &[CellMoments],
    n_layers: usize,
    n_samples: usize,
) -> CliResult<()> {
    let tensors = summaries_to_tensors(summaries, n_layers)?;
    let mut meta = BTreeMap::new();
    meta.insert("n_samples".to_string(), n_samples.to_string());
    meta.insert("n_layers".to_string(), n_layers.to_string());
    let d = summaries.first().map(|c| c.dim()).unwrap_or(0);
    meta.insert("hidden_dim".to_string(), d.to_string());
    let entries: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (*n, t)).collect();
    write_container(path, &meta, &entries)?;
    Ok(())
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str) -> CliResult<usize> {
    meta.get(key)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| {
            Error::InconsistentMetadata(format!("'{}' missing or not an integer", key)).into()
        })
}

/// Rebuilds per-cell summaries from a residual file; cells whose mean is NaN
/// are outside the grid.
fn load_summaries(path: &Path) -> CliResult<(Vec<CellMoments>, usize)> {
    let reader = read_container(path)?;
    let n_samples = meta_usize(reader.metadata(), "n_samples")?;
    let [mean, var, kurt] = ["delta_mean", "delta_var", "delta_kurt"].map(|n| reader.read(n));
    let (mean, var, kurt) = (mean?, var?, kurt?);
    let shape = mean.shape.clone();
    if shape.len() != 3
        || shape[0] != shape[1]
        || shape[0] < 3
        || var.shape != shape
        || kurt.shape != shape
    {
        return Err(Error::ShapeMismatch {
            name: "delta_mean".into(),
            detail: format!("expected matching [T+1, T+1, D] tensors, got {:?}", shape),
        }
        .into());
    }
    let (size, d) = (shape[0], shape[2]);
    let (mean, var, kurt) = (mean.to_f64(), var.to_f64(), kurt.to_f64());
    let cells = grid_cells(size - 1)
        .into_iter()
        .filter_map(|(t, s)| {
            let base = (t * size + s) * d;
            let r = base..base + d;
            mean[r.clone()]
                .iter()
                .all(|v| v.is_finite())
                .then(|| CellMoments {
                    t,
                    target: s,
                    n_samples,
                    mean: mean[r.clone()].to_vec(),
                    var: var[r.clone()].to_vec(),
                    excess_kurtosis: kurt[r].to_vec(),
                })
        })
        .collect();
    Ok((cells, size - 1))
}

pub fn noise(cfg: &PipelineConfig) -> CliResult<Value> {
    let ens = cfg.ensemble.as_deref().map(load_ensemble).transpose()?;
    let bases = match &ens {
        Some(e) => Some(obtain_bases(cfg, Some(e))?),
        None => None,
    };
    let (summaries, n_layers) = match (&cfg.residuals, &ens, &bases) {
        (Some(path), _, _) => load_summaries(path)?,
        (None, Some(e), Some(b)) => (
            residual_grid_summaries(e, b, cfg.sign_alignment)?,
            e.n_layers(),
        ),
        _ => return Err(CliError::MissingInput("residuals or ensemble")),
    };
    let context = ens.as_ref().zip(bases.as_deref());
    noise_with(cfg, &summaries, n_layers, context)
}

fn noise_with(
    cfg: &PipelineConfig,
    summaries: &[CellMoments],
    n_layers: usize,
    context: Option<(&TrajectoryEnsemble, &[LayerBasis])>,
) -> CliResult<Value> {
    let opts = MomentOptions {
        coordinates: cfg.moment_coordinates.clone(),
    };
    let maps = moment_maps(summaries, n_layers, &opts)?;
    write_moment_maps(cfg, &maps, n_layers)?;
    let model = fit_variance_law(&maps.log_variance, &cfg.fit_window)?;
    write_json(&out(cfg, "noise_fit.json"), &model)?;
    plot(cfg, "variance_law.svg", || variance_law_svg(&maps, &model))?;

    let mut summary = json!({
        "alpha": model.alpha,
        "lambda": model.lambda,
        "r_squared": model.r_squared,
        "fit_cells": model.fit_window.len(),
    });
    if let Some((ens, bases)) = context {
        let (t, s) = cfg.diagnostic_cell.unwrap_or((
            cfg.fit_window.start_min.max(1),
            cfg.fit_window.start_min.max(1) + 1,
        ));
        if s <= t {
            return Err(CliError::Config(format!(
                "diagnostic_cell ({}, {}) needs t < t+τ",
                t, s
            )));
        }
        let field = residuals_with(ens, bases, t, s - t, cfg.sign_alignment)?;
        let iso = isotropy_report(&field, &cfg.isotropy)?;
        let gauss = gaussianity_check(&field, 0)?;
        write_json(
            &out(cfg, "diagnostics.json"),
            &json!({ "cell": [t, s], "isotropy": iso, "gaussianity": gauss }),
        )?;
        summary["diagnostic_cell"] = json!([t, s]);
        summary["flagged_pairs"] = json!(iso.flagged_pairs.len());
        summary["non_gaussian"] = json!(gauss.non_gaussian);
    } else {
        log::info!("no ensemble given; skipping isotropy and Gaussianity diagnostics");
    }
    Ok(summary)
}

fn write_moment_maps(cfg: &PipelineConfig, maps: &MomentMaps, n_layers: usize) -> CliResult<()> {
    let mut head = header(&["t", "target"]);
    head.extend(MomentStat::ALL.iter().map(|s| s.name().to_string()));
    let rows: Vec<Vec<String>> = grid_cells(n_layers)
        .into_iter()
        .filter(|&(t, s)| maps.log_variance.get(t, s).is_some())
        .map(|(t, s)| {
            let mut row = vec![t.to_string(), s.to_string()];
            row.extend(
                MomentStat::ALL
                    .iter()
                    .map(|&st| num(maps.get(st).get(t, s).unwrap_or(f64::NAN))),
            );
            row
        })
        .collect();
    write_csv(&out(cfg, "moment_maps.csv"), &head, &rows)?;
    let tensors = MomentStat::ALL
        .iter()
        .map(|&st| {
            let m = &maps.get(st).values;
            let data = m.transpose().iter().copied().collect();
            Tensor::f64(vec![m.nrows(), m.ncols()], data).map(|t| (st.name(), t))
        })
        .collect::<lotkit::Result<Vec<_>>>()?;
    let entries: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (*n, t)).collect();
    let mut meta = BTreeMap::new();
    meta.insert("n_layers".to_string(), n_layers.to_string());
    write_container(out(cfg, "moment_maps.lote"), &meta, &entries)?;
    let labels: Vec<usize> = (0..=n_layers).collect();
    for stat in MomentStat::ALL {
        plot(cfg, &format!("moments_{}.svg", stat.name()), || {
            heatmap(
                stat.name(),
                "target layer t+τ",
                "source layer t",
                &maps.get(stat).values,
                &labels,
                &labels,
            )
        })?;
    }
    Ok(())
}

fn variance_law_svg(maps: &MomentMaps, model: &NoiseModel) -> String {
    let cells = maps.log_variance.cells();
    let in_window: Vec<(f64, f64)> = model
        .fit_window
        .iter()
        .filter_map(|&(t, s)| maps.log_variance.get(t, s).map(|v| (s as f64, v)))
        .collect();
    let all: Vec<(f64, f64)> = cells.iter().map(|&(_, s, v)| (s as f64, v)).collect();
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.0), b.max(p.0))
        });
    let fit = vec![
        (lo, model.ln_alpha + model.lambda * lo),
        (hi, model.ln_alpha + model.lambda * hi),
    ];
    line_plot(
        "log variance against target layer",
        "target layer t+τ",
        "ln var",
        &[
            Series::line("all cells", all).markers(),
            Series::line("fit window", in_window).markers(),
            Series::line("fit", fit).dashed(),
        ],
    )
}

pub fn interp_check(cfg: &PipelineConfig) -> CliResult<Value> {
    let ens = match (&cfg.bases, &cfg.ensemble) {
        (None, Some(p)) => Some(load_ensemble(p)?),
        _ => None,
    };
    let bases = obtain_bases(cfg, ens.as_ref())?;
    interp_check_with(cfg, &bases)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn interp_check_with(cfg: &PipelineConfig, bases: &[LayerBasis]) -> CliResult<Value> {
    let d = bases[0].dim();
    let k = cfg.sde.resolved_subspace(d);
    let (drift, _) = subspace_drift(bases, cfg.simulate_from, k)?;
    let (frame, spectrum) = (&drift.frame, &drift.spectrum);
    let (a, b) = frame.domain();

    let mut knot_error = 0.0f64;
    let mut spectrum_knot_error = 0.0f64;
    for (&t, f) in frame.times().iter().zip(frame.frames()) {
        let (u, _) = frame.interpolate(t)?;
        knot_error = knot_error.max((&u - f).norm());
        let (sigma, _) = spectrum.interpolate(t)?;
        let truth = DVector::from_iterator(k, bases[t as usize].sigma.iter().take(k).copied());
        spectrum_knot_error = spectrum_knot_error.max((sigma - &truth).norm() / truth.norm());
    }

    let mut rows = Vec::with_capacity(cfg.interp_samples);
    let (mut fd_max, mut ortho_max, mut spec_fd_max) = (0.0f64, 0.0f64, 0.0f64);
    let eye = DMatrix::<f64>::identity(k, k);
    for j in 0..cfg.interp_samples {
        let mut t = a + (b - a) * (j as f64 + 0.5) / cfg.interp_samples as f64;
        // Keep the stencil inside one interval.
        if (t - t.round()).abs() < 10.0 * FD_STEP {
            t += 20.0 * FD_STEP;
        }
        let (u, u_dot) = frame.interpolate(t)?;
        let (up, _) = frame.interpolate(t + FD_STEP)?;
        let (um, _) = frame.interpolate(t - FD_STEP)?;
        let fd = rel(&((up - um) / (2.0 * FD_STEP)), &u_dot);
        let ortho = (u.transpose() * &u - &eye).norm();
        let (sigma, logd) = spectrum.interpolate(t)?;
        let (sp, _) = spectrum.interpolate(t + FD_STEP)?;
        let (sm, _) = spectrum.interpolate(t - FD_STEP)?;
        let fd_logd = (sp - sm).component_div(&sigma) / (2.0 * FD_STEP);
        let spec_fd = (&fd_logd - &logd).norm() / logd.norm().max(1e-12);
        fd_max = fd_max.max(fd);
        ortho_max = ortho_max.max(ortho);
        spec_fd_max = spec_fd_max.max(spec_fd);
        rows.push(vec![num(t), num(fd), num(ortho), num(spec_fd)]);
    }
    write_csv(
        &out(cfg, "interp_check.csv"),
        &header(&[
            "t",
            "frame_fd_rel_error",
            "orthogonality_defect",
            "log_spectrum_fd_rel_error",
        ]),
        &rows,
    )?;
    let summary = json!({
        "subspace_dim": k,
        "start_layer": cfg.simulate_from,
        "samples": cfg.interp_samples,
        "max_frame_fd_rel_error": fd_max,
        "max_orthogonality_defect": ortho_max,
        "max_log_spectrum_fd_rel_error": spec_fd_max,
        "max_frame_knot_error": knot_error,
        "max_spectrum_knot_rel_error": spectrum_knot_error,
    });
    write_json(&out(cfg, "interp_check.json"), &summary)?;
    Ok(summary)
}

pub fn simulate(cfg: &PipelineConfig) -> CliResult<Value> {
    let ens = load_ensemble(cfg.ensemble_path()?)?;
    let bases = obtain_bases(cfg, Some(&ens))?;
    simulate_with(cfg, &ens, &bases)
}

fn simulate_with(
    cfg: &PipelineConfig,
    ens: &TrajectoryEnsemble,
    bases: &[LayerBasis],
) -> CliResult<Value> {
    let t1 = cfg.simulate_to.unwrap_or(ens.n_layers());
    if t1 > ens.n_layers() || cfg.simulate_from >= t1 {
        return Err(CliError::Config(format!(
            "simulation range {}..{} must lie within 0..={}",
            cfg.simulate_from,
            t1,
            ens.n_layers()
        )));
    }
    let run = simulate_ensemble(ens, bases, &cfg.sde, cfg.simulate_from, t1)?;
    run.save(out(cfg, SIMULATED_FILE))?;

    let d = ens.hidden_dim();
    let (planes, skipped): (Vec<&(usize, usize)>, Vec<_>) =
        cfg.planes.iter().partition(|p| p.0 < d && p.1 < d);
    for p in &skipped {
        log::warn!("plane ({}, {}) exceeds D = {}; skipped", p.0, p.1, d);
    }
    let comparisons = planes
        .iter()
        .map(|&&p| compare_distributions(&run, ens, bases, p))
        .collect::<lotkit::Result<Vec<DistributionComparison>>>()?;
    let mut rows = Vec::new();
    for c in &comparisons {
        for tc in &c.per_time {
            rows.push(vec![
                c.plane.0.to_string(),
                c.plane.1.to_string(),
                tc.t.to_string(),
                num(tc.overlap_2d),
                num(tc.ks_first),
                num(tc.ks_second),
                num(tc.mean_shift_over_spread),
                num(tc.cov_rel_error),
            ]);
        }
    }
    write_csv(
        &out(cfg, "comparison.csv"),
        &header(&[
            "plane_i",
            "plane_j",
            "t",
            "overlap_2d",
            "ks_first",
            "ks_second",
            "mean_shift_over_spread",
            "cov_rel_error",
        ]),
        &rows,
    )?;
    write_json(&out(cfg, "comparison.json"), &comparisons)?;

    let last = run.saved_times.len() - 1;
    let final_layer = run.saved_times[last] as usize;
    let sim = run.cartesian(last);
    let truth = ens.positions(final_layer);
    let u = &bases[final_layer].u;
    for &&(i, j) in &planes {
        let project = |x: &DMatrix<f64>| -> Vec<(f64, f64)> {
            let (ui, uj) = (u.column(i), u.column(j));
            x.column_iter()
                .take(SCATTER_POINTS)
                .map(|c| (ui.dot(&c), uj.dot(&c)))
                .collect()
        };
        plot(cfg, &format!("overlay_u{}_u{}.svg", i + 1, j + 1), || {
            line_plot(
                &format!("layer {}: true and simulated positions", final_layer),
                &format!("u_{}", i + 1),
                &format!("u_{}", j + 1),
                &[
                    Series::line("true", project(truth)).markers(),
                    Series::line("simulated", project(&sim)).markers(),
                ],
            )
        })?;
    }
    let last_overlap: Vec<Value> = comparisons
        .iter()
        .map(|c| {
            let tc = c.per_time.last().expect("at least one saved time");
            json!({ "plane": c.plane, "t": tc.t, "overlap_2d": tc.overlap_2d })
        })
        .collect();
    Ok(json!({
        "start_layer": cfg.simulate_from,
        "end_layer": t1,
        "trajectories": run.n_trajectories(),
        "effective_dim": run.effective_dim(),
        "final_overlap": last_overlap,
    }))
}

/// Merges `logits_true` and truncated entries across files.
fn collect_logits(cfg: &PipelineConfig) -> CliResult<(Tensor, BTreeMap<usize, Tensor>, usize)> {
    if cfg.logits.is_empty() {
        return Err(CliError::MissingInput("logits"));
    }
    let mut truth: Option<Tensor> = None;
    let mut truncated = BTreeMap::new();
    let mut hidden = cfg.hidden_dim;
    for path in &cfg.logits {
        let reader = read_container(path)?;
        if hidden.is_none() {
            hidden = reader
                .metadata()
                .get("hidden_dim")
                .and_then(|v| v.trim().parse().ok());
        }
        for entry in &reader.manifest().entries {
            if entry.name == LOGITS_TRUE {
                let t = reader.read(LOGITS_TRUE)?;
                match &truth {
                    Some(prev) if *prev != t => {
                        return Err(Error::InconsistentMetadata(format!(
                            "'{}' differs between logit files",
                            LOGITS_TRUE
                        ))
                        .into())
                    }
                    Some(_) => {}
                    None => truth = Some(t),
                }
            } else if let Some(k) = entry.name.strip_prefix(LOGITS_TRUNCATED_PREFIX) {
                let k: usize = k.parse().map_err(|_| {
                    Error::MalformedManifest(format!(
                        "entry '{}' has a non-integer rank",
                        entry.name
                    ))
                })?;
                if truncated.insert(k, reader.read(&entry.name)?).is_some() {
                    return Err(Error::DuplicateName(entry.name.clone()).into());
                }
            }
        }
    }
    let truth = truth.ok_or_else(|| Error::MissingTensor(LOGITS_TRUE.into()))?;
    let hidden = hidden.ok_or_else(|| {
        Error::InconsistentMetadata("'hidden_dim' missing; set hidden_dim in the config".into())
    })?;
    Ok((truth, truncated, hidden))
}

pub fn probe_kl(cfg: &PipelineConfig) -> CliResult<Value> {
    let (truth, mut truncated, hidden) = collect_logits(cfg)?;
    if let Some(ks) = &cfg.k_grid {
        for &k in ks {
            if !truncated.contains_key(&k) {
                return Err(
                    Error::MissingTensor(format!("{}{}", LOGITS_TRUNCATED_PREFIX, k)).into(),
                );
            }
        }
        truncated.retain(|k, _| ks.contains(k));
    }
    let curve = kl_curve(&truncated, &truth, hidden)?;
    let rows: Vec<Vec<String>> = curve
        .k_values
        .iter()
        .zip(&curve.mean_kl)
        .map(|(k, kl)| vec![k.to_string(), num(*kl), num(curve.baseline_kl)])
        .collect();
    write_csv(
        &out(cfg, "kl_curve.csv"),
        &header(&["k", "mean_kl", "baseline_kl"]),
        &rows,
    )?;
    write_json(&out(cfg, "kl_curve.json"), &curve)?;
    plot(cfg, "kl_curve.svg", || {
        let pts: Vec<(f64, f64)> = curve
            .k_values
            .iter()
            .zip(&curve.mean_kl)
            .map(|(&k, &kl)| ((k as f64).log2(), kl))
            .collect();
        let span = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                (a.min(p.0), b.max(p.0))
            });
        line_plot(
            "KL of truncated against true next-token distribution",
            "log2 K",
            "mean KL (nats)",
            &[
                Series::line("truncated", pts),
                Series::line(
                    "cross-sequence baseline",
                    vec![(span.0, curve.baseline_kl), (span.1, curve.baseline_kl)],
                )
                .dashed(),
            ],
        )
    })?;
    Ok(json!({
        "k_values": curve.k_values,
        "mean_kl": curve.mean_kl,
        "baseline_kl": curve.baseline_kl,
    }))
}

pub fn probe_sep(cfg: &PipelineConfig) -> CliResult<Value> {
    let a = load_ensemble(
        cfg.probe_a
            .as_deref()
            .ok_or(CliError::MissingInput("probe_a"))?,
    )?;
    let b = load_ensemble(
        cfg.probe_b
            .as_deref()
            .ok_or(CliError::MissingInput("probe_b"))?,
    )?;
    let rep = separability_sweep(&a, &b, cfg.split_ratio, cfg.seed)?;
    let rows: Vec<Vec<String>> = rep
        .layers
        .iter()
        .zip(&rep.accuracies)
        .map(|(l, acc)| vec![l.to_string(), num(*acc)])
        .collect();
    write_csv(
        &out(cfg, "separability.csv"),
        &header(&["layer", "accuracy"]),
        &rows,
    )?;
    write_json(&out(cfg, "separability.json"), &rep)?;
    plot(cfg, "separability.svg", || {
        let pts = rep
            .layers
            .iter()
            .zip(&rep.accuracies)
            .map(|(&l, &acc)| (l as f64, acc))
            .collect();
        let chance = vec![
            (rep.layers[0] as f64, 0.5),
            (*rep.layers.last().unwrap() as f64, 0.5),
        ];
        line_plot(
            "linear probe accuracy by layer",
            "layer",
            "test accuracy",
            &[
                Series::line("perceptron", pts),
                Series::line("chance", chance).dashed(),
            ],
        )
    })?;
    let best = rep
        .accuracies
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(json!({ "n_train": rep.n_train, "n_test": rep.n_test, "best_accuracy": best }))
}

/// Runs every stage whose inputs are configured.
pub fn report(cfg: &PipelineConfig) -> CliResult<Value> {
    let mut stages = serde_json::Map::new();
    if let Some(path) = &cfg.ensemble {
        let ens = load_ensemble(path)?;
        let (summary, computed) = svd_with(cfg, &ens)?;
        stages.insert("svd".into(), summary);
        let bases = match &cfg.bases {
            Some(_) => obtain_bases(cfg, Some(&ens))?,
            None => computed,
        };
        let (summary, summaries) = extrapolate_with(cfg, &ens, &bases)?;
        stages.insert("extrapolate".into(), summary);
        stages.insert(
            "noise".into(),
            noise_with(cfg, &summaries, ens.n_layers(), Some((&ens, &bases)))?,
        );
        stages.insert("interp_check".into(), interp_check_with(cfg, &bases)?);
        stages.insert("simulate".into(), simulate_with(cfg, &ens, &bases)?);
    } else {
        if let Some(path) = &cfg.residuals {
            let (summaries, n_layers) = load_summaries(path)?;
            stages.insert("noise".into(), noise_with(cfg, &summaries, n_layers, None)?);
        }
        if let Some(path) = &cfg.bases {
            stages.insert(
                "interp_check".into(),
                interp_check_with(cfg, &load_bases(path)?)?,
            );
        }
    }
    if !cfg.logits.is_empty() {
        stages.insert("probe_kl".into(), probe_kl(cfg)?);
    }
    if cfg.probe_a.is_some() || cfg.probe_b.is_some() {
        stages.insert("probe_sep".into(), probe_sep(cfg)?);
    }
    if stages.is_empty() {
        return Err(CliError::MissingInput(
            "any of ensemble, residuals, bases, logits, probe_a/probe_b",
        ));
    }
    let report = Value::Object(stages);
    write_json(&out(cfg, "report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    /// Noiseless rotating and stretching ensemble.
    Rigid,
    /// Transport plus Gaussian noise with an exponential variance law.
    Noisy,
    /// Independent anisotropic Gaussian clouds.
    Cloud,
    /// Two classes that separate from a gate layer on.
    Gated,
    /// True and rank-truncated logits of increasing fidelity.
    Logits,
    /// Residual summaries drawn from an exact exponential variance law.
    Law,
}

pub struct SynthSpec {
    pub kind: SynthKind,
    pub dim: usize,
    pub sequences: usize,
    pub layers: usize,
    pub seed: u64,
    pub alpha: f64,
    pub lambda: f64,
    pub gate: usize,
    pub offset: f64,
    pub vocab: usize,
}

/// Writes synthetic inputs into `dir`; returns the written paths.
pub fn synth(spec: &SynthSpec, dir: &Path) -> CliResult<Vec<PathBuf>> {
    use lotkit::synthetic::*;
    ensure_dir(dir)?;
    let single = |ens: TrajectoryEnsemble| -> CliResult<Vec<PathBuf>> {
        let p = dir.join("ensemble.lote");
        ens.save(&p, DType::F64)?;
        Ok(vec![p])
    };
    match spec.kind {
        SynthKind::Rigid => {
            single(rigid_ensemble(spec.dim, spec.sequences, spec.layers, spec.seed)?.0)
        }
        SynthKind::Noisy => single(noisy_transport_ensemble(
            spec.dim,
            spec.sequences,
            spec.layers,
            spec.alpha,
            spec.lambda,
            spec.seed,
        )?),
        SynthKind::Cloud => single(gaussian_cloud_ensemble(
            spec.dim,
            spec.sequences,
            spec.layers,
            spec.seed,
        )?),
        SynthKind::Gated => {
            let (a, b) = gated_pair(
                spec.dim,
                spec.sequences,
                spec.layers,
                spec.gate,
                spec.offset,
                spec.seed,
            )?;
            let (pa, pb) = (dir.join("probe_a.lote"), dir.join("probe_b.lote"));
            a.save(&pa, DType::F64)?;
            b.save(&pb, DType::F64)?;
            Ok(vec![pa, pb])
        }
        SynthKind::Law => {
            let summaries = law_residual_summaries(
                spec.layers,
                spec.dim,
                spec.sequences,
                spec.alpha,
                spec.lambda,
                spec.seed,
            );
            let p = dir.join(RESIDUALS_FILE);
            write_residual_file(&p, &summaries, spec.layers, spec.sequences)?;
            Ok(vec![p])
        }
        SynthKind::Logits => {
            let mut r = rng(spec.seed);
            let truth = gaussian_matrix(spec.sequences, spec.vocab, &mut r) * 2.0;
            let noise = gaussian_matrix(spec.sequences, spec.vocab, &mut r);
            let to_tensor = |m: &DMatrix<f64>| {
                let data = m
                    .row_iter()
                    .flat_map(|row| row.iter().copied().collect::<Vec<_>>())
                    .collect();
                Tensor::f64(vec![m.nrows(), m.ncols()], data)
            };
            let mut tensors = vec![(LOGITS_TRUE.to_string(), to_tensor(&truth)?)];
            for k in lotkit::probes::default_k_grid(spec.dim) {
                // Error shrinks linearly to zero at full rank.
                let scale = 1.0 - k as f64 / spec.dim as f64;
                tensors.push((
                    lotkit::probes::truncated_logits_name(k),
                    to_tensor(&(&truth + &noise * scale))?,
                ));
            }
            let mut meta = BTreeMap::new();
            meta.insert("hidden_dim".to_string(), spec.dim.to_string());
            meta.insert("source".to_string(), "synthetic_logits".to_string());
            let p = dir.join("logits.lote");
            let entries: Vec<(&str, &Tensor)> =
                tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
            write_container(&p, &meta, &entries)?;
            Ok(vec![p])
        }
    }
}
