use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use qsm_core::classical::{cosmos_invert, tkd_invert, OrientationSet, TkdConfig};
use qsm_core::dipole::{dipole_kernel, Orientation};
use qsm_core::grid::{Mask3D, Volume3D};
use qsm_core::io::{read_volume, write_atomic, write_volume, Checkpoint};
use qsm_core::metrics::{evaluate, MetricsReport};
use qsm_core::phantom::{build_phantom, orientation_sweep, synth_orientation_set, NoiseSpec};
use qsm_core::siren::synthesize_kernel;
use qsm_core::trainer::{alternate_train, loss_csv, recon_input, TrainSample};

use crate::config::{triple_dir_name, ExperimentConfig};
use crate::error::{CliError, CliResult};

pub fn parse_orientation(s: &str) -> Result<Orientation, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let v: [f64; 3] = parts
        .try_into()
        .map_err(|_| format!("expected three comma-separated numbers, got {s:?}"))?;
    Orientation::from_direction(v).map_err(|e| e.to_string())
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::file(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::from(e).context(path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::from(e).context(path.display()))
}

fn load_volume(path: &Path) -> CliResult<Volume3D> {
    read_volume(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn save_volume(path: &Path, v: &Volume3D) -> CliResult<()> {
    write_volume(path, v).map_err(|e| CliError::from(e).context(path.display()))
}

fn load_mask(path: Option<&Path>) -> CliResult<Option<Mask3D>> {
    path.map(|p| load_volume(p).map(|v| Mask3D::from_volume(&v))).transpose()
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::state(format!("checkpoint {}: {e}", path.display())))
}

/// Metrics against `reference` if one is given, written next to the output.
fn maybe_metrics(
    estimate: &Volume3D,
    reference: Option<&Path>,
    mask: Option<&Mask3D>,
    out: &Path,
) -> CliResult<Option<MetricsReport>> {
    let Some(reference) = reference else { return Ok(None) };
    let reference = load_volume(reference)?;
    let report = evaluate(estimate, &reference, mask)?;
    write_json(&out.join("metrics.json"), &report)?;
    Ok(Some(report))
}

pub fn cmd_phantom(cfg: &ExperimentConfig, out: &Path) -> CliResult<(Volume3D, Mask3D)> {
    let (chi, mask) = build_phantom(&cfg.phantom)?;
    ensure_dir(out)?;
    save_volume(&out.join("chi.qsmv"), &chi)?;
    save_volume(&out.join("mask.qsmv"), &mask.to_volume())?;
    Ok((chi, mask))
}

/// Field for `orientation`, with the configured noise, zeroed outside `mask`.
pub fn cmd_forward(
    chi_path: &Path,
    mask_path: Option<&Path>,
    orientation: Orientation,
    noise: &NoiseSpec,
    out: &Path,
) -> CliResult<Volume3D> {
    let chi = load_volume(chi_path)?;
    let mask = load_mask(mask_path)?;
    if let Some(m) = &mask {
        chi.grid().ensure_same(m.grid())?;
    }
    let set = synth_orientation_set(&chi, &[orientation], noise)?;
    let mut field = set.entries()[0].1.clone();
    if let Some(m) = &mask {
        field = Volume3D::new(
            *field.grid(),
            field.data().iter().zip(m.flags()).map(|(v, &f)| if f { *v } else { 0.0 }).collect(),
        )?;
    }
    ensure_dir(out)?;
    save_volume(&out.join("field.qsmv"), &field)?;
    Ok(field)
}

pub fn cmd_tkd(
    field_path: &Path,
    orientation: Orientation,
    threshold: f64,
    reference: Option<&Path>,
    mask_path: Option<&Path>,
    out: &Path,
) -> CliResult<(Volume3D, Option<MetricsReport>)> {
    let field = load_volume(field_path)?;
    let mask = load_mask(mask_path)?;
    let chi = tkd_invert(&field, &dipole_kernel(field.grid(), orientation), &TkdConfig::new(threshold)?)?;
    ensure_dir(out)?;
    save_volume(&out.join("chi_tkd.qsmv"), &chi)?;
    let report = maybe_metrics(&chi, reference, mask.as_ref(), out)?;
    Ok((chi, report))
}

pub fn cmd_cosmos(
    fields: &[PathBuf],
    orientations: &[Orientation],
    damping: f64,
    reference: Option<&Path>,
    mask_path: Option<&Path>,
    out: &Path,
) -> CliResult<(Volume3D, Option<MetricsReport>)> {
    if fields.len() != orientations.len() {
        return Err(CliError::config(format!(
            "{} field files but {} orientations",
            fields.len(),
            orientations.len()
        )));
    }
    let entries = orientations
        .iter()
        .zip(fields)
        .map(|(o, p)| load_volume(p).map(|v| (*o, v)))
        .collect::<CliResult<Vec<_>>>()?;
    let mask = load_mask(mask_path)?;
    let chi = cosmos_invert(&OrientationSet::new(entries)?, damping)?;
    ensure_dir(out)?;
    save_volume(&out.join("chi_cosmos.qsmv"), &chi)?;
    let report = maybe_metrics(&chi, reference, mask.as_ref(), out)?;
    Ok((chi, report))
}

pub fn cmd_metrics(x: &Path, reference: &Path, mask_path: Option<&Path>, out: Option<&Path>) -> CliResult<MetricsReport> {
    let x = load_volume(x)?;
    let reference = load_volume(reference)?;
    let mask = load_mask(mask_path)?;
    let report = evaluate(&x, &reference, mask.as_ref())?;
    if let Some(out) = out {
        ensure_dir(out)?;
        write_json(&out.join("metrics.json"), &report)?;
    }
    Ok(report)
}

/// Writes the network's kernel for `orientation` when a checkpoint is
/// given, else the analytic kernel.
pub fn cmd_kernel_export(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    orientation: Orientation,
    like: Option<&Path>,
    out: &Path,
) -> CliResult<Volume3D> {
    let grid = match like {
        Some(p) => *load_volume(p)?.grid(),
        None => cfg.phantom.grid,
    };
    let kernel = match checkpoint {
        Some(p) => synthesize_kernel(&load_checkpoint(p)?.siren, &grid, orientation),
        None => dipole_kernel(&grid, orientation),
    };
    let v = kernel.to_volume();
    ensure_dir(out)?;
    save_volume(&out.join("kernel.qsmv"), &v)?;
    Ok(v)
}

/// Phantom, mask, and one training sample per configured orientation.
pub fn training_data(cfg: &ExperimentConfig) -> CliResult<(Volume3D, Mask3D, Vec<TrainSample>)> {
    let (chi, mask) = build_phantom(&cfg.phantom)?;
    let set = synth_orientation_set(&chi, &cfg.orientations, &cfg.noise)?;
    let data = set
        .entries()
        .iter()
        .map(|(o, f)| TrainSample {
            field: f.clone(),
            chi_label: chi.clone(),
            orientation: *o,
        })
        .collect();
    Ok((chi, mask, data))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub w_model: f64,
    pub w_grad: f64,
    pub w_dipole: f64,
    pub metrics: MetricsReport,
    #[serde(skip)]
    pub dir: PathBuf,
    #[serde(skip)]
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<SweepRow>,
    pub baseline: MetricsReport,
    pub best: usize,
}

pub const TABLE_HEADER: &str = "w_model,w_grad,w_dipole,hfen,nrmse,ssim,psnr,mask_voxels";

fn completed(dir: &Path, hash: &str) -> Option<MetricsReport> {
    let stored = std::fs::read_to_string(dir.join("config.sha256")).ok()?;
    if stored.trim() != hash {
        return None;
    }
    serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).ok()?).ok()
}

fn train_triple(
    run: &ExperimentConfig,
    data: &[TrainSample],
    chi: &Volume3D,
    mask: &Mask3D,
    final_dir: &Path,
    staging: &Path,
) -> CliResult<MetricsReport> {
    let state = alternate_train(data.to_vec(), run.hyper_params, run.train.clone(), run.steps, run.seed)?;
    let first = &data[0];
    let chi_hat = state.reconstruct(&first.field, first.orientation)?;
    let report = evaluate(&chi_hat, chi, Some(mask))?;
    if staging.exists() {
        std::fs::remove_dir_all(staging).map_err(|e| CliError::file(format!("{}: {e}", staging.display())))?;
    }
    ensure_dir(staging)?;
    write_text(&staging.join("config.json"), &(run.to_json() + "\n"))?;
    write_text(&staging.join("loss.csv"), &loss_csv(state.history()))?;
    write_json(&staging.join("metrics.json"), &report)?;
    save_volume(&staging.join("chi_hat.qsmv"), &chi_hat)?;
    save_volume(&staging.join("kernel.qsmv"), &state.predicted_kernel(first.orientation).to_volume())?;
    Checkpoint::from_state(&state)
        .save(&staging.join("checkpoint.ckpt"))
        .map_err(CliError::from)?;
    // Written last: its presence marks the directory as complete.
    write_text(&staging.join("config.sha256"), &(run.run_hash() + "\n"))?;
    if final_dir.exists() {
        std::fs::remove_dir_all(final_dir).map_err(|e| CliError::file(format!("{}: {e}", final_dir.display())))?;
    }
    if let Err(e) = std::fs::rename(staging, final_dir) {
        // Another worker finished the same combination first.
        if completed(final_dir, &run.run_hash()).is_none() {
            return Err(CliError::file(format!("{}: {e}", final_dir.display())));
        }
        let _ = std::fs::remove_dir_all(staging);
    }
    Ok(report)
}

/// Trains every loss-weight combination into its own directory under `out`,
/// skipping directories that already hold a finished run of the same config.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, threads: usize) -> CliResult<TrainOutcome> {
    let (chi, mask, data) = training_data(cfg)?;
    ensure_dir(out)?;
    let triples = cfg.weight_triples();
    let results: Vec<Mutex<Option<CliResult<SweepRow>>>> = triples.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = |id: usize| loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= triples.len() {
            break;
        }
        let t = triples[i];
        let run = cfg.for_triple(t);
        let dir = out.join(triple_dir_name(t));
        let hash = run.run_hash();
        let result = match completed(&dir, &hash) {
            Some(metrics) => {
                eprintln!("skip {} (already trained)", dir.display());
                Ok((metrics, true))
            }
            None => {
                eprintln!("train {} ({} steps)", dir.display(), run.steps);
                let staging = out.join(format!(".staging-{}-{}-{id}", triple_dir_name(t), std::process::id()));
                train_triple(&run, &data, &chi, &mask, &dir, &staging).map(|m| (m, false))
            }
        };
        let row = result.map(|(metrics, skipped)| SweepRow {
            w_model: t[0],
            w_grad: t[1],
            w_dipole: t[2],
            metrics,
            dir,
            skipped,
        });
        *results[i].lock().expect("result slot") = Some(row);
    };
    let workers = threads.clamp(1, triples.len().max(1));
    std::thread::scope(|s| {
        for id in 1..workers {
            let w = &worker;
            s.spawn(move || w(id));
        }
        worker(0);
    });
    let rows = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every combination visited"))
        .collect::<CliResult<Vec<_>>>()?;

    let first = &data[0];
    let tkd = tkd_invert(
        &first.field,
        &dipole_kernel(first.field.grid(), first.orientation),
        &TkdConfig::new(cfg.hyper_params.t_tkd)?,
    )?;
    let baseline = evaluate(&tkd, &chi, Some(&mask))?;
    write_json(&out.join("baseline_tkd.json"), &baseline)?;

    let mut table = String::from(TABLE_HEADER);
    table.push('\n');
    for r in &rows {
        table.push_str(&format!("{},{},{},{}\n", r.w_model, r.w_grad, r.w_dipole, r.metrics.csv_row()));
    }
    write_text(&out.join("table.csv"), &table)?;
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.metrics.ssim > rows[best].metrics.ssim {
            best = i;
        }
    }
    write_json(&out.join("best.json"), &rows[best])?;
    Ok(TrainOutcome { rows, baseline, best })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrientationRow {
    pub orientation: [f64; 3],
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spread {
    pub metric: &'static str,
    pub min: f64,
    pub max: f64,
    pub spread: f64,
}

pub const ORIENTATION_HEADER: &str = "bx,by,bz,hfen,nrmse,ssim,psnr";

pub fn spreads(rows: &[OrientationRow]) -> Vec<Spread> {
    let pick: [(&'static str, fn(&MetricsReport) -> f64); 4] = [
        ("hfen", |m| m.hfen),
        ("nrmse", |m| m.nrmse),
        ("ssim", |m| m.ssim),
        ("psnr", |m| m.psnr),
    ];
    pick.iter()
        .map(|(name, f)| {
            let vals: Vec<f64> = rows.iter().map(|r| f(&r.metrics)).collect();
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Spread {
                metric: name,
                min,
                max,
                spread: max - min,
            }
        })
        .collect()
}

/// Reconstructs the phantom from each sweep orientation with the frozen
/// networks of `checkpoint`.
pub fn cmd_sweep_orientations(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
    spread: bool,
) -> CliResult<(Vec<OrientationRow>, Option<Vec<Spread>>)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (chi, mask) = build_phantom(&cfg.phantom)?;
    let s = &cfg.orientation_sweep;
    let orients = orientation_sweep(s.count, s.cap_deg, s.seed)?;
    let mut rows = Vec::with_capacity(orients.len());
    for o in orients {
        let field = synth_orientation_set(&chi, &[o], &cfg.noise)?.entries()[0].1.clone();
        let input = recon_input(&field, o, &ckpt.hyper_params, ckpt.train_config.recon_input)?;
        let chi_hat = ckpt.recon.predict(&input);
        rows.push(OrientationRow {
            orientation: o.vector(),
            metrics: evaluate(&chi_hat, &chi, Some(&mask))?,
        });
    }
    ensure_dir(out)?;
    let mut csv = String::from(ORIENTATION_HEADER);
    csv.push('\n');
    for r in &rows {
        let m = &r.metrics;
        let row = m.csv_row();
        let metrics: Vec<&str> = row.split(',').take(4).collect();
        let [x, y, z] = r.orientation;
        csv.push_str(&format!("{x:e},{y:e},{z:e},{}\n", metrics.join(",")));
    }
    write_text(&out.join("orientations.csv"), &csv)?;
    let spread = spread.then(|| spreads(&rows));
    if let Some(sp) = &spread {
        let mut text = String::from("metric,min,max,spread\n");
        for s in sp {
            text.push_str(&format!("{},{:e},{:e},{:e}\n", s.metric, s.min, s.max, s.spread));
        }
        write_text(&out.join("spread.csv"), &text)?;
    }
    Ok((rows, spread))
}
