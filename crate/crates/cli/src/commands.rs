//! The workflows behind each subcommand. All artifacts live under one run directory:
//!
//! ```text
//! run/config.toml              normalized copy of the config
//! run/frames/frame_NNN.rf      training series (+ .json sidecars)
//! run/frames/eval.rf           cyst phantom used for contrast
//! run/frames/points.rf         point targets used for FWHM
//! run/images/<frame>_<method>.bmode / .pgm
//! run/model/checkpoint.ckpt, loss.csv, summary.json
//! run/eval/contrast.csv, fwhm.csv, similarity.csv, report.json
//! run/bench/timing.csv
//! run/manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use beamlab::evalbench::{benchmark, BenchResult, BenchTarget, MetricsReport};
use beamlab::io::{read_bmode, read_checkpoint, read_rf_frame, write_bmode, write_checkpoint, write_pgm, write_rf_frame};
use beamlab::neural::UNetParams;
use beamlab::pipeline::{BModeImage, Bypass, ImagingContext, Method, PatchTransform};
use beamlab::training::{build_dataset, das_summary, train, zero_network_baseline, EvalSummary};
use beamlab::RfFrame;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{sha256_hex, Manifest};

pub const CHECKPOINT: &str = "model/checkpoint.ckpt";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes the normalized config into the run and records `outputs` in the manifest.
fn finish(cfg: &RunConfig, run: &Path, mut outputs: Vec<PathBuf>) -> CliResult<Vec<PathBuf>> {
    let text = cfg.to_toml()?;
    let cfg_path = run.join("config.toml");
    write_text(&cfg_path, &text)?;
    outputs.push(cfg_path);
    Manifest::record(run, &sha256_hex(text.as_bytes()), &outputs)?;
    Ok(outputs)
}

fn with_sidecar(p: PathBuf) -> [PathBuf; 2] {
    let side = beamlab::io::sidecar_path(&p);
    [p, side]
}

/// Frame files in `run/frames` whose stem starts with `prefix`, sorted by name.
pub fn list_frames(run: &Path, prefix: &str) -> CliResult<Vec<PathBuf>> {
    let dir = run.join("frames");
    let mut out: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "rf")
                && p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.starts_with(prefix))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::Io(format!("no `{prefix}*.rf` frames in {}; run `simulate` first", dir.display())));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Series frames live on the training grid, everything else on the evaluation grid.
fn context_for(cfg: &RunConfig, frame: &Path) -> CliResult<ImagingContext> {
    if stem(frame).starts_with("frame_") {
        cfg.context()
    } else {
        cfg.eval_context()
    }
}

/// Training series plus the evaluation and point-target frames.
pub fn cmd_simulate(cfg: &RunConfig, run: &Path) -> CliResult<Vec<PathBuf>> {
    let dir = run.join("frames");
    ensure_dir(&dir)?;
    let mut outputs = Vec::new();
    let mut save = |frame: &RfFrame, name: String| -> CliResult<()> {
        let p = dir.join(name);
        write_rf_frame(frame, &p)?;
        outputs.extend(with_sidecar(p));
        Ok(())
    };
    for (i, f) in cfg.simulate_series()?.iter().enumerate() {
        save(f, format!("frame_{i:03}.rf"))?;
    }
    save(&cfg.simulate_eval()?, "eval.rf".into())?;
    if !cfg.eval.point_targets.is_empty() {
        save(&cfg.simulate_points()?, "points.rf".into())?;
    }
    finish(cfg, run, outputs)
}

fn save_image(run: &Path, image: &BModeImage, name: &str) -> CliResult<Vec<PathBuf>> {
    let dir = run.join("images");
    ensure_dir(&dir)?;
    let data = dir.join(format!("{name}.bmode"));
    let pgm = dir.join(format!("{name}.pgm"));
    write_bmode(image, &data)?;
    write_pgm(&image.values, &pgm)?;
    let [a, b] = with_sidecar(data);
    Ok(vec![a, b, pgm])
}

/// DAS or MVDR images of every frame in the run.
pub fn cmd_beamform(cfg: &RunConfig, run: &Path, method: Method) -> CliResult<Vec<PathBuf>> {
    let mvdr = cfg.mvdr()?;
    let mut outputs = Vec::new();
    for path in list_frames(run, "")? {
        let ctx = context_for(cfg, &path)?;
        let delayed = ctx.delay(&read_rf_frame(&path)?)?;
        let image = match method {
            Method::Das => ctx.das_image(&delayed)?,
            Method::Mvdr => ctx.mvdr_image(&delayed, &mvdr)?,
            Method::Learned => return Err(CliError::Config("beamform takes das or mvdr; use `infer` for learned".into())),
        };
        outputs.extend(save_image(run, &image, &format!("{}_{}", stem(&path), method.as_str()))?);
    }
    finish(cfg, run, outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dataset_sha256: String,
    pub n_train: usize,
    pub n_val: usize,
    pub zero_network: EvalSummary,
    pub das_as_prediction: EvalSummary,
    pub initial: EvalSummary,
    pub best: EvalSummary,
    pub best_step: u64,
    pub steps_run: u64,
    pub aborted: Option<String>,
}

/// Trains on the `frame_*` series and writes the best checkpoint and the loss curve.
pub fn cmd_train(cfg: &RunConfig, run: &Path) -> CliResult<TrainSummary> {
    let ctx = cfg.context()?;
    let tcfg = cfg.train_config()?;
    let frames = list_frames(run, "frame_")?.iter().map(|p| read_rf_frame(p)).collect::<Result<Vec<_>, _>>()?;
    let ds = build_dataset(&frames, &ctx, &cfg.mvdr()?, cfg.training.train_fraction)?;
    let outcome = train(&ds, &ctx, cfg.arch(), &tcfg)?;
    let summary = TrainSummary {
        dataset_sha256: ds.hash(),
        n_train: ds.train.len(),
        n_val: ds.val.len(),
        zero_network: zero_network_baseline(&ds, &ctx, cfg.arch(), &tcfg.weights)?,
        das_as_prediction: das_summary(&ds, &ds.val, &tcfg.weights)?,
        initial: outcome.initial_val,
        best: outcome.best_val,
        best_step: outcome.best_step,
        steps_run: outcome.steps_run,
        aborted: outcome.aborted.clone(),
    };
    let dir = run.join("model");
    ensure_dir(&dir)?;
    let ckpt = run.join(CHECKPOINT);
    write_checkpoint(&outcome.best, tcfg.seed, outcome.best_step, &ckpt)?;
    let curve = dir.join("loss.csv");
    write_csv(&curve, &outcome.curve)?;
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    let [a, b] = with_sidecar(ckpt);
    finish(cfg, run, vec![a, b, curve, summary_path])?;
    if let Some(reason) = outcome.aborted {
        return Err(CliError::Numerical(format!("training aborted ({reason}); best checkpoint kept")));
    }
    Ok(summary)
}

fn load_params(run: &Path, checkpoint: Option<&Path>) -> CliResult<UNetParams> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.join(CHECKPOINT));
    Ok(read_checkpoint(&path)?.0)
}

/// Learned images of every frame. With `identity` the network is bypassed,
/// which reproduces the DAS images exactly.
pub fn cmd_infer(cfg: &RunConfig, run: &Path, checkpoint: Option<&Path>, identity: bool) -> CliResult<Vec<PathBuf>> {
    let params;
    let transform: &dyn PatchTransform = if identity {
        &Bypass
    } else {
        params = load_params(run, checkpoint)?;
        if params.arch.in_channels != cfg.array.n_elements {
            return Err(CliError::Config("checkpoint element count differs from the config".into()));
        }
        &params
    };
    let tag = if identity { "identity" } else { Method::Learned.as_str() };
    let mut outputs = Vec::new();
    for path in list_frames(run, "")? {
        let image = context_for(cfg, &path)?.infer_image(&read_rf_frame(&path)?, transform)?;
        outputs.extend(save_image(run, &image, &format!("{}_{tag}", stem(&path)))?);
    }
    finish(cfg, run, outputs)
}

fn existing_images(run: &Path, frame: &str) -> CliResult<Vec<BModeImage>> {
    let mut out = Vec::new();
    for m in [Method::Learned, Method::Mvdr, Method::Das] {
        let p = run.join("images").join(format!("{frame}_{}.bmode", m.as_str()));
        if p.exists() {
            out.push(read_bmode(&p)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ContrastCsvRow {
    depth_mm: f64,
    learned: Option<f64>,
    mvdr: Option<f64>,
    das: Option<f64>,
}

/// Contrast per cyst depth and method from the `eval` images, FWHM from the
/// `points` images, and similarity to MVDR.
pub fn cmd_eval(cfg: &RunConfig, run: &Path) -> CliResult<MetricsReport> {
    let cysts = existing_images(run, "eval")?;
    if cysts.is_empty() {
        return Err(CliError::Io("no eval_<method>.bmode images; run beamform/infer first".into()));
    }
    let mut report = MetricsReport::evaluate(&cysts, &cfg.rois(), cfg.eval.roi_mode, &[])?;
    let points: Vec<(f64, f64)> = cfg.eval.point_targets.iter().map(|p| (p.x, p.z)).collect();
    let point_images = existing_images(run, "points")?;
    if !points.is_empty() && !point_images.is_empty() {
        report.fwhm = MetricsReport::evaluate(&point_images, &[], cfg.eval.roi_mode, &points)?.fwhm;
    }
    let dir = run.join("eval");
    ensure_dir(&dir)?;
    let table: Vec<ContrastCsvRow> = report
        .contrast_table()
        .into_iter()
        .map(|r| ContrastCsvRow { depth_mm: r.depth_mm, learned: r.learned, mvdr: r.mvdr, das: r.das })
        .collect();
    let paths = [dir.join("contrast.csv"), dir.join("fwhm.csv"), dir.join("similarity.csv"), dir.join("report.json")];
    write_csv(&paths[0], &table)?;
    write_csv(&paths[1], &report.fwhm)?;
    write_csv(&paths[2], &report.similarity)?;
    write_json(&paths[3], &report)?;
    finish(cfg, run, paths.to_vec())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingCsvRow {
    method: String,
    stage: String,
    median_ms: f64,
    min_ms: f64,
    repetitions: usize,
    threads: usize,
}

/// Times DAS, MVDR and the learned pipeline on the evaluation frame. Without
/// a checkpoint the network is freshly initialized; its weights do not affect timing.
pub fn cmd_bench(cfg: &RunConfig, run: &Path, checkpoint: Option<&Path>, threads: Option<usize>) -> CliResult<Vec<BenchResult>> {
    let ctx = cfg.eval_context()?;
    let mvdr = cfg.mvdr()?;
    let eval_path = run.join("frames/eval.rf");
    let frame = if eval_path.exists() { read_rf_frame(&eval_path)? } else { cfg.simulate_eval()? };
    let params = match checkpoint {
        Some(p) => read_checkpoint(p)?.0,
        None if run.join(CHECKPOINT).exists() => load_params(run, None)?,
        None => UNetParams::init(cfg.arch(), cfg.training.seed)?,
    };
    let threads = threads.unwrap_or(cfg.eval.bench_threads);
    let reps = cfg.eval.bench_repetitions;
    let results = [BenchTarget::Das, BenchTarget::Mvdr(&mvdr), BenchTarget::Learned(&params)]
        .into_iter()
        .map(|t| benchmark(&ctx, t, &frame, reps, threads))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<TimingCsvRow> = results
        .iter()
        .flat_map(|r| {
            r.stages.iter().map(move |s| TimingCsvRow {
                method: r.method.as_str().into(),
                stage: s.stage.clone(),
                median_ms: s.median_ms,
                min_ms: s.min_ms,
                repetitions: r.repetitions,
                threads: r.threads,
            })
        })
        .collect();
    let dir = run.join("bench");
    ensure_dir(&dir)?;
    let path = dir.join("timing.csv");
    write_csv(&path, &rows)?;
    finish(cfg, run, vec![path])?;
    Ok(results)
}
