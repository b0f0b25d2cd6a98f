//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use beamlab::evalbench::{contrast_ratio_envelope, fwhm_lateral, linear_envelope};
use beamlab::io::{
    read_checkpoint, read_delayed, read_rf_frame, sidecar_path, write_checkpoint, write_delayed, write_rf_frame,
};
use beamlab::mvdr::distortionless_residuals;
use beamlab::{Bypass, Method, RoiMode, UNetParams};
use beamlab_cli::commands::{cmd_beamform, cmd_bench, cmd_eval, cmd_infer, cmd_simulate, cmd_train, list_frames, CHECKPOINT};
use beamlab_cli::RunConfig;

type Outcome = Result<String, String>;

fn preset(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let reports = support::all_gradient_reports(100);
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| format!("{} {:.1e}/{:.0e}", r.name, r.max_rel_err, r.tol)).collect::<Vec<_>>();
    let msg = format!("{} ops x 100 draws in {secs:.1} s; {}", reports.len(), worst.join(", "));
    if reports.iter().all(|r| r.passed() && r.draws >= 100) && secs < 60.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn mvdr_oracle() -> Outcome {
    let oracle = support::mvdr_oracle_error(200);
    let heavy = support::heavy_loading_error();
    let mut worst: f64 = 0.0;
    let mut pixels = 0;
    for cfg in [preset("toy.toml"), preset("paper-scale.toml")] {
        let ctx = cfg.eval_context().map_err(fail)?;
        let frame = cfg.simulate_points().map_err(fail)?;
        let delayed = ctx.delay(&frame).map_err(fail)?;
        let r = distortionless_residuals(delayed.data.view(), &cfg.mvdr().map_err(fail)?).map_err(fail)?;
        pixels += r.len();
        worst = r.iter().fold(worst, |m, &v| m.max(v));
    }
    let msg = format!("brute force {oracle:.1e}, heavy loading {heavy:.1e}, |a^T w - 1| <= {worst:.1e} over {pixels} pixels");
    if oracle < 1e-12 && heavy < 1e-3 && worst < 1e-8 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn identity(run: &Path) -> Outcome {
    let cfg = preset("toy.toml");
    let t = Instant::now();
    cmd_beamform(&cfg, run, Method::Das).map_err(fail)?;
    cmd_infer(&cfg, run, None, true).map_err(fail)?;
    let mut frames = 0;
    for path in list_frames(run, "").map_err(fail)? {
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let images = run.join("images");
        let das = fs::read(images.join(format!("{stem}_das.bmode"))).map_err(fail)?;
        let bypass = fs::read(images.join(format!("{stem}_identity.bmode"))).map_err(fail)?;
        let ctx = if stem.starts_with("frame_") { cfg.context() } else { cfg.eval_context() }.map_err(fail)?;
        let frame = read_rf_frame(&path).map_err(fail)?;
        let a = ctx.infer_image(&frame, &Bypass).map_err(fail)?;
        let b = ctx.das_image(&ctx.delay(&frame).map_err(fail)?).map_err(fail)?;
        if das != bypass || a.values != b.values {
            return Err(format!("{stem}: bypass differs from DAS"));
        }
        frames += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    let msg = format!("{frames} frames bit-identical in {secs:.1} s");
    if secs < 10.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn resolution() -> Outcome {
    let cfg = preset("paper-scale.toml");
    let ctx = cfg.eval_context().map_err(fail)?;
    let frame = cfg.simulate_points().map_err(fail)?;
    let delayed = ctx.delay(&frame).map_err(fail)?;
    let das = ctx.das_image(&delayed).map_err(fail)?;
    let mvdr = ctx.mvdr_image(&delayed, &cfg.mvdr().map_err(fail)?).map_err(fail)?;
    let mut lines = Vec::new();
    let mut ok = !cfg.eval.point_targets.is_empty();
    for p in &cfg.eval.point_targets {
        let d = fwhm_lateral(&das, (p.x, p.z)).map_err(fail)?;
        let m = fwhm_lateral(&mvdr, (p.x, p.z)).map_err(fail)?;
        ok &= m <= 0.9 * d;
        lines.push(format!("z {:.1} mm: mvdr {:.3} mm, das {:.3} mm ({:.0}% narrower)", p.z * 1e3, m * 1e3, d * 1e3, 100.0 * (1.0 - m / d)));
    }
    if ok {
        Ok(lines.join("; "))
    } else {
        Err(lines.join("; "))
    }
}

fn training(run: &Path) -> Outcome {
    let cfg = preset("toy.toml");
    let t = Instant::now();
    let s = cmd_train(&cfg, run).map_err(fail)?;
    let secs = t.elapsed().as_secs_f64();
    let curve = fs::read_to_string(run.join("model/loss.csv")).map_err(fail)?;
    let last = curve.lines().last().ok_or("empty loss curve")?;
    let final_val: f64 = last.split(',').nth(2).ok_or("bad loss row")?.parse().map_err(fail)?;
    let msg = format!(
        "{} steps in {secs:.1} s; final val loss {final_val:.4} vs zero network {:.4} (bound {:.4}); val SSIM to MVDR learned {:.4} vs DAS {:.4}",
        s.steps_run,
        s.zero_network.loss,
        0.6 * s.zero_network.loss,
        s.best.ssim,
        s.das_as_prediction.ssim
    );
    if final_val < 0.6 * s.zero_network.loss && s.best.ssim > s.das_as_prediction.ssim && secs < 120.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn contrast(run: &Path) -> Outcome {
    let cfg = preset("toy.toml");
    cmd_beamform(&cfg, run, Method::Mvdr).map_err(fail)?;
    cmd_infer(&cfg, run, None, false).map_err(fail)?;
    let report = cmd_eval(&cfg, run).map_err(fail)?;
    let mut ok = report.contrast.len() == 3 * cfg.rois().len() && cfg.rois().len() == 4;
    let mut parts = Vec::new();
    for row in report.contrast_table() {
        let vals = [row.learned, row.mvdr, row.das];
        ok &= vals.iter().all(|v| v.is_some_and(|v| v < 0.0));
        let fmt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.2}"));
        parts.push(format!("{:.1} mm {}/{}/{}", row.depth_mm, fmt(row.learned), fmt(row.mvdr), fmt(row.das)));
    }

    let image = beamlab::io::read_bmode(&run.join("images/eval_das.bmode")).map_err(fail)?;
    let env = linear_envelope(&image);
    let mut uniform_ok = true;
    let mut drift: f64 = 0.0;
    for roi in cfg.rois() {
        for mode in [RoiMode::Inclusive, RoiMode::Annulus] {
            let flat = env.mapv(|_| 0.731);
            uniform_ok &= contrast_ratio_envelope(&flat, &image, &roi, mode).map_err(fail)? == 0.0;
            let base = contrast_ratio_envelope(&env, &image, &roi, mode).map_err(fail)?;
            for k in [1e-6, 0.3, 7.0, 4.2e5] {
                let scaled = contrast_ratio_envelope(&(&env * k), &image, &roi, mode).map_err(fail)?;
                drift = drift.max((scaled - base).abs());
            }
        }
    }
    let msg = format!(
        "CR dB learned/mvdr/das: {}; uniform image {}; scale drift {drift:.1e}",
        parts.join(", "),
        if uniform_ok { "0 dB exactly" } else { "not 0 dB" }
    );
    if ok && uniform_ok && drift < 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn speed(run: &Path) -> Outcome {
    let cfg = preset("paper-scale.toml");
    let results = cmd_bench(&cfg, run, None, None).map_err(fail)?;
    let total = |m: Method| results.iter().find(|r| r.method == m).map(|r| r.total().median_ms).ok_or("missing method");
    let (das, mvdr, learned) = (total(Method::Das)?, total(Method::Mvdr)?, total(Method::Learned)?);
    let msg = format!("median ms das {das:.1}, mvdr {mvdr:.1}, learned {learned:.1}; learned / mvdr = {:.3}", learned / mvdr);
    if learned < mvdr {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let cfg = preset("toy.toml");
    cmd_simulate(&cfg, second).map_err(fail)?;
    cmd_train(&cfg, second).map_err(fail)?;
    let files = [PathBuf::from(CHECKPOINT), sidecar_path(Path::new(CHECKPOINT)), PathBuf::from("model/loss.csv")];
    for f in &files {
        let (a, b) = (fs::read(first.join(f)).map_err(fail)?, fs::read(second.join(f)).map_err(fail)?);
        if a != b {
            return Err(format!("{} differs between runs", f.display()));
        }
    }
    Ok("checkpoint, header and loss curve byte-identical across two runs".into())
}

fn resave(write: impl Fn(&Path) -> Result<(), String>, read_write: impl Fn(&Path, &Path) -> Result<(), String>, dir: &Path, tag: &str) -> Result<bool, String> {
    let (a, b) = (dir.join(format!("{tag}_a")), dir.join(format!("{tag}_b")));
    write(&a)?;
    read_write(&a, &b)?;
    let same = |x: &Path, y: &Path| -> Result<bool, String> { Ok(fs::read(x).map_err(fail)? == fs::read(y).map_err(fail)?) };
    Ok(same(&a, &b)? && same(&sidecar_path(&a), &sidecar_path(&b))?)
}

fn round_trips(dir: &Path) -> Outcome {
    let cfg = preset("toy.toml");
    let frame = cfg.simulate_eval().map_err(fail)?;
    let ctx = cfg.eval_context().map_err(fail)?;
    let delayed = ctx.delay(&frame).map_err(fail)?;
    let params = UNetParams::init(cfg.arch(), 5).map_err(fail)?;
    let rf = resave(
        |p| write_rf_frame(&frame, p).map_err(fail),
        |a, b| write_rf_frame(&read_rf_frame(a).map_err(fail)?, b).map_err(fail),
        dir,
        "rf",
    )?;
    let dl = resave(
        |p| write_delayed(&delayed, p).map_err(fail),
        |a, b| write_delayed(&read_delayed(a).map_err(fail)?, b).map_err(fail),
        dir,
        "delayed",
    )?;
    let ck = resave(
        |p| write_checkpoint(&params, 5, 42, p).map_err(fail),
        |a, b| {
            let (q, h) = read_checkpoint(a).map_err(fail)?;
            write_checkpoint(&q, h.seed, h.step, b).map_err(fail)
        },
        dir,
        "ckpt",
    )?;
    let mut cf = true;
    for name in ["toy.toml", "paper-scale.toml"] {
        let a = preset(name).to_toml().map_err(fail)?;
        let path = dir.join(name);
        fs::write(&path, &a).map_err(fail)?;
        let b = RunConfig::load(&path).map_err(fail)?.to_toml().map_err(fail)?;
        cf &= a == b;
    }
    let flag = |b: bool| if b { "identical" } else { "DIFFERENT" };
    let msg = format!("rf {}, delayed {}, checkpoint {}, config {}", flag(rf), flag(dl), flag(ck), flag(cf));
    if rf && dl && ck && cf {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let toy = tempfile::tempdir().expect("tempdir");
    let twin = tempfile::tempdir().expect("tempdir");
    let bench = tempfile::tempdir().expect("tempdir");
    let scratch = tempfile::tempdir().expect("tempdir");
    let (run, twin_run) = (toy.path(), twin.path());

    let setup = cmd_simulate(&preset("toy.toml"), run).map(|_| ()).map_err(fail);
    let guarded = |f: &dyn Fn() -> Outcome| setup.clone().and_then(|_| f());

    // training comes before contrast so the learned eval image has a checkpoint
    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", gradients()),
        (2, "MVDR oracle equivalence", mvdr_oracle()),
        (3, "identity bypass", guarded(&|| identity(run))),
        (4, "point-target resolution", resolution()),
        (5, "training efficacy", guarded(&|| training(run))),
        (6, "contrast metric", guarded(&|| contrast(run))),
        (7, "speed ordering", speed(bench.path())),
        (8, "determinism", guarded(&|| determinism(run, twin_run))),
        (9, "format round trips", round_trips(scratch.path())),
    ];
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(msg) => println!("PASS criterion {n} ({name}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
