use std::path::PathBuf;
use std::process::ExitCode;

use beamlab::pipeline::Method;
use beamlab_cli::commands::{cmd_beamform, cmd_bench, cmd_eval, cmd_infer, cmd_simulate, cmd_train};
use beamlab_cli::{CliError, CliResult, RunConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "beamlab", version, about = "Plane-wave ultrasound beamforming: DAS, MVDR and a learned patch transform")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "configs/toy.toml")]
    config: PathBuf,
    /// Run directory receiving every artifact.
    #[arg(long, short, global = true, default_value = "runs/toy")]
    run: PathBuf,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BeamformMethod {
    Das,
    Mvdr,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the training series and the evaluation frames.
    Simulate,
    /// Beamform every frame with DAS or MVDR.
    Beamform {
        #[arg(long, value_enum)]
        method: BeamformMethod,
    },
    /// Train the patch transform; writes a checkpoint and loss.csv.
    Train,
    /// Learned images of every frame.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Bypass the network; output equals the DAS image.
        #[arg(long)]
        identity: bool,
    },
    /// Contrast, FWHM and similarity metrics from existing images.
    Eval,
    /// Time DAS, MVDR and the learned pipeline.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    let cfg = RunConfig::load(&cli.config)?;
    let run = cli.run.as_path();
    match cli.command {
        Command::Simulate => {
            let files = cmd_simulate(&cfg, run)?;
            println!("wrote {} files under {}", files.len(), run.display());
        }
        Command::Beamform { method } => {
            let method = match method {
                BeamformMethod::Das => Method::Das,
                BeamformMethod::Mvdr => Method::Mvdr,
            };
            let files = cmd_beamform(&cfg, run, method)?;
            println!("wrote {} files under {}", files.len(), run.display());
        }
        Command::Train => {
            let s = cmd_train(&cfg, run)?;
            println!("train/val patches: {}/{}", s.n_train, s.n_val);
            println!("val loss  zero-network {:.5}  initial {:.5}  best {:.5} (step {})", s.zero_network.loss, s.initial.loss, s.best.loss, s.best_step);
            println!("val ssim vs mvdr  learned {:.4}  das {:.4}", s.best.ssim, s.das_as_prediction.ssim);
        }
        Command::Infer { checkpoint, identity } => {
            let files = cmd_infer(&cfg, run, checkpoint.as_deref(), identity)?;
            println!("wrote {} files under {}", files.len(), run.display());
        }
        Command::Eval => {
            let report = cmd_eval(&cfg, run)?;
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:+.3}"));
            println!("{:>10} {:>9} {:>9} {:>9}", "depth mm", "learned", "mvdr", "das");
            for r in report.contrast_table() {
                println!("{:>10.2} {:>9} {:>9} {:>9}", r.depth_mm, cell(r.learned), cell(r.mvdr), cell(r.das));
            }
            for f in &report.fwhm {
                println!("fwhm {:>8} at ({:.2}, {:.2}) mm: {:.3} mm", f.method.as_str(), f.x * 1e3, f.z * 1e3, f.fwhm * 1e3);
            }
            for s in &report.similarity {
                println!("vs mvdr {:>8}: ssim {:.4}  mae {:.4}", s.method.as_str(), s.ssim, s.mae);
            }
        }
        Command::Bench { checkpoint } => {
            let results = cmd_bench(&cfg, run, checkpoint.as_deref(), cli.threads)?;
            for r in &results {
                let t = r.total();
                println!("{:>8}: median {:.2} ms  min {:.2} ms", r.method.as_str(), t.median_ms, t.min_ms);
            }
            if let (Some(l), Some(m)) = (
                results.iter().find(|r| r.method == Method::Learned),
                results.iter().find(|r| r.method == Method::Mvdr),
            ) {
                println!("learned / mvdr = {:.3}", l.total().median_ms / m.total().median_ms);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
