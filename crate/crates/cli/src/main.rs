//! `dbdkit`: synthesise data, train, evaluate and predict from one TOML config.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dbdkit::config::RunConfig;
use dbdkit::pipeline::{run_eval, run_predict, run_synth, run_train, EvalPaths, Stage};
use dbdkit::DbdError;
use log::warn;

#[derive(Parser)]
#[command(
    name = "dbdkit",
    version,
    about = "Defocus blur detection with depth feature distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic thin-lens dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated aperture regimes, e.g. `f1.8,f16`.
        #[arg(long, value_delimiter = ',')]
        regimes: Option<Vec<String>>,
        /// Square image side in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Target directory (default: `data.dataset_root`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_parser = ["stage1", "stage2", "rdffnet"])]
        stage: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        defocus_teacher: Option<PathBuf>,
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        /// Continue from a checkpoint written by the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset and write the report and PR plot.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Write one blur map per image in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl ConfigArg {
    fn load(&self, edit: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, DbdError> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(d) = &self.output_dir {
            config.output_dir = d.clone();
        }
        edit(&mut config);
        config.resolve()
    }
}

fn run(command: Command) -> Result<(), DbdError> {
    match command {
        Command::Synth {
            cfg,
            n,
            regimes,
            size,
            out,
        } => {
            let config = cfg.load(|c| {
                if let Some(n) = n {
                    c.synth.n = n;
                }
                if let Some(r) = regimes {
                    c.synth.regimes = r;
                }
                if let Some(s) = size {
                    c.synth.size = (s, s);
                }
            })?;
            let manifest = run_synth(&config, out.as_deref())?;
            println!("{}", manifest.display());
        }
        Command::Train {
            cfg,
            stage,
            epochs,
            defocus_teacher,
            dataset_root,
            resume,
        } => {
            let stage: Stage = stage.parse()?;
            let config = cfg.load(|c| {
                if let Some(e) = epochs {
                    c.train.max_epochs = e;
                }
                if let Some(t) = defocus_teacher {
                    c.distill.defocus_teacher = Some(t);
                }
                if let Some(d) = dataset_root {
                    c.data.dataset_root = d;
                    c.data.manifest = None;
                }
            })?;
            let outcome = run_train(&config, stage, resume.as_deref())?;
            match outcome.report.and_then(|r| r.checkpoint) {
                Some(ckpt) => println!("{}", ckpt.display()),
                None => println!("{stage} disabled by configuration; nothing written"),
            }
        }
        Command::Eval {
            cfg,
            checkpoint,
            dataset_root,
            manifest,
            report,
            plot,
        } => {
            let config = cfg.load(|_| {})?;
            let paths = EvalPaths {
                dataset_root,
                manifest,
                report,
                plot,
            };
            let outcome = run_eval(&config, &checkpoint, &paths)?;
            println!("{}", outcome.metrics.echo_line());
        }
        Command::Predict {
            checkpoint,
            images,
            out,
        } => {
            let summary = run_predict(&checkpoint, &images, &out)?;
            for p in &summary.skipped {
                warn!("could not decode {}", p.display());
            }
            println!(
                "written={} skipped={}",
                summary.written.len(),
                summary.skipped.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
