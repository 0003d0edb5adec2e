use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use fnnet_core::datagen::{generate_dataset, read_dataset, write_dataset, NoiseConfig, SceneConfig};
use fnnet_core::fnnet::read_checkpoint;
use fnnet_core::pipeline::{evaluate, train, EvalOptions, EvalReport, NetPredictor, RansacConfig, RansacPredictor, TrainConfig};

/// Learned outlier rejection for two-view correspondences.
#[derive(Parser, Debug)]
#[command(name = "fnnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic correspondence dataset (.jsonl).
    Generate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        pairs: usize,
        /// Correspondences per pair.
        #[arg(long, default_value_t = 512)]
        n_points: usize,
        #[arg(long, default_value_t = 0.5)]
        outlier_ratio: f64,
        /// Standard deviation of inlier pixel noise.
        #[arg(long, default_value_t = 0.5)]
        jitter_px: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; a checkpoint is written after every epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Held-out records scored after every epoch.
        #[arg(long)]
        val: PathBuf,
        /// JSON network config; `learning_rate` and `seed` may be included.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch log lines here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Re-estimate with RANSAC on the predicted inliers.
        #[arg(long)]
        ransac_post: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score plain RANSAC on a dataset.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn write_file(path: &Path, text: &str) -> Result<(), String> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn finish(report: &EvalReport, path: Option<&Path>) -> Result<(), String> {
    println!("{}", report.summary());
    match path {
        Some(p) => write_file(p, &report.to_json()),
        None => Ok(()),
    }
}

fn run(command: Command) -> Result<(), String> {
    match command {
        Command::Generate {
            seed,
            pairs,
            n_points,
            outlier_ratio,
            jitter_px,
            out,
        } => {
            let noise = NoiseConfig {
                n_total: n_points,
                outlier_ratio,
                inlier_jitter_px: jitter_px,
                seed,
                ..NoiseConfig::default()
            };
            let records = generate_dataset(seed, pairs, &SceneConfig::default(), &noise).map_err(|e| e.to_string())?;
            write_dataset(&records, &out).map_err(|e| e.to_string())?;
            println!("wrote {} pairs to {}", records.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            val,
            config,
            epochs,
            out,
            log,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            let cfg = TrainConfig::from_json(&text).map_err(|e| format!("{}: {e}", config.display()))?;
            let train_set = read_dataset(&data).map_err(|e| e.to_string())?;
            let val_set = read_dataset(&val).map_err(|e| e.to_string())?;
            let mut log_file = match &log {
                Some(p) => Some(fs::File::create(p).map_err(|e| format!("{}: {e}", p.display()))?),
                None => None,
            };
            let mut log_err = None;
            let result = train(&train_set, &val_set, &cfg, epochs, &out, |entry| {
                let line = entry.line();
                println!("{line}");
                if let Some(f) = log_file.as_mut() {
                    if let Err(e) = writeln!(f, "{line}") {
                        log_err.get_or_insert(e.to_string());
                    }
                }
            });
            result.map_err(|e| e.to_string())?;
            if let Some(e) = log_err {
                return Err(format!("writing log: {e}"));
            }
            Ok(())
        }
        Command::Eval {
            data,
            ckpt,
            ransac_post,
            report,
        } => {
            let ck = read_checkpoint(&ckpt).map_err(|e| e.to_string())?;
            let records = read_dataset(&data).map_err(|e| e.to_string())?;
            let options = EvalOptions {
                ransac_post: ransac_post.then(RansacConfig::default),
            };
            let r = evaluate(&records, &NetPredictor(&ck.net), &options).map_err(|e| e.to_string())?;
            finish(&r, report.as_deref())
        }
        Command::Baseline {
            data,
            iters,
            seed,
            report,
        } => {
            let records = read_dataset(&data).map_err(|e| e.to_string())?;
            let cfg = RansacConfig {
                iterations: iters,
                seed,
                ..RansacConfig::default()
            };
            let r = evaluate(&records, &RansacPredictor(cfg), &EvalOptions::default()).map_err(|e| e.to_string())?;
            finish(&r, report.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!();
            // list every valid flag of the subcommand that was attempted
            let mut cmd = Cli::command();
            let sub = std::env::args().nth(1).and_then(|name| cmd.find_subcommand_mut(&name).cloned());
            let help = match sub {
                Some(mut s) => s.render_help(),
                None => cmd.render_help(),
            };
            eprintln!("{help}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
