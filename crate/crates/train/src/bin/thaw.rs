use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thaw_runtime::cache::inspect;
use thaw_train::{
    eval_checkpoint, export_quantized, labels_path_for, parse_config, report, train, TrainError,
};

#[derive(Parser)]
#[command(
    name = "thaw",
    version,
    about = "Plasticity-guided layer freezing for data-parallel training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train every layer for the whole run.
        #[arg(long)]
        no_freeze: bool,
        /// Disable the activation cache.
        #[arg(long)]
        no_cache: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX images file. Defaults to the validation split of the run's config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// IDX labels file. Inferred from --data when omitted.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Export the checkpoint's parameters as int8.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run, optionally against a baseline run.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// List the entries of an activation cache directory.
    InspectCache {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), TrainError> {
    match cli.command {
        Command::Train {
            config,
            no_freeze,
            no_cache,
            workers,
            seed,
            out,
        } => {
            let mut cfg = parse_config(&config)?;
            if no_freeze {
                cfg.freeze = false;
            }
            if no_cache {
                cfg.cache.enabled = false;
            }
            if let Some(w) = workers {
                if w == 0 {
                    return Err(TrainError::Config("--workers: must be positive".into()));
                }
                cfg.workers = w;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            let outcome = train(&cfg)?;
            println!(
                "iterations={} n={} freezes={} unfreezes={} frontmost={} val_accuracy={}",
                outcome.metrics.len(),
                outcome.eval_interval,
                outcome.count(thaw_train::EventKind::Freeze),
                outcome.count(thaw_train::EventKind::UnfreezeAll),
                outcome.model.frontmost_active(),
                outcome
                    .final_val_accuracy()
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "-".into()),
            );
            println!("checkpoint={}", outcome.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            labels,
        } => {
            let (acc, n) = match data {
                Some(images) => {
                    let labels = labels.or_else(|| labels_path_for(&images)).ok_or_else(|| {
                        TrainError::Config(
                            "--labels: cannot infer the labels file, pass it explicitly".into(),
                        )
                    })?;
                    eval_checkpoint(&checkpoint, Some((&images, &labels)))?
                }
                None => eval_checkpoint(&checkpoint, None)?,
            };
            println!("accuracy={acc:.4} samples={n}");
        }
        Command::Quantize { checkpoint, out } => {
            let n = export_quantized(&checkpoint, &out)?;
            println!("wrote {n} tensors to {}", out.display());
        }
        Command::Report { metrics, baseline } => {
            let r = report(&metrics, baseline.as_deref())?;
            print!("{}", r.render());
            let plot = metrics.with_file_name("plot.csv");
            r.write_plot_data(&plot)?;
            println!("plot data: {}", plot.display());
        }
        Command::InspectCache { dir } => {
            let inv = inspect(&dir)?;
            for e in &inv.entries {
                println!(
                    "{} offset={} epoch={} batch={} boundary={} version={} rows={} bytes={}",
                    e.file.display(),
                    e.offset,
                    e.header.epoch,
                    e.header.batch_seq,
                    e.header.boundary_module,
                    e.header.freeze_version,
                    e.header.sample_ids.len(),
                    e.bytes
                );
            }
            for (file, offset, reason) in &inv.damaged {
                println!("{} offset={offset} damaged: {reason}", file.display());
            }
            println!(
                "entries={} bytes={} damaged={}",
                inv.entries.len(),
                inv.total_bytes,
                inv.damaged.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
