use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use smoothlab::checkpoint::Checkpoint;
use smoothlab::expcli::{self, SweepConfig, RESULTS_FILE};
use smoothlab::labels::{SmoothingLevel, SmoothingSpec};
use smoothlab::losses::LossKind;
use smoothlab::models::Architecture;
use smoothlab::textpipe::{load_dataset, Format};
use smoothlab::trainer::{evaluate_split, write_metrics_csv};

#[derive(Parser)]
#[command(
    name = "smoothlab",
    version,
    about = "Label-smoothing experiments for text classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first architecture in the config.
        #[arg(long)]
        arch: Option<Architecture>,
        /// Defaults to the first level in the config.
        #[arg(long)]
        level: Option<SmoothingLevel>,
        /// Defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `<out.dir>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out.dir>/metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run every configured (dataset, architecture, level, seed) combination.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write a 2-D projection of penultimate features as `x,y,label` CSV.
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// csv, tsv or jsonl; inferred from the extension by default.
    #[arg(long)]
    format: Option<Format>,
    #[arg(long, default_value = "text")]
    text_field: String,
    #[arg(long, default_value = "label")]
    label_field: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Command::Train { config, .. } | Command::Sweep { config, .. } = &cli.command {
        if !config.is_file() {
            eprintln!("error: config file {} not found", config.display());
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> anyhow::Result<SweepConfig> {
    SweepConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train {
            config,
            arch,
            level,
            seed,
            checkpoint,
            metrics,
        } => {
            let cfg = load_config(&config)?;
            let arch = arch.unwrap_or(cfg.architectures[0]);
            let level = level.unwrap_or(cfg.levels[0]);
            let seed = seed.unwrap_or(cfg.seeds[0]);
            fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
            let run = expcli::run_single(&cfg, 0, arch, level, seed, |m| {
                eprintln!(
                    "epoch {:>3}  train loss {:.4}  train acc {:.4}  val acc {:.4}",
                    m.epoch, m.train_loss, m.train_accuracy, m.val_accuracy
                );
            })?;
            let ckpt_path = checkpoint.unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
            run.checkpoint
                .save(&ckpt_path)
                .with_context(|| format!("writing {}", ckpt_path.display()))?;
            let metrics_path = metrics.unwrap_or_else(|| cfg.out_dir.join("metrics.csv"));
            let file =
                fs::File::create(&metrics_path).with_context(|| format!("writing {}", metrics_path.display()))?;
            write_metrics_csv(BufWriter::new(file), level.name(), &run.result.metrics)?;
            println!(
                "{} {} {} seed {}: best val accuracy {:.4} at epoch {}",
                run.dataset, arch, level, seed, run.result.best_val_accuracy, run.result.best_epoch
            );
            println!("checkpoint {}", ckpt_path.display());
        }
        Command::Sweep { config, out, workers } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let table = expcli::run_sweep_with(&cfg, |row| {
                let outcome = match (&row.status, row.best_val_accuracy) {
                    (expcli::RunStatus::Ok, Some(acc)) => format!("best val accuracy {acc:.4}"),
                    (expcli::RunStatus::Failed(why), _) => format!("FAILED: {why}"),
                    _ => String::new(),
                };
                eprintln!("{}: {outcome}", row.run_name());
            })?;
            let failed = table.rows.iter().filter(|r| r.status != expcli::RunStatus::Ok).count();
            println!(
                "{} runs, {failed} failed; table {}",
                table.rows.len(),
                cfg.out_dir.join(RESULTS_FILE).display()
            );
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let raw = load_data(&data)?;
            let encoded = expcli::encode_for(&ckpt, &raw)?;
            let hard = SmoothingSpec::resolve(SmoothingLevel::Baseline, encoded.k)?;
            let (loss, accuracy) = evaluate_split(&ckpt.model, &encoded, Some((&hard, LossKind::CrossEntropy)))?;
            println!(
                "examples {}  accuracy {accuracy:.4}  cross-entropy {loss:.4}",
                encoded.len()
            );
        }
        Command::Project { checkpoint, data, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let raw = load_data(&data)?;
            match out {
                Some(path) => {
                    let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
                    expcli::project_to_csv(&ckpt, &raw, BufWriter::new(file))?;
                }
                None => {
                    let stdout = io::stdout();
                    let mut lock = stdout.lock();
                    expcli::project_to_csv(&ckpt, &raw, &mut lock)?;
                    lock.flush()?;
                }
            }
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    if !path.is_file() {
        bail!("checkpoint {} not found", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_data(args: &DataArgs) -> anyhow::Result<smoothlab::Dataset<smoothlab::textpipe::LabeledText>> {
    let format = match args.format {
        Some(f) => f,
        None => Format::from_path(&args.data)?,
    };
    Ok(load_dataset(&args.data, format, &args.text_field, &args.label_field)?)
}
