use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csd_core::calibmetrics::Task;
use csd_core::pipeline::{
    cmd_calibrate, cmd_eval, cmd_infer, cmd_synth, cmd_train, write_jsonl, Checkpoint, Config, Manifest,
    PipelineError, Split, EXIT_INPUT,
};

#[derive(Parser)]
#[command(name = "csd", version, about = "Concurrent speaker detection")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic train/val/test scenes and a manifest.
    Synth {
        /// Config file, or `desk` / `paper` for a shipped profile.
        #[arg(long, default_value = "desk")]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage training; writes stage checkpoints and run_log.json.
    Train {
        #[arg(long, default_value = "desk")]
        config: PathBuf,
        /// Overrides the manifest named in the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the cost-sensitive second stage.
        #[arg(long)]
        stage1_only: bool,
    },
    /// Score a checkpoint on one manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "csd")]
        task: Task,
        /// Writes PREFIX.json and PREFIX.txt besides printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a temperature on a split and store it in the checkpoint.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Confidence threshold below which decisions go to the overlap class.
        #[arg(long)]
        tau: Option<f64>,
        /// Output checkpoint; defaults to updating the input in place.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-segment decisions for a WAV file as JSON lines.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Output file; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn manifest_for(cfg: &Config, flag: Option<PathBuf>) -> Result<Manifest, PipelineError> {
    let path = flag
        .or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| PipelineError::Input("no manifest given (use --manifest or [data] manifest)".into()))?;
    Manifest::load(&path)
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = Config::load(&config)?;
            let m = cmd_synth(&cfg, &out)?;
            log::info!("{} clips written to {}", m.entries.len(), out.display());
        }
        Command::Train {
            config,
            manifest,
            out,
            stage1_only,
        } => {
            let cfg = Config::load(&config)?;
            let m = manifest_for(&cfg, manifest)?;
            cmd_train(&cfg, &m, &out, stage1_only)?;
            log::info!("checkpoints and run log written to {}", out.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            task,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let m = Manifest::load(&manifest)?;
            let result = cmd_eval(&ckpt, &m, split, task)?;
            let text = result.to_string();
            print!("{text}");
            if let Some(prefix) = out {
                let json = serde_json::to_string_pretty(&result).expect("report serializes");
                write_file(&prefix.with_extension("json"), &(json + "\n"))?;
                write_file(&prefix.with_extension("txt"), &text)?;
            }
        }
        Command::Calibrate {
            checkpoint,
            manifest,
            split,
            tau,
            out,
        } => {
            let mut ckpt = Checkpoint::load(&checkpoint)?;
            let m = Manifest::load(&manifest)?;
            let r = cmd_calibrate(&mut ckpt, &m, split, tau)?;
            ckpt.save(out.as_deref().unwrap_or(&checkpoint))?;
            println!(
                "temperature {:.4} -> {:.4}; NLL {:.5} -> {:.5}; tau {}",
                r.previous_temperature, r.stored.temperature, r.nll_previous, r.stored.nll_after, r.stored.tau
            );
        }
        Command::Infer { checkpoint, wav, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let lines = cmd_infer(&ckpt, &wav)?;
            match out {
                Some(path) => {
                    let f = fs::File::create(&path).map_err(|e| PipelineError::io(&path, e))?;
                    write_jsonl(&lines, io::BufWriter::new(f)).map_err(|e| PipelineError::io(&path, e))?;
                }
                None => {
                    let stdout = io::stdout();
                    write_jsonl(&lines, stdout.lock()).map_err(|e| PipelineError::io(Path::new("<stdout>"), e))?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INPUT as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let _ = io::stderr().flush();
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
