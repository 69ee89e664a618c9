//! `vitae-ssl` command-line driver.
//!
//! Every command writes below `--run-root` (default from `VITAE_SSL_RUN_ROOT`,
//! else `./runs`) into a directory named after a content hash of its inputs,
//! so an unchanged invocation reuses the previous result unless `--force`.
//! Failures print one JSON object on stderr and exit with 2 (config or data),
//! 3 (artifact) or 4 (numeric).

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vitae_ssl::Error;

pub const RUN_ROOT_ENV: &str = "VITAE_SSL_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "vitae-ssl", version, about = "Self-supervised pretraining and linear evaluation")]
struct Cli {
    /// Root directory for all run outputs.
    #[arg(long, global = true, env = RUN_ROOT_ENV, default_value = "runs")]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config; the built-in `toy` preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` override, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Recompute even when a finished run with the same id exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Self-supervised pretraining on `data.pretrain_manifest`.
    Pretrain(ConfigArgs),
    /// Linear probe on a frozen backbone over a labeled manifest.
    LinearEval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pretraining checkpoint (teacher backbone when present).
        #[arg(long, required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a freshly initialized backbone from the config instead.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
        /// Labeled manifest; defaults to `data.eval_manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Stratified k-fold cross-validation.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Framework × backbone sweep from the `[ablate]` table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// List the matrix with parameter counts without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Loss curves and metric tables for finished runs.
    Report {
        /// Run directories (a directory of runs is expanded).
        dirs: Vec<PathBuf>,
    },
    /// Write the procedural two-class image set with a manifest.
    Synth {
        /// Output directory; `<run-root>/data/synth-<size>-<n>-<seed>` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Omit labels from the manifest.
        #[arg(long)]
        unlabeled: bool,
    },
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::MissingFile(_)
        | Error::Data(_)
        | Error::Empty(_)
        | Error::Shape(_) => 2,
        Error::Checkpoint(_)
        | Error::CheckpointVersion { .. }
        | Error::Decode { .. }
        | Error::Io { .. }
        | Error::Serde(_) => 3,
        Error::NonFinite(_) | Error::UndefinedMetric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.run_root;
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(&root, &a),
        Command::LinearEval {
            cfg,
            checkpoint,
            random_init,
            manifest,
            folds,
        } => commands::linear_eval(&root, &cfg, checkpoint.as_deref(), random_init, manifest.as_deref(), folds),
        Command::Ablate { cfg, dry_run } => commands::ablate(&root, &cfg, dry_run),
        Command::Report { dirs } => commands::report(&root, &dirs),
        Command::Synth {
            out,
            n,
            size,
            seed,
            unlabeled,
        } => commands::synth(&root, out, n, size, seed, unlabeled),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let msg = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
