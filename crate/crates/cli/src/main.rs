mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunMethod;

/// Group-robust classification over frozen embeddings.
///
/// Every command that reads a run config accepts `--config FILE` (TOML, or
/// JSON with a `.json` extension) and repeated `--set key=value` overrides
/// such as `--set train.max_epochs=10`. Run `robust-adapt config` to print
/// every config field with its default. Flags beat overrides, overrides beat
/// the file, and `ROBUST_ADAPT_SEED` fills `train.seed` when nothing else
/// sets it.
#[derive(Parser, Debug)]
#[command(name = "robust-adapt", version, propagate_version = true)]
struct Cli {
    /// Log filter, e.g. `info` or `robust_adapt=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Bundle directory [default: `bundle` from the config]
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Run config file (TOML, or JSON by extension) [default: none]
    #[arg(long = "config", value_name = "FILE")]
    config_file: Option<PathBuf>,
    /// Config override `key=value`, repeatable [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory [default: `out` from the config, runs/latest]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed [default: `train.seed`, else ROBUST_ADAPT_SEED, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Print a WG / Avg / Gap table [default: false]
    #[arg(long)]
    table: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic bundle from a preset or a ShiftSpec file.
    Generate {
        /// Frozen fixture name
        #[arg(long, value_parser = ["s1", "s2", "s3"], conflicts_with = "spec", required_unless_present = "spec")]
        preset: Option<String>,
        /// ShiftSpec file (TOML, or JSON by extension)
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        /// Output bundle directory
        #[arg(long)]
        out: PathBuf,
        /// Generator seed [default: the preset's or spec's seed]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the zero-shot classifier.
    Zeroshot {
        #[command(flatten)]
        common: Common,
        /// Use the bundle's group-annotated prompts [default: false]
        #[arg(long)]
        group_prompts: bool,
    },
    /// Train a method and write its report and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Method [default: `method` from the config, adapter-contrastive]
        #[arg(long, value_enum)]
        method: Option<RunMethod>,
        /// WiSE-FT mixing weight [default: `alpha` from the config, 0.5]
        #[arg(long)]
        alpha: Option<f32>,
    },
    /// Evaluate a checkpoint, or a training-free method.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint to evaluate
        #[arg(long, value_name = "FILE", conflicts_with = "method", required_unless_present = "method")]
        checkpoint: Option<PathBuf>,
        /// Method to evaluate without a checkpoint
        #[arg(long, value_enum)]
        method: Option<commands::EvalMethod>,
        /// WiSE-FT mixing weight [default: `alpha` from the config, 0.5]
        #[arg(long)]
        alpha: Option<f32>,
        /// Linear probe checkpoint for WiSE-FT [default: train one from the config]
        #[arg(long, value_name = "FILE")]
        probe: Option<PathBuf>,
    },
    /// Train every (learning rate, weight decay) cell and keep the best.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Method [default: `method` from the config, adapter-contrastive]
        #[arg(long, value_enum)]
        method: Option<RunMethod>,
        /// Grid file with `learning_rates` and `weight_decays` [default: `grid` from the config]
        #[arg(long, value_name = "FILE")]
        grid: Option<PathBuf>,
        /// Worker threads [default: 1]
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the merged run config as TOML.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn error_class(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<robust_adapt::Error>() {
            return err.class();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "IoError";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return "ConfigError";
        }
    }
    "Error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&std::env::var("RUST_LOG").unwrap_or(cli.log.clone()))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Generate { preset, spec, out, seed } => commands::generate(preset.as_deref(), spec.as_deref(), &out, seed),
        Command::Zeroshot { common, group_prompts } => commands::zeroshot(&common, group_prompts),
        Command::Train { common, method, alpha } => commands::train(&common, method, alpha),
        Command::Eval {
            common,
            checkpoint,
            method,
            alpha,
            probe,
        } => commands::eval(&common, checkpoint.as_deref(), method, alpha, probe.as_deref()),
        Command::Sweep {
            common,
            method,
            grid,
            jobs,
        } => commands::sweep(&common, method, grid.as_deref(), jobs),
        Command::Config { common } => commands::print_config(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_class(&e));
            ExitCode::from(2)
        }
    }
}
