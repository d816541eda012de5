//! `meshmotion`: data generation, augmentation, pretraining, fine-tuning,
//! evaluation and attention dumps for mesh-sequence action recognition.

mod commands;
mod config;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Preset, RunConfig};

#[derive(Parser)]
#[command(name = "meshmotion", version, about = "Action recognition on deforming mesh sequences")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML run configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset; defaults to the one named in --config, else desk.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// `key.path=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed; also seeds model initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Epochs for the stage being run.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    GenData,
    /// Build an unlabeled pretraining corpus by recombining body parts.
    ShuffleAugment(commands::ShuffleArgs),
    /// Self-supervised pretraining on masked patches and future frames.
    Pretrain(commands::PretrainArgs),
    /// Supervised training of the classifier.
    Finetune(commands::FinetuneArgs),
    /// Top-1 and top-5 accuracy of a checkpoint on one split.
    Eval(commands::EvalArgs),
    /// Final-layer inter-frame attention for one sequence.
    DumpAttention(commands::AttentionArgs),
}

impl Common {
    /// Effective config: preset, file, `--set` pairs, then dedicated flags.
    fn resolve(&self, epochs_key: Option<&str>) -> anyhow::Result<(RunConfig, PathBuf)> {
        if let Some(path) = &self.config {
            store::require_file(path, "--config")?;
        }
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
            overrides.push(format!("model.seed={seed}"));
        }
        match (self.epochs, epochs_key) {
            (Some(e), Some(key)) => overrides.push(format!("{key}.epochs={e}")),
            (Some(_), None) => log::warn!("--epochs has no effect on this command"),
            _ => {}
        }
        let cfg = RunConfig::load(self.preset, self.config.as_deref(), &overrides)?;
        let out = self.out.clone().ok_or_else(|| anyhow::anyhow!("--out is required"))?;
        Ok((cfg, out))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = &cli.common;
    let result = match &cli.command {
        Command::GenData => common.resolve(None).and_then(|(cfg, out)| commands::gen_data(&cfg, &out)),
        Command::ShuffleAugment(a) => common.resolve(None).and_then(|(cfg, out)| commands::shuffle_augment(&cfg, &out, a)),
        Command::Pretrain(a) => common.resolve(Some("pretrain")).and_then(|(cfg, out)| commands::pretrain(&cfg, &out, a)),
        Command::Finetune(a) => common.resolve(Some("finetune")).and_then(|(cfg, out)| commands::finetune(&cfg, &out, a)),
        Command::Eval(a) => common.resolve(None).and_then(|(cfg, out)| commands::eval(&cfg, &out, a)),
        Command::DumpAttention(a) => common.resolve(None).and_then(|(cfg, out)| commands::dump_attention(&cfg, &out, a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
