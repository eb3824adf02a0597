//! `stroke-triage`: run the triage pipeline step by step from a JSON config.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use stroke_core::pipeline::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "stroke-triage", version, about = "Stroke CT triage: data, cGAN, fine-tuning, metrics and Grad-CAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Override `global_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build or scan the corpus, split it and write manifests and class weights.
    Prepare(Common),
    /// Train the conditional GAN on the training split.
    TrainGan(Common),
    /// Merge saved synthetic images into the training manifest.
    Synthesize(Common),
    /// Fine-tune the backbone.
    Train(Common),
    /// Score the best checkpoint on the test split.
    Evaluate(Common),
    /// Write Grad-CAM overlays for a sample of test images.
    Explain(Common),
    /// Aggregate every run's metrics into a table.
    Report(Common),
    /// Run all steps in order.
    All(Common),
    /// Print the default config.
    DefaultConfig,
}

fn load(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", c.config.display()))?;
    if let Some(s) = c.seed {
        cfg.global_seed = s;
    }
    if let Some(o) = &c.output_dir {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Prepare(c) => {
            let p = pipeline::cmd_prepare(&load(&c)?)?;
            println!("train {} / test {}", p.train.len(), p.test.len());
        }
        Command::TrainGan(c) => {
            let s = pipeline::cmd_train_gan(&load(&c)?)?;
            println!("gan epochs {}, images written {}", s.epoch, s.images_written);
        }
        Command::Synthesize(c) => {
            let s = pipeline::cmd_synthesize(&load(&c)?)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Train(c) => {
            let s = pipeline::cmd_train(&load(&c)?)?;
            println!("best epoch {} (test accuracy {:.4})", s.best.epoch, s.best.eval_accuracy);
        }
        Command::Evaluate(c) => {
            let r = pipeline::cmd_evaluate(&load(&c)?)?;
            println!("accuracy {:.4}, loss {:.4}", r.accuracy(), r.loss);
        }
        Command::Explain(c) => {
            let s = pipeline::cmd_explain(&load(&c)?)?;
            println!("explained {} images", s.images.len());
        }
        Command::Report(c) => print!("{}", pipeline::cmd_report(&load(&c)?)?),
        Command::All(c) => print!("{}", pipeline::run_all(&load(&c)?)?),
        Command::DefaultConfig => println!("{}", ExperimentConfig::default().to_json()?),
    }
    Ok(())
}
