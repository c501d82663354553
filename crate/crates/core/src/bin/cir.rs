use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cir_core::checkpoint::Checkpoint;
use cir_core::config::{check_compatible, TrainConfig};
use cir_core::dataset::{load_counterfactuals, save_counterfactuals, sidecar_path, Dataset, Split};
use cir_core::eval::evaluate;
use cir_core::gradcheck::{run_suite, SuiteModule};
use cir_core::model::Model;
use cir_core::synthetic::{generate_synthetic, SyntheticSpec};
use cir_core::train::{mine_training_split, train, EpochReport, TrainOptions};

#[derive(Parser)]
#[command(name = "cir", about = "Composed image retrieval: data, mining, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine counterfactuals for the training split into the dataset's sidecar.
    Mine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Train; writes a checkpoint per epoch, final.ckpt and metrics.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split and print the metrics as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Run the gradient-check suite.
    GradCheck {
        #[arg(long)]
        module: Option<SuiteModule>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SyntheticSpec = serde_json::from_str(&text).context("parsing spec")?;
            let data = generate_synthetic(spec)?;
            data.save(&out)?;
            println!(
                "wrote {} images and {} queries to {}",
                data.images.len(),
                data.queries.len(),
                out.display()
            );
        }
        Command::Mine { data, config } => {
            let dataset = Dataset::load(&data)?;
            let mut cfg = TrainConfig::load(&config)?;
            cfg.bind_dataset(&dataset)?;
            cfg.validate()?;
            let model = Model::new(cfg.model.clone(), cfg.seed)?;
            let sets = mine_training_split(&model, &dataset, &cfg)?;
            let short = sets.iter().filter(|s| s.pcs_short).count();
            save_counterfactuals(&data, &sets)?;
            println!("mined {} queries into {}", sets.len(), sidecar_path(&data).display());
            if short > 0 {
                eprintln!("warning: {short} queries have fewer than K_2 distinct PCS texts");
            }
        }
        Command::Train { data, config, out } => {
            let dataset = Dataset::load(&data)?;
            let cfg = TrainConfig::load(&config)?;
            let cf = if sidecar_path(&data).exists() {
                Some(load_counterfactuals(&data)?)
            } else {
                None
            };
            std::fs::create_dir_all(&out)?;
            let mut log = |r: &EpochReport| eprintln!("epoch {:>3}  step {:>6}  loss {:.6}", r.epoch, r.steps, r.mean_loss);
            let outcome = train(
                cfg,
                &dataset,
                TrainOptions {
                    out_dir: Some(&out),
                    counterfactuals: cf.as_ref(),
                    on_epoch: Some(&mut log),
                    ..Default::default()
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&outcome.metrics)?);
        }
        Command::Eval { ckpt, data, split } => {
            let ck = Checkpoint::load(&ckpt)?;
            let dataset = Dataset::load(&data)?;
            let model = ck.model()?;
            check_compatible(&model.config, &dataset)?;
            let mut metrics = evaluate(&model, &dataset, split)?;
            metrics.loss_curve = ck.loss_curve;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::GradCheck { module } => {
            let results = run_suite(module)?;
            let mut failed = false;
            for r in &results {
                // Envelope rows measure an approximation of the loss, not the
                // tape; they are reported but do not fail the command.
                let status = match (r.passed(), r.envelope) {
                    (true, _) => "ok",
                    (false, false) => "FAIL",
                    (false, true) => "GAP",
                };
                failed |= !r.passed() && !r.envelope;
                println!(
                    "{status:4}  {:<26} max rel err {:.3e}  (tol {:.0e}, {} instances)",
                    r.name, r.max_error, r.tolerance, r.instances
                );
            }
            if failed {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}
