//! Trains the low-light module on a synthesized dataset (or built-in
//! triplets) and saves a checkpoint per epoch.
//!
//! ```text
//! cargo run --release --example train_llm -- --data data --epochs 42
//! cargo run --release --example train_llm -- --builtin 16 --epochs 5 --size 64
//! ```

use std::path::PathBuf;

use clap::Parser;
use ndels::synth::{builtin_triplets, load_split, Split};
use ndels::train::{train_llm, EpochLog, RunOptions, TrainConfig};

#[derive(Parser)]
struct Args {
    /// Dataset root written by `ndels synth`.
    #[arg(long, conflicts_with = "builtin")]
    data: Option<PathBuf>,
    /// Number of procedural triplets to train on instead.
    #[arg(long)]
    builtin: Option<usize>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Crop side for built-in triplets.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

fn main() -> ndels::Result<()> {
    env_logger::init();
    let a = Args::parse();
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig {
            name: "llm".into(),
            ..TrainConfig::default()
        },
    };
    if let Some(e) = a.epochs {
        cfg.total_epochs = e;
    }
    let data = match (&a.data, a.builtin) {
        (Some(root), _) => load_split(root, Split::Train)?.into_iter().map(|(_, t)| t).collect(),
        (None, n) => {
            let n = n.unwrap_or(8);
            cfg.crop = a.size;
            cfg.resize = [a.size, a.size];
            cfg.augment = false;
            builtin_triplets(n, a.size, a.size, cfg.seed)?
        }
    };
    let print = |log: &EpochLog| println!("epoch {:>3}  lr {:.0e}  loss {:.5}", log.epoch, log.lr, log.mean_loss);
    let opts = RunOptions {
        out_root: Some(a.out.clone()),
        on_epoch: Some(&print),
        ..Default::default()
    };
    let (params, report) = train_llm(&data, &cfg, &opts)?;
    println!("{} parameters", params.store.parameter_count());
    if let Some(last) = report.checkpoints.last() {
        println!("checkpoint {}", last.display());
    }
    Ok(())
}
