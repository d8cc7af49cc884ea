//! Adversarial training of the dehazing module with its discriminator.
//!
//! Prints the mean discriminator scores on real and generated images every
//! few steps so a collapse is visible early.
//!
//! ```text
//! cargo run --release --example train_dhm -- --builtin 8 --size 64 --epochs 20
//! ```

use std::path::PathBuf;

use clap::Parser;
use ndels::dhm::DhmConfig;
use ndels::synth::{builtin_triplets, load_split, Split};
use ndels::train::{train_dhm, EpochLog, RunOptions, TrainConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, conflicts_with = "builtin")]
    data: Option<PathBuf>,
    #[arg(long)]
    builtin: Option<usize>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Use a narrow generator, handy on a laptop.
    #[arg(long)]
    small: bool,
}

fn main() -> ndels::Result<()> {
    env_logger::init();
    let a = Args::parse();
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig {
            name: "dhm".into(),
            ..TrainConfig::default()
        },
    };
    if let Some(e) = a.epochs {
        cfg.total_epochs = e;
    }
    if a.small {
        cfg.dhm = DhmConfig {
            upper_channels: vec![8, 16, 16, 32, 32],
            upper_out: 8,
            lower_width: 16,
            rcabs_per_rcam: 2,
            rcab_reduction: 4,
            fa_reduction: 4,
            ..DhmConfig::default()
        };
    }
    let data = match (&a.data, a.builtin) {
        (Some(root), _) => load_split(root, Split::Train)?.into_iter().map(|(_, t)| t).collect(),
        (None, n) => {
            cfg.crop = a.size;
            cfg.resize = [a.size, a.size];
            cfg.augment = false;
            builtin_triplets(n.unwrap_or(8), a.size, a.size, cfg.seed)?
        }
    };
    let print = |log: &EpochLog| println!("epoch {:>3}  lr {:.0e}  loss {:.5}", log.epoch, log.lr, log.mean_loss);
    let opts = RunOptions {
        out_root: Some(a.out.clone()),
        on_epoch: Some(&print),
        ..Default::default()
    };
    let (_, _, report) = train_dhm(&data, &cfg, &opts)?;
    let every = (report.disc_scores.len() / 10).max(1);
    for (i, (real, fake)) in report.disc_scores.iter().enumerate().step_by(every) {
        println!("step {i:>5}  D(real) {real:.3}  D(fake) {fake:.3}");
    }
    if let Some(last) = report.checkpoints.last() {
        println!("checkpoint {}", last.display());
    }
    Ok(())
}
