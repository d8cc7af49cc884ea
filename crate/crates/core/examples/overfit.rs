//! Desk-scale overfit of either module on built-in triplets.
//!
//! ```text
//! cargo run --release --example overfit -- dhm --steps 200 --lr 1e-3
//! ```

use std::time::Instant;

use clap::Parser;
use ndels::dhm::dhm_forward;
use ndels::llm::llm_forward;
use ndels::metrics::psnr;
use ndels::synth::builtin_triplets;
use ndels::train::{train_dhm, train_llm, Module, RunOptions, TrainConfig};

#[derive(Parser)]
struct Args {
    module: Module,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Mini-batch size (defaults to the whole set).
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Low-light base width.
    #[arg(long)]
    base: Option<usize>,
    /// Dehazing lower-branch width.
    #[arg(long)]
    width: Option<usize>,
    /// Dehazing upper-branch stage widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    upper: Option<Vec<usize>>,
    /// Weight of the adversarial term (dehazing only).
    #[arg(long)]
    adv: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> ndels::Result<()> {
    let a = Args::parse();
    let data = builtin_triplets(a.count, a.size, a.size, a.seed)?;
    let batch = a.batch.unwrap_or(a.count).min(a.count);
    let steps_per_epoch = a.count.div_ceil(batch);
    let epochs = a.steps / steps_per_epoch;
    let mut cfg = TrainConfig {
        seed: a.seed,
        initial_lr: a.lr,
        total_epochs: epochs,
        decay_every: (epochs * 7).div_ceil(20),
        crop: a.size,
        resize: [a.size, a.size],
        augment: false,
        batch_size: batch,
        ..TrainConfig::default()
    };
    if let Some(b) = a.base {
        cfg.llm.base_channels = b;
    }
    if let Some(w) = a.width {
        cfg.dhm.lower_width = w;
    }
    if let Some(u) = a.upper {
        cfg.dhm.upper_channels = u;
    }
    if let Some(g) = a.adv {
        let mut w = cfg.weights_for(Module::Dhm);
        w.gamma4 = g;
        cfg.loss_weights = Some(w);
    }
    let t0 = Instant::now();
    let on_epoch = |log: &ndels::train::EpochLog| {
        if log.epoch % 10 == 0 {
            println!("epoch {:>4}  lr {:.0e}  loss {:.5}", log.epoch, log.lr, log.mean_loss);
        }
    };
    let opts = RunOptions {
        on_epoch: Some(&on_epoch),
        ..Default::default()
    };
    let (before, after, report) = match a.module {
        Module::Llm => {
            let (params, report) = train_llm(&data, &cfg, &opts)?;
            let mut before = Vec::new();
            let mut after = Vec::new();
            for t in &data {
                before.push(psnr(&t.dark_hazy, &t.bright_hazy)?);
                after.push(psnr(&llm_forward(&t.dark_hazy, &params)?, &t.bright_hazy)?);
            }
            (before, after, report)
        }
        Module::Dhm => {
            let (params, _, report) = train_dhm(&data, &cfg, &opts)?;
            let mut before = Vec::new();
            let mut after = Vec::new();
            for t in &data {
                before.push(psnr(&t.bright_hazy, &t.bright)?);
                after.push(psnr(&dhm_forward(&t.bright_hazy, &params)?, &t.bright)?);
            }
            (before, after, report)
        }
    };
    let first = report.step_losses[0];
    let last = *report.step_losses.last().expect("at least one step");
    println!(
        "loss {first:.5} -> {last:.5} ({:.1}% reduction), PSNR {:.2} -> {:.2} dB, {:.1}s",
        100.0 * (1.0 - last / first),
        mean(&before),
        mean(&after),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
