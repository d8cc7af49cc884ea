//! Full inference on one image with every intermediate written out.
//!
//! Without checkpoints the networks are freshly initialized, which is only
//! useful for checking shapes and timing.
//!
//! ```text
//! cargo run --release --example pipeline -- night.png --llm runs/llm/epoch_42.ckpt --dhm runs/dhm/epoch_42.ckpt
//! ```

use std::path::PathBuf;
use std::time::Instant;

use candle_core::DType;
use clap::Parser;
use ndels::prelude::*;
use ndels::synth::builtin_pair;

#[derive(Parser)]
struct Args {
    input: Option<PathBuf>,
    #[arg(long)]
    llm: Option<PathBuf>,
    #[arg(long)]
    dhm: Option<PathBuf>,
    #[arg(long, default_value = "pipeline_demo")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    no_emsr: bool,
}

fn main() -> ndels::Result<()> {
    let a = Args::parse();
    let img = match &a.input {
        Some(p) => ImageRgb::load(p)?,
        None => builtin_pair(128, 256, 5)?.1,
    };
    let llm = match &a.llm {
        Some(p) => NetworkParams::load(p)?,
        None => llm_init_with(&LlmConfig::default(), 0, DType::F32)?,
    };
    let dhm = match &a.dhm {
        Some(p) => DhmParams::load(p)?,
        None => dhm_init(&DhmConfig::default(), 0, DType::F32)?,
    };
    let pipeline = Pipeline::new(Some(&llm), Some(&dhm))?;
    let opts = InferOptions {
        use_emsr: !a.no_emsr,
        alpha: a.alpha,
        ..InferOptions::default()
    };
    let t0 = Instant::now();
    let stages = pipeline.stages(&img, &opts)?;
    println!("{}x{} in {:.2}s", img.width(), img.height(), t0.elapsed().as_secs_f64());
    img.save(a.out.join("input.png"))?;
    stages.llm.save(a.out.join("llm.png"))?;
    stages.dhm.save(a.out.join("dhm.png"))?;
    stages.enhanced.save(a.out.join("enhanced.png"))?;
    if let Some(e) = &stages.emsr {
        e.save(a.out.join("emsr.png"))?;
    }
    stages.output.save(a.out.join("output.png"))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
