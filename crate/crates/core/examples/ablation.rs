//! The 3×3 module/post-processing grid on a synthesized dataset.
//!
//! `--identity` replaces both networks by passthroughs, which makes the Base
//! column equal to the raw input-vs-target scores.
//!
//! ```text
//! cargo run --release --example ablation -- --data data --llm llm.ckpt --dhm dhm.ckpt
//! cargo run --example ablation -- --identity
//! ```

use std::path::PathBuf;

use clap::Parser;
use ndels::prelude::*;
use ndels::synth::{load_eval_items, synthesize_dataset, PairSource, Split, SynthOptions};
use ndels::train::{ablate, ABLATION_COLUMNS, ABLATION_ROWS};

#[derive(Parser)]
struct Args {
    /// Dataset root; a small built-in set is synthesized when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    llm: Option<PathBuf>,
    #[arg(long)]
    dhm: Option<PathBuf>,
    #[arg(long)]
    identity: bool,
    #[arg(long, default_value = "ablation_demo")]
    out: PathBuf,
}

fn main() -> ndels::Result<()> {
    let a = Args::parse();
    let (root, split) = match &a.data {
        Some(d) => (d.clone(), Split::Val),
        None => {
            let opts = SynthOptions {
                count: 6,
                seed: 0,
                source: PairSource::Builtin { width: 128, height: 64 },
            };
            let root = a.out.join("data");
            synthesize_dataset(&root, &opts)?;
            (root, Split::Train)
        }
    };
    let items = load_eval_items(&root, split)?;
    let (llm, dhm) = if a.identity {
        (None, None)
    } else {
        (
            a.llm.as_deref().map(NetworkParams::load).transpose()?,
            a.dhm.as_deref().map(DhmParams::load).transpose()?,
        )
    };
    let grid = ablate(
        llm.as_ref(),
        dhm.as_ref(),
        &items,
        &InferOptions::default(),
        None,
        Some(&a.out.join("sheets")),
    )?;
    print!("{:<10}", "");
    for c in ABLATION_COLUMNS {
        print!("{c:>22}");
    }
    println!();
    for r in ABLATION_ROWS {
        print!("{r:<10}");
        for c in ABLATION_COLUMNS {
            let cell = grid.cell(r, c).expect("full grid");
            print!("{:>13.2} dB {:.3}", cell.psnr, cell.ssim);
        }
        println!();
    }
    Ok(())
}
