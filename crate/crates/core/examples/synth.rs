//! Builds one training triplet from a procedural day/night pair and writes
//! every stage of the synthesis as PNG.
//!
//! ```text
//! cargo run --example synth -- --out synth_demo --seed 7
//! ```

use std::path::PathBuf;

use clap::Parser;
use ndels::image::ImageRgb;
use ndels::synth::{builtin_pair, composite_pair, haze_field, make_triplet, HazeParams};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "synth_demo")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
}

fn main() -> ndels::Result<()> {
    let a = Args::parse();
    let (h, w) = (a.height, a.width);
    let (bright, dark) = builtin_pair(h, w, a.seed)?;
    let (b_mix, d_mix) = composite_pair(&bright, &dark)?;
    let params = HazeParams::sample(a.seed, h, w);
    let t = haze_field(h, w, &params)?;
    let field = ImageRgb::from_fn(h, w, |y, x, _| t[y * w + x])?;
    let triplet = make_triplet(&bright, &dark, &params)?;

    println!(
        "veil {:.3}, correlation length {:.1} px, transmission in [{:.3}, {:.3}]",
        params.veil_strength,
        params.field_smoothness,
        t.iter().cloned().fold(f64::INFINITY, f64::min),
        t.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    for (name, img) in [
        ("day", &bright),
        ("night", &dark),
        ("day_mix", &b_mix),
        ("night_mix", &d_mix),
        ("transmission", &field),
        ("bright", &triplet.bright),
        ("bright_hazy", &triplet.bright_hazy),
        ("dark_hazy", &triplet.dark_hazy),
    ] {
        let path = a.out.join(format!("{name}.png"));
        img.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
