//! Multiscale retinex light suppression on a single image.
//!
//! Writes the retinex image, the contrast-stretched input and their blend.
//!
//! ```text
//! cargo run --example retinex -- night.png --alpha 0.5 --scales 5,130,255
//! ```

use std::path::PathBuf;

use clap::Parser;
use ndels::emsr::{blend, clip_points, contrast_enhance, emsr_apply, parse_scales, retinex_response, RetinexConfig};
use ndels::image::ImageRgb;
use ndels::synth::builtin_pair;

#[derive(Parser)]
struct Args {
    /// Input image; a built-in night scene when omitted.
    input: Option<PathBuf>,
    #[arg(long, default_value = "retinex_demo")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value = "5,130,255")]
    scales: String,
}

fn main() -> ndels::Result<()> {
    let a = Args::parse();
    let img = match &a.input {
        Some(p) => ImageRgb::load(p)?,
        None => builtin_pair(192, 256, 11)?.1,
    };
    let cfg = RetinexConfig::with_scales(parse_scales(&a.scales)?);
    let response = retinex_response(&img, &cfg)?;
    for (c, r) in response.iter().enumerate() {
        let (lo, hi) = clip_points(r, &cfg);
        println!("channel {c}: clip [{lo:.4}, {hi:.4}]");
    }
    let retinexed = emsr_apply(&img, &cfg)?;
    let enhanced = contrast_enhance(&img)?;
    let mixed = blend(&enhanced, &retinexed, a.alpha)?;
    for (name, im) in [
        ("input", &img),
        ("retinex", &retinexed),
        ("enhanced", &enhanced),
        ("blend", &mixed),
    ] {
        im.save(a.out.join(format!("{name}.png")))?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
