//! Scores one image against another, or a degraded built-in scene against
//! its clean version when no paths are given.
//!
//! ```text
//! cargo run --example metrics -- out.png target.png
//! ```

use std::path::PathBuf;

use clap::Parser;
use ndels::image::ImageRgb;
use ndels::metrics::{ms_ssim, mse, psnr, ssim, SsimConfig};
use ndels::synth::{add_haze, builtin_pair, HazeParams};

#[derive(Parser)]
struct Args {
    output: Option<PathBuf>,
    target: Option<PathBuf>,
}

fn main() -> ndels::Result<()> {
    let a = Args::parse();
    let (out, target) = match (a.output, a.target) {
        (Some(o), Some(t)) => (ImageRgb::load(o)?, ImageRgb::load(t)?),
        _ => {
            let (clean, _) = builtin_pair(128, 128, 3)?;
            let hazy = add_haze(&clean, &HazeParams::new(0.4, 12.0, 3))?;
            (hazy, clean)
        }
    };
    let (h, w) = target.dims();
    let levels = SsimConfig::default().max_levels(h, w);
    println!("{w}x{h}");
    println!("MSE      {:.6}", mse(&out, &target)?);
    println!("PSNR     {:.3} dB", psnr(&out, &target)?);
    println!("SSIM     {:.4}", ssim(&out, &target)?);
    if levels > 0 {
        println!("MS-SSIM  {:.4} ({levels} levels)", ms_ssim(&out, &target, levels)?);
    }
    Ok(())
}
