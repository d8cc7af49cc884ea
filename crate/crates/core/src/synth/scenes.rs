//! Built-in stand-in scenes: one fixed view rendered at day and night exposure.

use rand::Rng;

use crate::error::Result;
use crate::image::ImageRgb;
use crate::seeds::{rng, sub_seed};

struct Rect {
    top: f64,
    left: f64,
    bottom: f64,
    right: f64,
    color: [f64; 3],
}

struct Light {
    y: f64,
    x: f64,
    radius: f64,
    color: [f64; 3],
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

/// `(bright, dark)` renderings of a random scene: gradient sky, ground,
/// rectangular buildings with lit windows, and point lights that glow at night.
pub fn builtin_pair(height: usize, width: usize, seed: u64) -> Result<(ImageRgb, ImageRgb)> {
    let mut r = rng(sub_seed(seed, "scene"));
    let (hf, wf) = (height as f64, width as f64);
    let horizon = r.random_range(0.45..0.7) * hf;

    let day_sky = (
        [
            r.random_range(0.35..0.55),
            r.random_range(0.55..0.75),
            r.random_range(0.85..1.0),
        ],
        [0.88, 0.9, 0.93],
    );
    let night_sky = ([0.01, 0.015, 0.05], [0.06, 0.055, 0.08]);
    let ground: [f64; 3] = [
        r.random_range(0.25..0.45),
        r.random_range(0.3..0.5),
        r.random_range(0.2..0.35),
    ];

    let buildings: Vec<Rect> = (0..r.random_range(3..8))
        .map(|_| {
            let bw = r.random_range(0.08..0.25) * wf;
            let left = r.random_range(-0.05..0.95) * wf;
            let top = horizon - r.random_range(0.1..0.45) * hf;
            let g = r.random_range(0.3..0.8);
            Rect {
                top,
                left,
                bottom: horizon + 0.05 * hf,
                right: left + bw,
                color: [g * r.random_range(0.8..1.1), g, g * r.random_range(0.8..1.1)],
            }
        })
        .collect();

    let lights: Vec<Light> = (0..r.random_range(3..9))
        .map(|_| Light {
            y: r.random_range(0.3..0.95) * hf,
            x: r.random_range(0.0..1.0) * wf,
            radius: r.random_range(0.02..0.08) * hf.min(wf),
            color: [1.0, r.random_range(0.7..0.95), r.random_range(0.35..0.7)],
        })
        .collect();
    let window_phase = r.random_range(0.0..1.0);

    let render = |y: usize, x: usize, night: bool| -> [f64; 3] {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut px = if yf < horizon {
            let (top, bottom) = if night { night_sky } else { day_sky };
            lerp(top, bottom, yf / horizon)
        } else {
            let shade = if night { 0.08 } else { 1.0 };
            ground.map(|g| g * shade * (0.8 + 0.2 * (yf - horizon) / (hf - horizon).max(1.0)))
        };
        for b in &buildings {
            if yf >= b.top && yf < b.bottom && xf >= b.left && xf < b.right {
                let lit = ((xf - b.left) / 4.0).floor() as i64 % 2 == 0
                    && ((yf - b.top) / 5.0 + window_phase).floor() as i64 % 3 == 0;
                px = if night {
                    if lit {
                        [0.55, 0.45, 0.25]
                    } else {
                        b.color.map(|c| 0.06 * c)
                    }
                } else {
                    b.color.map(|c| if lit { 0.8 * c } else { c })
                };
            }
        }
        for l in &lights {
            let d2 = (yf - l.y).powi(2) + (xf - l.x).powi(2);
            let glow = (-d2 / (2.0 * l.radius * l.radius)).exp();
            let amp = if night { 0.95 } else { 0.08 };
            for c in 0..3 {
                px[c] += amp * glow * l.color[c];
            }
        }
        px
    };

    let day = ImageRgb::from_fn(height, width, |y, x, c| render(y, x, false)[c])?;
    let night = ImageRgb::from_fn(height, width, |y, x, c| render(y, x, true)[c])?;
    Ok((day, night))
}
