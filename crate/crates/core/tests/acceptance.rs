//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Built without the libtest harness so the summary always reaches the
//! console. Pass criterion numbers (`1 4 8`) to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ndels::dhm::{
    dhm_forward, dhm_init, disc_forward, disc_init, BnMode, DehazeNet, DhmConfig, DiscConfig, Discriminator,
};
use ndels::emsr::{blend, emsr_apply, gaussian_blur, retinex_response, RetinexConfig};
use ndels::image::ImageRgb;
use ndels::llm::{llm_forward, llm_init_with, LlmConfig, LowLightNet};
use ndels::losses::{self, LossWeights, RandomConvExtractor};
use ndels::metrics::{ms_ssim, psnr, ssim, SsimConfig};
use ndels::pipeline::ndels_infer;
use ndels::synth::{
    builtin_pair, builtin_triplets, composite_pair, enhance_bright, haze_field, make_triplet, HazeParams, ImageTriplet,
};
use ndels::train::{lr_at, train_dhm, train_llm, Module, RunOptions, TrainConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(h: usize, w: usize, lo: f64, hi: f64, r: &mut ChaCha8Rng) -> ImageRgb {
    ImageRgb::from_fn(h, w, |_, _, _| r.random_range(lo..hi)).unwrap()
}

/// Smooth random image plus a noisy copy, so SSIM values are spread out.
fn correlated_pair(h: usize, w: usize, r: &mut ChaCha8Rng) -> (ImageRgb, ImageRgb) {
    let fx: f64 = r.random_range(0.05..0.4);
    let fy: f64 = r.random_range(0.05..0.4);
    let phase: f64 = r.random_range(0.0..6.0);
    let noise: f64 = r.random_range(0.01..0.3);
    let a = ImageRgb::from_fn(h, w, |y, x, c| {
        0.5 + 0.3 * ((x as f64 * fx + y as f64 * fy + phase + c as f64).sin()) + r.random_range(-0.1..0.1)
    })
    .unwrap();
    let b = a.map(|v| v + r.random_range(-noise..noise));
    (a, b)
}

// ---------------------------------------------------------------------------
// 1. Metric oracles

fn gauss_window(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *v = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    w.iter_mut().flatten().for_each(|v| *v /= total);
    w
}

/// Brute-force windowed statistics: (mean SSIM, mean contrast-structure).
fn oracle_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let win = gauss_window(11, 1.5);
    let (mut s_sum, mut cs_sum, mut n) = (0.0, 0.0, 0.0);
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j];
                    let (va, vb) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += k * va;
                    mb += k * vb;
                    aa += k * va * va;
                    bb += k * vb * vb;
                    ab += k * va * vb;
                }
            }
            let (sa, sb, sab) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            let cs = (2.0 * sab + c2) / (sa + sb + c2);
            s_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs;
            cs_sum += cs;
            n += 1.0;
        }
    }
    (s_sum / n, cs_sum / n)
}

fn plane(img: &ImageRgb, c: usize) -> Vec<f64> {
    let (h, w) = img.dims();
    (0..h * w).map(|i| img.get(i / w, i % w, c)).collect()
}

fn oracle_ssim(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let (h, w) = a.dims();
    (0..3)
        .map(|c| oracle_plane(&plane(a, c), &plane(b, c), h, w).0)
        .sum::<f64>()
        / 3.0
}

fn halve(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            out.push(
                (p[2 * y * w + 2 * x]
                    + p[2 * y * w + 2 * x + 1]
                    + p[(2 * y + 1) * w + 2 * x]
                    + p[(2 * y + 1) * w + 2 * x + 1])
                    / 4.0,
            );
        }
    }
    out
}

fn oracle_ms_ssim(a: &ImageRgb, b: &ImageRgb, levels: usize) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let total: f64 = weights[..levels].iter().sum();
    let (h0, w0) = a.dims();
    let mut acc = 0.0;
    for c in 0..3 {
        let (mut pa, mut pb, mut h, mut w) = (plane(a, c), plane(b, c), h0, w0);
        let mut v = 1.0;
        for l in 0..levels {
            let (s, cs) = oracle_plane(&pa, &pb, h, w);
            let term: f64 = if l + 1 == levels { s } else { cs };
            v *= term.max(0.0).powf(weights[l] / total);
            pa = halve(&pa, h, w);
            pb = halve(&pb, h, w);
            h /= 2;
            w /= 2;
        }
        acc += v;
    }
    acc / 3.0
}

fn criterion_metrics() -> Outcome {
    let mut r = rng(1);
    let mut worst_ssim: f64 = 0.0;
    for _ in 0..20 {
        let (a, b) = correlated_pair(32, 32, &mut r);
        let d = (ok(ssim(&a, &b))? - oracle_ssim(&a, &b)).abs();
        worst_ssim = worst_ssim.max(d);
    }
    ensure!(worst_ssim <= 1e-6, "SSIM deviates from the oracle by {worst_ssim:e}");
    let mut worst_ms: f64 = 0.0;
    for _ in 0..20 {
        let (a, b) = correlated_pair(128, 128, &mut r);
        let d = (ok(ms_ssim(&a, &b, 4))? - oracle_ms_ssim(&a, &b, 4)).abs();
        worst_ms = worst_ms.max(d);
    }
    ensure!(worst_ms <= 1e-6, "MS-SSIM deviates from the oracle by {worst_ms:e}");

    let black = ok(ImageRgb::filled(8, 8, [0.0; 3]))?;
    let white = ok(ImageRgb::filled(8, 8, [1.0; 3]))?;
    let grey = ok(ImageRgb::filled(8, 8, [0.5; 3]))?;
    let p0 = ok(psnr(&black, &white))?;
    let p6 = ok(psnr(&black, &grey))?;
    let pinf = ok(psnr(&grey, &grey))?;
    ensure!(p0 == 0.0, "PSNR(black, white) = {p0}, expected 0 dB");
    ensure!(
        (p6 - 20.0 * 2f64.log10()).abs() < 1e-12 && format!("{p6:.4}") == "6.0206",
        "PSNR(black, grey) = {p6}"
    );
    ensure!(pinf == f64::INFINITY, "PSNR of identical images = {pinf}");
    Ok(format!(
        "max |ΔSSIM| {worst_ssim:.1e}, max |ΔMS-SSIM| {worst_ms:.1e}, PSNR 0 / 6.0206 / inf"
    ))
}

// ---------------------------------------------------------------------------
// 2. Data synthesis

fn criterion_synthesis() -> Outcome {
    let mut r = rng(2);
    let b = random_image(9, 7, 0.0, 1.0, &mut r);
    let d = random_image(9, 7, 0.0, 1.0, &mut r);
    let (bp, dp) = ok(composite_pair(&b, &d))?;
    for i in 0..b.data().len() {
        let (x, y) = (b.data()[i], d.data()[i]);
        ensure!(bp.data()[i] == 0.7 * x + 0.3 * y, "B' mismatch at {i}");
        ensure!(dp.data()[i] == 0.3 * x + 0.7 * y, "D' mismatch at {i}");
    }
    let one = ok(ImageRgb::filled(2, 2, [1.0; 3]))?;
    let zero = ok(ImageRgb::filled(2, 2, [0.0; 3]))?;
    let (u, v) = ok(composite_pair(&one, &zero))?;
    ensure!(
        u.data().iter().all(|&x| x == 0.7) && v.data().iter().all(|&x| x == 0.3),
        "unit pair is not (0.7, 0.3)"
    );

    for _ in 0..100 {
        let b = random_image(6, 5, 0.0, 1.0, &mut r);
        let d = b.map(|v| v * r.random_range(0.0..=1.0));
        let (bp, dp) = ok(composite_pair(&b, &d))?;
        ensure!(
            bp.data().iter().zip(dp.data()).all(|(x, y)| x >= y),
            "ordering violated"
        );
    }

    let mut worst: f64 = 0.0;
    let mut compared = 0usize;
    for i in 0..8u64 {
        let (b, d) = ok(builtin_pair(48, 40, 100 + i))?;
        let p = HazeParams::sample(200 + i, 48, 40);
        let t = ok(make_triplet(&b, &d, &p))?;
        let (bp, dp) = ok(composite_pair(&b, &d))?;
        let field = ok(haze_field(48, 40, &p))?;
        let a = p.atmospheric_color;
        let mut per_triplet = 0usize;
        for (clean, hazy) in [(&bp, &t.bright_hazy), (&dp, &t.dark_hazy)] {
            for px in 0..48 * 40 {
                let (y, x) = (px / 40, px % 40);
                let c = (0..3)
                    .max_by(|&i, &j| {
                        (a[i] - clean.get(y, x, i))
                            .abs()
                            .total_cmp(&(a[j] - clean.get(y, x, j)).abs())
                    })
                    .unwrap();
                let den = a[c] - clean.get(y, x, c);
                if den.abs() < 0.05 {
                    continue;
                }
                let t_hat = 1.0 - (hazy.get(y, x, c) - clean.get(y, x, c)) / den;
                worst = worst.max((t_hat - field[px]).abs());
                per_triplet += 1;
            }
        }
        ensure!(
            per_triplet > 48 * 40,
            "triplet {i}: too few recoverable pixels ({per_triplet})"
        );
        compared += per_triplet;
    }
    ensure!(worst <= 1e-6, "recovered haze fields differ by {worst:e}");

    let n = 400;
    let clip = 0.05;
    let (a, s) = ([0.1, 0.0, 0.3], [0.5, 1.0, 0.6]);
    let ramp = ok(ImageRgb::from_fn(20, 20, |y, x, c| {
        a[c] + s[c] * (y * 20 + x) as f64 / (n - 1) as f64
    }))?;
    let out = ok(enhance_bright(&ramp, clip))?;
    let mut worst_ramp: f64 = 0.0;
    for i in 0..n {
        for c in 0..3 {
            let u = i as f64 / (n - 1) as f64;
            let want = ((u - clip) / (1.0 - 2.0 * clip)).clamp(0.0, 1.0);
            worst_ramp = worst_ramp.max((out.get(i / 20, i % 20, c) - want).abs());
        }
    }
    ensure!(worst_ramp <= 1e-6, "enhance_bright ramp deviates by {worst_ramp:e}");
    Ok(format!(
        "composite exact, ordering on 100 pairs, haze field recovered on {compared} pixels (max err {worst:.1e}), ramp err {worst_ramp:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Gradient checks

const FD_STEP: f64 = 1e-3;

fn f64_tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn mean_output(t: &Tensor) -> Tensor {
    t.mean_all().unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Max relative error between backprop and central differences over every input coordinate.
fn check_input_gradient(x0: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let x = Var::from_tensor(&f64_tensor(x0, shape)).unwrap();
    let grads = f(x.as_tensor()).backward().unwrap();
    let g: Vec<f64> = grads
        .get(x.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut p = x0.to_vec();
        p[i] += FD_STEP;
        let mut m = x0.to_vec();
        m[i] -= FD_STEP;
        let fd = (scalar(&f(&f64_tensor(&p, shape))) - scalar(&f(&f64_tensor(&m, shape)))) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(g[i], fd));
    }
    worst
}

/// Moves every parameter off its initial value. Zero biases over zero inputs
/// put pre-activations exactly on a ReLU kink, where differences are meaningless.
fn jitter(vars: &[(String, Var)], seed: u64) {
    let mut r = rng(seed);
    for (_, var) in vars {
        let v: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        let v: Vec<f64> = v.iter().map(|x| x + r.random_range(-0.05..0.05)).collect();
        var.set(&f64_tensor(&v, var.dims())).unwrap();
    }
}

/// Same check for `count` randomly chosen weights.
fn check_weight_gradient(
    vars: &[(String, Var)],
    count: usize,
    seed: u64,
    loss: &dyn Fn() -> Tensor,
) -> (f64, Vec<String>) {
    let grads = loss().backward().unwrap();
    let total: usize = vars.iter().map(|(_, v)| v.elem_count()).sum();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut picked = Vec::new();
    for _ in 0..count {
        // uniform over scalar weights, not over tensors
        let mut i = r.random_range(0..total);
        let (name, var) = vars
            .iter()
            .find(|(_, v)| {
                let n = v.elem_count();
                if i < n {
                    true
                } else {
                    i -= n;
                    false
                }
            })
            .unwrap();
        let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&f64_tensor(&v, var.dims())).unwrap();
            scalar(&loss())
        };
        let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        var.set(&f64_tensor(&base, var.dims())).unwrap();
        let e = rel_err(analytic[i], fd);
        worst = worst.max(e);
        picked.push(format!("{name}[{i}] {e:.1e}"));
    }
    (worst, picked)
}

fn criterion_gradients() -> Outcome {
    let mut r = rng(3);
    let shape = [1, 3, 8, 8];
    let n = 3 * 64;
    let target: Vec<f64> = (0..n).map(|_| r.random_range(0.2..0.8)).collect();
    let pred: Vec<f64> = (0..n).map(|_| r.random_range(0.2..0.8)).collect();
    let beta = 0.1;
    // keep every difference clear of the L1 and smooth-L1 kinks
    let offset = |r: &mut ChaCha8Rng, kink: f64| {
        let mut d: f64 = r.random_range(-0.4..0.4);
        if (d.abs() - kink).abs() < 0.02 {
            d += 0.05 * if d < 0.0 { -1.0 } else { 1.0 };
        }
        d
    };
    let pred_l1: Vec<f64> = target.iter().map(|t| t + offset(&mut r, 0.0)).collect();
    let pred_sl1: Vec<f64> = target.iter().map(|t| t + offset(&mut r, beta)).collect();
    let y = f64_tensor(&target, &shape);
    let small = SsimConfig {
        window: 3,
        ..SsimConfig::default()
    };
    let extractor = ok(RandomConvExtractor::new(7, &[4, 8], DType::F64))?;
    let disc = ok(disc_init(
        &DiscConfig {
            channels: vec![4, 8, 8, 8],
            hidden: 8,
        },
        5,
        DType::F64,
    ))?;
    jitter(&disc.store.trainable_vars(""), 18);
    let d = ok(Discriminator::from_params(&disc))?;
    let big_shape = [1, 3, 16, 16];
    let pred16: Vec<f64> = (0..3 * 256).map(|_| r.random_range(0.0..1.0)).collect();

    let mut report = Vec::new();
    let mut fail = Vec::new();
    let mut record = |name: &str, err: f64, tol: f64| {
        report.push(format!("{name} {err:.1e}"));
        if !(err <= tol) {
            fail.push(format!("{name}: relative error {err:e} > {tol:e}"));
        }
    };
    record(
        "content",
        check_input_gradient(&pred_l1, &shape, &|p| losses::content(p, &y).unwrap()),
        1e-3,
    );
    record(
        "msfd",
        check_input_gradient(&pred, &shape, &|p| losses::msfd(p, &y, 3).unwrap()),
        1e-3,
    );
    record(
        "smooth-l1",
        check_input_gradient(&pred_sl1, &shape, &|p| losses::smooth_l1(p, &y, beta).unwrap()),
        1e-3,
    );
    record(
        "ms-ssim",
        check_input_gradient(&pred, &shape, &|p| {
            losses::ms_ssim_loss(p, &y, Some(2), &small).unwrap()
        }),
        1e-2,
    );
    record(
        "perceptual",
        check_input_gradient(&pred, &shape, &|p| losses::perceptual(p, &y, &extractor).unwrap()),
        1e-3,
    );
    record(
        "adversarial",
        check_input_gradient(&pred16, &big_shape, &|p| {
            losses::adv_generator_logits(&d.logits(p, BnMode::Eval).unwrap()).unwrap()
        }),
        1e-3,
    );

    let llm = ok(llm_init_with(
        &LlmConfig {
            base_channels: 8,
            ..LlmConfig::default()
        },
        11,
        DType::F64,
    ))?;
    jitter(&llm.store.trainable_vars(""), 16);
    let llm_net = ok(LowLightNet::from_params(&llm))?;
    let x16 = f64_tensor(&pred16, &big_shape);
    let t16 = f64_tensor(
        &(0..3 * 256).map(|_| r.random_range(0.0..1.0)).collect::<Vec<_>>(),
        &big_shape,
    );
    let (e, w) = check_weight_gradient(&llm.store.trainable_vars(""), 5, 12, &|| {
        mean_output(&llm_net.forward(&x16).unwrap())
    });
    let llm_picked = w.join(", ");
    record(&format!("llm weights ({llm_picked})"), e, 1e-2);

    let dcfg = DhmConfig {
        upper_channels: vec![4, 4, 8, 8, 8],
        upper_out: 4,
        lower_width: 8,
        rcams: 1,
        rcabs_per_rcam: 2,
        rcab_reduction: 4,
        fa_reduction: 2,
    };
    let dhm = ok(dhm_init(&dcfg, 13, DType::F64))?;
    let mut vars = dhm.upper_branch.store.trainable_vars("");
    vars.extend(dhm.lower_branch.store.trainable_vars(""));
    vars.extend(dhm.head.store.trainable_vars(""));
    jitter(&vars, 17);
    let dhm_net = ok(DehazeNet::from_params(&dhm))?;
    let (e, w) = check_weight_gradient(&vars, 5, 14, &|| mean_output(&dhm_net.forward(&x16).unwrap()));
    let dhm_picked = w.join(", ");
    record(&format!("dhm weights ({dhm_picked})"), e, 1e-2);

    let (e, w) = check_weight_gradient(&disc.store.trainable_vars(""), 5, 15, &|| {
        let real = d.logits(&t16, BnMode::Eval).unwrap();
        let fake = d.logits(&x16, BnMode::Eval).unwrap();
        losses::adv_discriminator_logits(&real, &fake).unwrap()
    });
    record(&format!("disc weights ({})", w.join(", ")), e, 1e-2);

    if fail.is_empty() {
        Ok(report.join("; "))
    } else {
        Err(fail.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 4. Overfit reproduction

pub const OVERFIT_STEPS: usize = 200;

/// Desk-scale configuration: every epoch is one optimizer step over all 8
/// triplets, so epoch decay at 70/140 is step decay at 70/140.
fn overfit_config(module: Module) -> TrainConfig {
    let mut cfg = TrainConfig {
        name: "overfit".into(),
        seed: 0,
        total_epochs: OVERFIT_STEPS,
        decay_every: 70,
        decay_factor: 10.0,
        crop: 64,
        resize: [64, 64],
        augment: false,
        batch_size: 8,
        ..TrainConfig::default()
    };
    match module {
        Module::Llm => {
            cfg.initial_lr = 4e-3;
            cfg.llm.base_channels = 24;
        }
        Module::Dhm => {
            cfg.initial_lr = 1e-3;
            cfg.dhm = DhmConfig {
                upper_channels: vec![8, 16, 16, 32, 32],
                upper_out: 8,
                lower_width: 16,
                rcams: 2,
                rcabs_per_rcam: 2,
                rcab_reduction: 4,
                fa_reduction: 4,
            };
            cfg.disc = DiscConfig {
                channels: vec![16, 32, 64, 64, 64],
                hidden: 128,
            };
        }
    }
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn overfit_one(module: Module, data: &[ImageTriplet]) -> Result<String, String> {
    let cfg = overfit_config(module);
    let opts = RunOptions::default();
    let t0 = Instant::now();
    let (report, before, after) = match module {
        Module::Llm => {
            let (params, report) = ok(train_llm(data, &cfg, &opts))?;
            let mut before = Vec::new();
            let mut after = Vec::new();
            for t in data {
                before.push(ok(psnr(&t.dark_hazy, &t.bright_hazy))?);
                after.push(ok(psnr(&ok(llm_forward(&t.dark_hazy, &params))?, &t.bright_hazy))?);
            }
            (report, before, after)
        }
        Module::Dhm => {
            let (params, _, report) = ok(train_dhm(data, &cfg, &opts))?;
            let mut before = Vec::new();
            let mut after = Vec::new();
            for t in data {
                before.push(ok(psnr(&t.bright_hazy, &t.bright))?);
                after.push(ok(psnr(&ok(dhm_forward(&t.bright_hazy, &params))?, &t.bright))?);
            }
            (report, before, after)
        }
    };
    ensure!(
        report.step_losses.len() == OVERFIT_STEPS,
        "{} optimizer steps ran",
        report.step_losses.len()
    );
    let (first, last) = (report.step_losses[0], *report.step_losses.last().unwrap());
    let reduction = 1.0 - last / first;
    let gain = mean(&after) - mean(&before);
    let line = format!(
        "{module:?}: loss {first:.4} -> {last:.4} ({:.1}%), PSNR {:.2} -> {:.2} dB (+{gain:.2}), {:.0}s",
        100.0 * reduction,
        mean(&before),
        mean(&after),
        t0.elapsed().as_secs_f64()
    );
    ensure!(reduction >= 0.8, "{line}: loss reduction below 80%");
    ensure!(gain >= 3.0, "{line}: PSNR gain below 3 dB");
    Ok(line)
}

fn criterion_overfit() -> Outcome {
    let data = ok(builtin_triplets(8, 64, 64, 0))?;
    let llm = overfit_one(Module::Llm, &data)?;
    let dhm = overfit_one(Module::Dhm, &data)?;
    Ok(format!("{llm}; {dhm}"))
}

// ---------------------------------------------------------------------------
// 5. Schedule fidelity

fn criterion_schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let got = [ok(lr_at(0, &cfg))?, ok(lr_at(14, &cfg))?, ok(lr_at(41, &cfg))?];
    ensure!(got == [1e-4, 1e-5, 1e-6], "lr_at(0, 14, 41) = {got:?}");
    ensure!(lr_at(42, &cfg).is_err(), "epoch 42 should be outside the schedule");
    Ok(format!("lr_at(0, 14, 41) = {got:?}"))
}

// ---------------------------------------------------------------------------
// 6. Retinex properties

/// Half-sample mirror of an integer coordinate onto `[0, n)`, any distance.
fn mirror(i: i64, n: usize) -> usize {
    let p = 2 * n as i64;
    let m = i.rem_euclid(p) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Separable spatial convolution with a sampled Gaussian on the infinitely mirrored plane.
fn spatial_blur(p: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (12.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()))
        .collect();
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-radius..=radius)
                .zip(&taps)
                .map(|(d, t)| t * p[y * w + mirror(x as i64 + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-radius..=radius)
                .zip(&taps)
                .map(|(d, t)| t * rows[mirror(y as i64 + d, h) * w + x])
                .sum();
        }
    }
    out
}

fn criterion_retinex() -> Outcome {
    let cfg = RetinexConfig::default();
    let flat = ok(ImageRgb::filled(17, 23, [0.3, 0.55, 0.8]))?;
    ensure!(
        ok(emsr_apply(&flat, &cfg))? == flat,
        "constant image is not a fixed point"
    );

    let mut r = rng(6);
    let (h, w) = (13, 10);
    let p: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
    let mut worst_fft: f64 = 0.0;
    for sigma in [3.0, 5.0, 40.0, 130.0] {
        let a = gaussian_blur(&p, h, w, sigma);
        let b = spatial_blur(&p, h, w, sigma);
        worst_fft = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst_fft, f64::max);
    }
    ensure!(worst_fft <= 1e-5, "FFT and spatial blur differ by {worst_fft:e}");

    let img = random_image(24, 20, 0.2, 0.5, &mut r);
    let base = ok(retinex_response(&img, &cfg))?;
    let mut worst_scale: f64 = 0.0;
    for c in [0.5, 2.0] {
        let scaled = ok(retinex_response(&img.map(|v| v * c), &cfg))?;
        for (u, v) in base.iter().zip(&scaled) {
            worst_scale = u.iter().zip(v).map(|(x, y)| (x - y).abs()).fold(worst_scale, f64::max);
        }
    }
    ensure!(
        worst_scale <= 1e-5,
        "response changes by {worst_scale:e} under exposure scaling"
    );

    let a = random_image(9, 9, 0.0, 1.0, &mut r);
    let b = random_image(9, 9, 0.0, 1.0, &mut r);
    ensure!(ok(blend(&a, &b, 0.0))? == a, "blend(·, ·, 0) is not the dehazed image");
    ensure!(ok(blend(&a, &b, 1.0))? == b, "blend(·, ·, 1) is not the retinex image");
    Ok(format!("constant identity, FFT vs spatial {worst_fft:.1e}, exposure invariance {worst_scale:.1e}, blend endpoints exact"))
}

// ---------------------------------------------------------------------------
// 7. Pipeline contracts

fn ndels(args: &[&str], deterministic: bool) -> Result<std::process::Output, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ndels"));
    cmd.args(args);
    if deterministic {
        cmd.env("NDELS_DETERMINISTIC", "1");
    }
    let out = ok(cmd.output())?;
    if !out.status.success() {
        return Err(format!(
            "ndels {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn criterion_pipeline() -> Outcome {
    let llm = ok(llm_init_with(&LlmConfig::default(), 21, DType::F32))?;
    let dhm = ok(dhm_init(&DhmConfig::default(), 22, DType::F32))?;
    let mut r = rng(7);
    for (w, h) in [(256, 256), (512, 256)] {
        let img = random_image(h, w, 0.0, 0.4, &mut r);
        let out = ok(ndels_infer(&img, &llm, &dhm, &RetinexConfig::default(), true, 0.5))?;
        ensure!(out.dims() == (h, w), "{w}x{h} input gave {:?}", out.dims());
    }

    let dir = ok(tempfile::tempdir())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    ok(llm.save(Path::new(&p("llm.ckpt"))))?;
    ok(dhm.save(Path::new(&p("dhm.ckpt"))))?;
    random_image(48, 64, 0.0, 0.4, &mut r)
        .save(p("night.png"))
        .map_err(|e| e.to_string())?;
    for run in ["a.png", "b.png"] {
        ndels(
            &[
                "infer",
                "--input",
                &p("night.png"),
                "--llm",
                &p("llm.ckpt"),
                "--dhm",
                &p("dhm.ckpt"),
                "--out",
                &p(run),
            ],
            true,
        )?;
    }
    let (a, b) = (ok(std::fs::read(p("a.png")))?, ok(std::fs::read(p("b.png")))?);
    ensure!(a == b, "two deterministic inference runs differ");

    ndels(
        &[
            "synth",
            "--builtin-scenes",
            "6",
            "--size",
            "64x48",
            "--seed",
            "3",
            "--out",
            &p("data"),
        ],
        false,
    )?;
    ndels(
        &[
            "ablate",
            "--identity",
            "--data",
            &p("data"),
            "--split",
            "train",
            "--resize",
            "none",
            "--out",
            &p("ablation"),
        ],
        false,
    )?;
    let grid: serde_json::Value = ok(serde_json::from_slice(&ok(std::fs::read(p("ablation/ablation.json")))?))?;
    ensure!(
        grid["rows"] == serde_json::json!(["LLM", "DHM", "LLM+DHM"]),
        "rows {}",
        grid["rows"]
    );
    ensure!(
        grid["columns"] == serde_json::json!(["Base", "EMSR", "Enhancement"]),
        "columns {}",
        grid["columns"]
    );
    let cells = grid["cells"].as_array().ok_or("no cells")?;
    ensure!(cells.len() == 9, "{} cells", cells.len());
    let items = ok(ndels::synth::load_eval_items(
        Path::new(&p("data")),
        ndels::synth::Split::Train,
    ))?;
    let (mut ps, mut ss) = (Vec::new(), Vec::new());
    for it in &items {
        let target = it.target.as_ref().ok_or("missing target")?;
        ps.push(ok(psnr(&it.input, target))?);
        ss.push(ok(ssim(&it.input, target))?);
    }
    let (want_p, want_s) = (mean(&ps), mean(&ss));
    for row in ["LLM", "DHM", "LLM+DHM"] {
        for col in ["Base", "EMSR", "Enhancement"] {
            let cell = cells
                .iter()
                .find(|c| c["modules"] == row && c["variant"] == col)
                .ok_or_else(|| format!("missing cell {row}/{col}"))?;
            ensure!(
                cell["psnr"].as_f64().is_some() && cell["ssim"].as_f64().is_some(),
                "{row}/{col} not numeric"
            );
        }
        let base = cells
            .iter()
            .find(|c| c["modules"] == row && c["variant"] == "Base")
            .unwrap();
        let (gp, gs) = (base["psnr"].as_f64().unwrap(), base["ssim"].as_f64().unwrap());
        ensure!(
            (gp - want_p).abs() < 1e-9 && (gs - want_s).abs() < 1e-12,
            "{row}/Base {gp}/{gs} vs passthrough {want_p}/{want_s}"
        );
    }
    let sheets = ok(std::fs::read_dir(p("ablation/sheets")))?.count();
    ensure!(
        sheets == items.len(),
        "{sheets} contact sheets for {} samples",
        items.len()
    );
    Ok(format!(
        "shapes kept at 256x256 and 512x256, deterministic runs byte-identical, 3x3 grid with passthrough Base {want_p:.3} dB over {} samples",
        items.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. Discriminator contract

fn criterion_discriminator() -> Outcome {
    let params = ok(disc_init(&DiscConfig::default(), 31, DType::F32))?;
    let mut r = rng(8);
    let mut probes = vec![
        ok(ImageRgb::filled(16, 16, [0.0; 3]))?,
        ok(ImageRgb::filled(16, 16, [1.0; 3]))?,
        ok(ImageRgb::filled(40, 24, [0.5, 0.1, 0.9]))?,
    ];
    for (h, w) in [(16, 16), (32, 32), (48, 64), (64, 64)] {
        probes.push(random_image(h, w, 0.0, 1.0, &mut r));
    }
    for img in &probes {
        let s = ok(disc_forward(img, &params))?;
        ensure!(
            s > 0.0 && s < 1.0,
            "score {s} outside (0, 1) for a {:?} input",
            img.dims()
        );
    }

    let data = ok(builtin_triplets(4, 32, 32, 9))?;
    let cfg = TrainConfig {
        name: "toy-gan".into(),
        seed: 9,
        initial_lr: 1e-3,
        total_epochs: 200,
        decay_every: 70,
        crop: 32,
        resize: [32, 32],
        augment: false,
        batch_size: 4,
        loss_weights: Some(LossWeights {
            gamma1: 1.0,
            gamma2: 0.5,
            gamma3: 0.05,
            gamma4: 0.05,
        }),
        dhm: DhmConfig {
            upper_channels: vec![4, 8, 8, 8, 8],
            upper_out: 4,
            lower_width: 8,
            rcams: 1,
            rcabs_per_rcam: 2,
            rcab_reduction: 4,
            fa_reduction: 2,
        },
        disc: DiscConfig {
            channels: vec![8, 16, 32, 32],
            hidden: 32,
        },
        ..TrainConfig::default()
    };
    let (gen, disc, report) = ok(train_dhm(&data, &cfg, &RunOptions::default()))?;
    ensure!(
        report.disc_scores.len() == 200,
        "{} discriminator steps",
        report.disc_scores.len()
    );
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    for t in &data {
        for s in [
            ok(disc_forward(&t.bright, &disc))?,
            ok(disc_forward(&ok(dhm_forward(&t.bright_hazy, &gen))?, &disc))?,
        ] {
            ensure!(s > 0.0 && s < 1.0, "trained score {s} outside (0, 1)");
        }
        real.push(ok(disc_forward(&t.bright, &disc))?);
        fake.push(ok(disc_forward(&ok(dhm_forward(&t.bright_hazy, &gen))?, &disc))?);
    }
    let (mr, mf) = (mean(&real), mean(&fake));
    ensure!(
        mr > mf,
        "mean real score {mr:.4} does not exceed mean fake score {mf:.4}"
    );
    Ok(format!(
        "{} probes in (0, 1); after 200 adversarial steps real {mr:.3} > fake {mf:.3}",
        probes.len()
    ))
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "metric oracles",
            budget: Some(Duration::from_secs(60)),
            run: criterion_metrics,
        },
        Criterion {
            id: 2,
            name: "data synthesis",
            budget: Some(Duration::from_secs(60)),
            run: criterion_synthesis,
        },
        Criterion {
            id: 3,
            name: "gradient checks",
            budget: Some(Duration::from_secs(300)),
            run: criterion_gradients,
        },
        Criterion {
            id: 4,
            name: "overfit reproduction",
            budget: Some(Duration::from_secs(900)),
            run: criterion_overfit,
        },
        Criterion {
            id: 5,
            name: "schedule fidelity",
            budget: None,
            run: criterion_schedule,
        },
        Criterion {
            id: 6,
            name: "retinex properties",
            budget: None,
            run: criterion_retinex,
        },
        Criterion {
            id: 7,
            name: "pipeline contracts",
            budget: None,
            run: criterion_pipeline,
        },
        Criterion {
            id: 8,
            name: "discriminator contract",
            budget: None,
            run: criterion_discriminator,
        },
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| selected.is_empty() || selected.contains(&c.id))
    {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = t0.elapsed();
        let result = match (result, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => {
                Err(format!("took {:.0}s, budget {}s", elapsed.as_secs_f64(), b.as_secs()))
            }
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!(
                "criterion {} ({}): PASS [{:.1}s] {detail}",
                c.id,
                c.name,
                elapsed.as_secs_f64()
            ),
            Err(why) => {
                failed += 1;
                println!(
                    "criterion {} ({}): FAIL [{:.1}s] {why}",
                    c.id,
                    c.name,
                    elapsed.as_secs_f64()
                );
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
