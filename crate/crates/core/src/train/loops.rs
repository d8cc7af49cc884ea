use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{lr_at, Adam, TrainConfig};
use crate::dhm::{dhm_init, disc_init, BnMode, DehazeNet, DhmParams, Discriminator};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::llm::{llm_init_with, LowLightNet};
use crate::losses::{self, llm_total, AdvInput, DhmTerms};
use crate::metrics::SsimConfig;
use crate::nn::{ops, Checkpoint};
use crate::params::NetworkParams;
use crate::seeds::{indexed_seed, rng, sub_seed};
use crate::synth::{AugmentPlan, ImageTriplet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Llm,
    Dhm,
}

impl std::str::FromStr for Module {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llm" => Ok(Module::Llm),
            "dhm" => Ok(Module::Dhm),
            _ => Err(Error::Config(format!("unknown module '{s}' (expected llm or dhm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Total objective of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean discriminator scores `(real, fake)` per step (dehazing runs only).
    pub disc_scores: Vec<(f64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Checkpoints go to `<out_root>/<name>/epoch_<k>.ckpt` when set.
    pub out_root: Option<PathBuf>,
    /// `epoch_<k>.ckpt` of an earlier run; its `.state` sibling must exist.
    pub resume: Option<PathBuf>,
    pub on_epoch: Option<&'a dyn Fn(&EpochLog)>,
}

/// Optimizer state saved next to each checkpoint.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub module: Module,
    /// First epoch still to run.
    pub next_epoch: usize,
    pub gen: Adam,
    pub disc: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    module: Module,
    next_epoch: usize,
    gen_steps: u64,
    disc_steps: Option<u64>,
}

impl TrainState {
    fn save(&self, path: &Path) -> Result<()> {
        let (gen_steps, gen) = self.gen.state();
        let mut tensors: BTreeMap<String, Tensor> = gen.into_iter().map(|(k, v)| (format!("gen.{k}"), v)).collect();
        let disc_steps = self.disc.as_ref().map(|d| {
            let (steps, t) = d.state();
            tensors.extend(t.into_iter().map(|(k, v)| (format!("disc.{k}"), v)));
            steps
        });
        let meta = StateMeta {
            module: self.module,
            next_epoch: self.next_epoch,
            gen_steps,
            disc_steps,
        };
        Checkpoint {
            kind: "train_state".into(),
            version: crate::nn::checkpoint::FORMAT_VERSION,
            arch: serde_json::to_value(meta)?,
            tensors,
        }
        .save(path)
    }

    fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("train_state")?;
        let meta: StateMeta = serde_json::from_value(ck.arch.clone())?;
        let gen = Adam::restore(cfg.adam, meta.gen_steps, &ck.namespace("gen"))?;
        let disc = meta
            .disc_steps
            .map(|s| Adam::restore(cfg.adam, s, &ck.namespace("disc")))
            .transpose()?;
        Ok(Self {
            module: meta.module,
            next_epoch: meta.next_epoch,
            gen,
            disc,
        })
    }
}

pub(crate) fn state_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("state")
}

pub(crate) fn disc_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("disc.ckpt")
}

fn run_dir(opts: &RunOptions, cfg: &TrainConfig) -> Option<PathBuf> {
    opts.out_root.as_ref().map(|r| r.join(&cfg.name))
}

fn epoch_ckpt(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("epoch_{k}.ckpt"))
}

/// Mini-batches of one epoch; order is a seeded shuffle per epoch.
fn epoch_batches(n: usize, batch: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(indexed_seed(seed, "shuffle", epoch as u64)));
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn stack(
    data: &[ImageTriplet],
    idx: &[usize],
    epoch: usize,
    cfg: &TrainConfig,
    pick: fn(&ImageTriplet) -> (&ImageRgb, &ImageRgb),
) -> Result<(Tensor, Tensor)> {
    let resize = (cfg.resize[0], cfg.resize[1]);
    let mut xs = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        let plan = if cfg.augment {
            AugmentPlan::draw(
                resize,
                cfg.crop,
                indexed_seed(cfg.seed, "augment", (epoch * data.len() + i) as u64),
            )?
        } else {
            AugmentPlan::center(resize, cfg.crop)?
        };
        let (x, y) = pick(&data[i]);
        xs.push(plan.apply(x)?.to_tensor(DType::F32, &Device::Cpu)?);
        ys.push(plan.apply(y)?.to_tensor(DType::F32, &Device::Cpu)?);
    }
    Ok((Tensor::cat(&xs, 0)?, Tensor::cat(&ys, 0)?))
}

fn check_loss(v: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite(format!(
            "{what} became {v} at epoch {epoch}, step {step}; lower the learning rate or check the data"
        )));
    }
    Ok(())
}

fn prefixed(prefix: &str, vars: Vec<(String, Var)>) -> Vec<(String, Var)> {
    vars.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect()
}

fn finish_epoch(report: &mut TrainReport, opts: &RunOptions, epoch: usize, lr: f64, losses: &[f64]) {
    let log = EpochLog {
        epoch,
        lr,
        mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
    };
    log::info!("epoch {epoch}: lr {lr:e}, loss {:.6}", log.mean_loss);
    if let Some(cb) = opts.on_epoch {
        cb(&log);
    }
    report.epochs.push(log);
}

/// Trains the low-light module on `dark_hazy → bright_hazy`.
pub fn train_llm(data: &[ImageTriplet], cfg: &TrainConfig, opts: &RunOptions) -> Result<(NetworkParams, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let weights = cfg.weights_for(Module::Llm);
    let (params, mut adam, start) = match &opts.resume {
        Some(path) => {
            let params = NetworkParams::load(path)?;
            let state = TrainState::load(&state_path(path), cfg)?;
            if state.module != Module::Llm {
                return Err(Error::Checkpoint(format!("{} is not a low-light run", path.display())));
            }
            (params, state.gen, state.next_epoch)
        }
        None => (
            llm_init_with(&cfg.llm, sub_seed(cfg.seed, "init"), DType::F32)?,
            Adam::new(cfg.adam),
            0,
        ),
    };
    let net = LowLightNet::from_params(&params)?;
    let vars = params.store.trainable_vars("");
    let dir = run_dir(opts, cfg);
    let mut report = TrainReport::default();

    let save = |k: usize, adam: &Adam, report: &mut TrainReport| -> Result<()> {
        if let Some(dir) = &dir {
            let path = epoch_ckpt(dir, k);
            params.save(&path)?;
            TrainState {
                module: Module::Llm,
                next_epoch: k,
                gen: adam.clone(),
                disc: None,
            }
            .save(&state_path(&path))?;
            report.checkpoints.push(path);
        }
        Ok(())
    };
    if start == 0 {
        save(0, &adam, &mut report)?;
    }

    for epoch in start..cfg.total_epochs {
        let lr = lr_at(epoch, cfg)?;
        let mut losses = Vec::new();
        for (step, idx) in epoch_batches(data.len(), cfg.batch_size, epoch, cfg.seed)
            .iter()
            .enumerate()
        {
            let (x, y) = stack(data, idx, epoch, cfg, |t| (&t.dark_hazy, &t.bright_hazy))?;
            let pred = net.forward(&x)?;
            let loss = llm_total(&pred, &y, &weights)?;
            let v = ops::scalar(&loss)?;
            check_loss(v, epoch, step, "low-light loss")?;
            let grads = loss.backward()?;
            adam.step(&vars, &grads, lr)?;
            losses.push(v);
        }
        report.step_losses.extend(&losses);
        finish_epoch(&mut report, opts, epoch, lr, &losses);
        save(epoch + 1, &adam, &mut report)?;
    }
    Ok((params, report))
}

/// Trains the dehazing module on `bright_hazy → bright`, alternating with
/// discriminator updates when the adversarial weight is positive.
pub fn train_dhm(
    data: &[ImageTriplet],
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<(DhmParams, NetworkParams, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let weights = cfg.weights_for(Module::Dhm);
    let adversarial = weights.gamma4 > 0.0;
    let (params, disc, mut adam_g, mut adam_d, start) = match &opts.resume {
        Some(path) => {
            let params = DhmParams::load(path)?;
            let disc = NetworkParams::load(&disc_path(path))?;
            let state = TrainState::load(&state_path(path), cfg)?;
            if state.module != Module::Dhm {
                return Err(Error::Checkpoint(format!("{} is not a dehazing run", path.display())));
            }
            let d = state.disc.unwrap_or_else(|| Adam::new(cfg.adam));
            (params, disc, state.gen, d, state.next_epoch)
        }
        None => {
            let params = dhm_init(&cfg.dhm, sub_seed(cfg.seed, "init"), DType::F32)?;
            if let Some(path) = &cfg.upper_pretrained {
                let n = params.load_upper_pretrained(path)?;
                log::info!("loaded {n} pretrained upper-branch tensors from {}", path.display());
            }
            let disc = disc_init(&cfg.disc, sub_seed(cfg.seed, "disc-init"), DType::F32)?;
            (params, disc, Adam::new(cfg.adam), Adam::new(cfg.adam), 0)
        }
    };
    let net = DehazeNet::from_params(&params)?;
    let d = Discriminator::from_params(&disc)?;
    let extractor = cfg.extractor.build(DType::F32)?;
    let ssim = SsimConfig::default();
    let mut gen_vars = prefixed("upper", params.upper_branch.store.trainable_vars(""));
    gen_vars.extend(prefixed("lower", params.lower_branch.store.trainable_vars("")));
    gen_vars.extend(prefixed("head", params.head.store.trainable_vars("")));
    let disc_vars = disc.store.trainable_vars("");
    let dir = run_dir(opts, cfg);
    let mut report = TrainReport::default();
    let mut saturated = 0usize;
    let mut warned = false;

    let save = |k: usize, g: &Adam, dd: &Adam, report: &mut TrainReport| -> Result<()> {
        if let Some(dir) = &dir {
            let path = epoch_ckpt(dir, k);
            params.save(&path)?;
            disc.save(&disc_path(&path))?;
            TrainState {
                module: Module::Dhm,
                next_epoch: k,
                gen: g.clone(),
                disc: Some(dd.clone()),
            }
            .save(&state_path(&path))?;
            report.checkpoints.push(path);
        }
        Ok(())
    };
    if start == 0 {
        save(0, &adam_g, &adam_d, &mut report)?;
    }

    for epoch in start..cfg.total_epochs {
        let lr = lr_at(epoch, cfg)?;
        let dlr = cfg
            .disc_lr
            .map(|l| l * lr / cfg.initial_lr.max(f64::MIN_POSITIVE))
            .unwrap_or(lr);
        let mut losses = Vec::new();
        for (step, idx) in epoch_batches(data.len(), cfg.batch_size, epoch, cfg.seed)
            .iter()
            .enumerate()
        {
            let (x, y) = stack(data, idx, epoch, cfg, |t| (&t.bright_hazy, &t.bright))?;
            let pred = net.forward(&x)?;
            let terms = if adversarial {
                let fake_logits = d.logits(&pred, BnMode::Train(None))?;
                losses::dhm_terms(&pred, &y, AdvInput::Logits(&fake_logits), extractor.as_ref(), &ssim)?
            } else {
                DhmTerms {
                    smooth_l1: losses::smooth_l1(&pred, &y, 1.0)?,
                    ms_ssim: losses::ms_ssim_loss(&pred, &y, None, &ssim)?,
                    perceptual: losses::perceptual(&pred, &y, extractor.as_ref())?,
                    adversarial: Tensor::zeros((), pred.dtype(), pred.device())?,
                }
            };
            let loss = terms.total(&weights)?;
            let v = ops::scalar(&loss)?;
            check_loss(v, epoch, step, "dehazing loss")?;
            let grads = loss.backward()?;
            adam_g.step(&gen_vars, &grads, lr)?;
            losses.push(v);

            if adversarial {
                let real = d.logits(&y, BnMode::Train(Some(&disc.store)))?;
                let fake = d.logits(&pred.detach(), BnMode::Train(Some(&disc.store)))?;
                let dl = losses::adv_discriminator_logits(&real, &fake)?;
                check_loss(ops::scalar(&dl)?, epoch, step, "discriminator loss")?;
                let grads = dl.backward()?;
                adam_d.step(&disc_vars, &grads, dlr)?;
                let sr = ops::scalar(&ops::sigmoid(&real)?.mean_all()?)?;
                let sf = ops::scalar(&ops::sigmoid(&fake)?.mean_all()?)?;
                report.disc_scores.push((sr, sf));
                let sat = |s: f64| !(0.01..=0.99).contains(&s);
                if sat(sr) && sat(sf) {
                    saturated += 1;
                } else {
                    saturated = 0;
                }
                if saturated > cfg.collapse_patience && !warned {
                    log::warn!(
                        "discriminator saturated for {saturated} steps (real {sr:.3}, fake {sf:.3}); continuing"
                    );
                    warned = true;
                }
            }
        }
        report.step_losses.extend(&losses);
        finish_epoch(&mut report, opts, epoch, lr, &losses);
        save(epoch + 1, &adam_g, &adam_d, &mut report)?;
    }
    Ok((params, disc, report))
}
