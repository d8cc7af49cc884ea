//! Command-line front end: `synth`, `train`, `infer`, `eval`, `ablate`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dhm::DhmParams;
use crate::emsr::{emsr_apply, parse_scales, RetinexConfig};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::io::write_json;
use crate::params::NetworkParams;
use crate::pipeline::{InferOptions, Pipeline, DEFAULT_ALPHA};
use crate::synth::{self, load_eval_items, load_split, PairSource, Split, SynthOptions};
use crate::train::{self, EpochLog, Module, RunOptions, TrainConfig};

/// Set to `1` to force single-threaded, bit-reproducible numerics.
pub const DETERMINISTIC_ENV: &str = "NDELS_DETERMINISTIC";

#[derive(Parser, Debug)]
#[command(name = "ndels", version, about = "Nighttime dehazing and low-light enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize (bright, bright-hazy, dark-hazy) training triplets.
    Synth(SynthArgs),
    /// Train the low-light (llm) or dehazing (dhm) module.
    Train(TrainArgs),
    /// Enhance an image or a directory of images.
    Infer(InferArgs),
    /// Score the pipeline against ground truth.
    Eval(EvalArgs),
    /// Module × post-processing ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of `<name>/{bright,dark}.png` pairs.
    #[arg(long, conflicts_with = "builtin_scenes")]
    pub pairs_dir: Option<PathBuf>,
    /// Use N procedural scenes instead of real pairs.
    #[arg(long, value_name = "N")]
    pub builtin_scenes: Option<usize>,
    /// Number of triplets (defaults to the number of scenes or pairs).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Built-in scene size.
    #[arg(long, default_value = "256x128", value_parser = parse_size)]
    pub size: (usize, usize),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `llm` or `dhm`.
    pub module: Module,
    /// Dataset root written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Runs root; checkpoints go to `<out>/<name>/epoch_<k>.ckpt`.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub name: Option<String>,
    /// Continue from `epoch_<k>.ckpt` of an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PostArgs {
    /// Blend the retinex image into the output.
    #[arg(long, overrides_with = "no_emsr")]
    pub emsr: bool,
    #[arg(long, overrides_with = "emsr")]
    pub no_emsr: bool,
    /// Weight of the retinex image in the blend.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Gaussian surround scales, comma separated.
    #[arg(long, default_value = "5,130,255")]
    pub scales: String,
    /// Skip the contrast stretch after the networks.
    #[arg(long)]
    pub no_enhance: bool,
}

impl PostArgs {
    fn options(&self, emsr_default: bool) -> Result<InferOptions> {
        let retinex = RetinexConfig::with_scales(parse_scales(&self.scales)?);
        retinex.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("--alpha must lie in [0, 1], got {}", self.alpha)));
        }
        let use_emsr = if self.emsr {
            true
        } else if self.no_emsr {
            false
        } else {
            emsr_default
        };
        Ok(InferOptions {
            use_emsr,
            alpha: self.alpha,
            retinex,
            enhance: !self.no_enhance,
        })
    }
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Low-light checkpoint.
    #[arg(long, required_unless_present = "identity")]
    pub llm: Option<PathBuf>,
    /// Dehazing checkpoint.
    #[arg(long, required_unless_present = "identity")]
    pub dhm: Option<PathBuf>,
    /// Replace both networks by the identity (test mode).
    #[arg(long)]
    pub identity: bool,
}

impl ModelArgs {
    fn load(&self) -> Result<(Option<NetworkParams>, Option<DhmParams>)> {
        if self.identity {
            return Ok((None, None));
        }
        let need = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
            let p = p
                .clone()
                .ok_or_else(|| Error::Config(format!("--{what} is required")))?;
            if !p.is_file() {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
            }
            Ok(p)
        };
        let llm = NetworkParams::load(&need(&self.llm, "llm")?)?;
        crate::llm::LowLightNet::from_params(&llm)?;
        let dhm = DhmParams::load(&need(&self.dhm, "dhm")?)?;
        Ok((Some(llm), Some(dhm)))
    }

    fn pipeline(&self) -> Result<Pipeline> {
        let (llm, dhm) = self.load()?;
        Pipeline::new(llm.as_ref(), dhm.as_ref())
    }
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file (single input) or directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub post: PostArgs,
    /// Also write the llm/dhm/enhanced/emsr intermediates.
    #[arg(long)]
    pub dump_stages: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    /// Metrics JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub post: PostArgs,
    /// Resize inputs and targets before scoring (`WxH` or `none`).
    #[arg(long, default_value = "512x256", value_parser = parse_opt_size)]
    pub resize: Resize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    /// Output directory for `ablation.json` and `sheets/`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value = "5,130,255")]
    pub scales: String,
    #[arg(long, default_value = "512x256", value_parser = parse_opt_size)]
    pub resize: Resize,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got '{s}'"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in '{s}'"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in '{s}'"))?;
    if w == 0 || h == 0 {
        return Err(format!("size must be positive, got '{s}'"));
    }
    Ok((w, h))
}

/// Evaluation working size; `none` scores at native resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resize(pub Option<(usize, usize)>);

fn parse_opt_size(s: &str) -> std::result::Result<Resize, String> {
    if s == "none" {
        Ok(Resize(None))
    } else {
        parse_size(s).map(|v| Resize(Some(v)))
    }
}

fn require_dataset(root: &Path) -> Result<()> {
    if !root.join(synth::MANIFEST_FILE).is_file() {
        return Err(Error::Data(format!(
            "{} is not a dataset (no manifest)",
            root.display()
        )));
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    let (source, default_count) = match (&a.pairs_dir, a.builtin_scenes) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(Error::Data(format!(
                    "pairs directory {} is not readable",
                    dir.display()
                )));
            }
            (PairSource::Dir(dir.clone()), None)
        }
        (None, Some(n)) => (
            PairSource::Builtin {
                width: a.size.0,
                height: a.size.1,
            },
            Some(n),
        ),
        (None, None) => return Err(Error::Config("give --pairs-dir or --builtin-scenes".into())),
    };
    let count = match (a.count, default_count) {
        (Some(c), _) => c,
        (None, Some(n)) => n,
        (None, None) => std::fs::read_dir(a.pairs_dir.as_ref().expect("pairs dir"))
            .map_err(|e| Error::io(a.pairs_dir.clone().unwrap_or_default(), e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .count(),
    };
    let path = synth::synthesize_dataset(
        &a.out,
        &SynthOptions {
            count,
            seed: a.seed,
            source,
        },
    )?;
    println!("{}", path.display());
    Ok(path)
}

fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.total_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = &a.name {
        cfg.name = n.clone();
    }
    cfg.validate()?;
    require_dataset(&a.data)?;
    if let Some(r) = &a.resume {
        if !r.is_file() {
            return Err(Error::Config(format!(
                "resume checkpoint {} does not exist",
                r.display()
            )));
        }
    }
    let data: Vec<_> = load_split(&a.data, Split::Train)?.into_iter().map(|(_, t)| t).collect();
    let printer = |log: &EpochLog| println!("epoch {} lr {:e} loss {:.6}", log.epoch, log.lr, log.mean_loss);
    let opts = RunOptions {
        out_root: Some(a.out.clone()),
        resume: a.resume.clone(),
        on_epoch: Some(&printer),
    };
    let report = match a.module {
        Module::Llm => train::train_llm(&data, &cfg, &opts)?.1,
        Module::Dhm => train::train_dhm(&data, &cfg, &opts)?.2,
    };
    let last = report
        .checkpoints
        .last()
        .cloned()
        .ok_or_else(|| Error::Data("nothing was trained (resumed past the final epoch)".into()))?;
    println!("checkpoint {}", last.display());
    Ok(last)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn cmd_infer(a: &InferArgs) -> Result<Vec<PathBuf>> {
    let opts = a.post.options(true)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&a.input)
            .map_err(|e| Error::io(&a.input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|f| {
                let name = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let out = a.out.join(format!("{name}.png"));
                (f, out)
            })
            .collect()
    } else if a.input.is_file() {
        vec![(a.input.clone(), a.out.clone())]
    } else {
        return Err(Error::Data(format!("input {} does not exist", a.input.display())));
    };
    let pipeline = a.model.pipeline()?;
    let mut written = Vec::new();
    for (src, dst) in jobs {
        let img = ImageRgb::load(&src)?;
        let stages = pipeline.stages(&img, &opts)?;
        stages.output.save(&dst)?;
        written.push(dst.clone());
        if a.dump_stages {
            let emsr = match &stages.emsr {
                Some(e) => e.clone(),
                None => emsr_apply(&stages.enhanced, &opts.retinex)?,
            };
            let stem = dst.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let dir = dst.parent().map(Path::to_path_buf).unwrap_or_default();
            for (tag, stage) in [
                ("llm", &stages.llm),
                ("dhm", &stages.dhm),
                ("enhanced", &stages.enhanced),
                ("emsr", &emsr),
            ] {
                let p = dir.join(format!("{stem}_{tag}.png"));
                stage.save(&p)?;
                written.push(p);
            }
        }
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

fn cmd_eval(a: &EvalArgs) -> Result<PathBuf> {
    require_dataset(&a.data)?;
    let mut opts = a.post.options(false)?;
    if a.model.identity {
        opts.enhance = false;
    }
    let pipeline = a.model.pipeline()?;
    let items = load_eval_items(&a.data, a.split)?;
    let report = train::evaluate(&pipeline, &items, &opts, a.resize.0)?;
    write_json(&a.out, &report)?;
    println!(
        "{} images: mean PSNR {:.4} dB, SSIM {:.4}, MS-SSIM {:.4}",
        report.items.len(),
        report.mean_psnr,
        report.mean_ssim,
        report.mean_ms_ssim
    );
    Ok(a.out.clone())
}

fn cmd_ablate(a: &AblateArgs) -> Result<PathBuf> {
    require_dataset(&a.data)?;
    let retinex = RetinexConfig::with_scales(parse_scales(&a.scales)?);
    retinex.validate()?;
    let opts = InferOptions {
        use_emsr: true,
        alpha: a.alpha,
        retinex,
        enhance: true,
    };
    let (llm, dhm) = a.model.load()?;
    let items = load_eval_items(&a.data, a.split)?;
    let sheets = a.out.join("sheets");
    std::fs::create_dir_all(&sheets).map_err(|e| Error::io(&sheets, e))?;
    let grid = train::ablate(llm.as_ref(), dhm.as_ref(), &items, &opts, a.resize.0, Some(&sheets))?;
    let path = a.out.join("ablation.json");
    write_json(&path, &grid)?;
    println!("{:<8} {:>18} {:>18} {:>18}", "", "Base", "EMSR", "Enhancement");
    for row in &grid.rows {
        let cells: Vec<String> = grid
            .columns
            .iter()
            .map(|c| {
                let cell = grid.cell(row, c).expect("full grid");
                format!("{:>9.4} / {:.4}", cell.psnr, cell.ssim)
            })
            .collect();
        println!("{row:<8} {}", cells.join(" "));
    }
    println!("{}", path.display());
    Ok(path)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Infer(a) => cmd_infer(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
