use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dhm::DhmParams;
use crate::emsr::{blend, contrast_enhance, emsr_apply};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::metrics::{de_psnr, psnr, ser_psnr, ssim, QualityReport};
use crate::params::NetworkParams;
use crate::pipeline::{InferOptions, Pipeline};
use crate::synth::EvalItem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: Vec<QualityReport>,
    /// Items without ground truth, with the reason.
    pub skipped: Vec<String>,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_ms_ssim: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn prepare(img: &ImageRgb, resize: Option<(usize, usize)>) -> Result<ImageRgb> {
    match resize {
        Some((w, h)) => img.resize(w, h),
        None => Ok(img.clone()),
    }
}

/// Runs the pipeline on every item and scores it against its target.
/// `resize` is applied to input and target alike before inference.
pub fn evaluate(
    pipeline: &Pipeline,
    items: &[EvalItem],
    opts: &InferOptions,
    resize: Option<(usize, usize)>,
) -> Result<EvalReport> {
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for item in items {
        let Some(target) = &item.target else {
            log::warn!("{}: no ground truth, skipped", item.id);
            skipped.push(format!("{}: missing ground truth", item.id));
            continue;
        };
        let input = prepare(&item.input, resize)?;
        let target = prepare(target, resize)?;
        let out = pipeline.run(&input, opts)?;
        reports.push(QualityReport::compute(item.id.clone(), &out, &target)?);
    }
    Ok(EvalReport {
        mean_psnr: mean(reports.iter().map(|r| r.psnr)),
        mean_ssim: mean(reports.iter().map(|r| r.ssim)),
        mean_ms_ssim: mean(reports.iter().map(|r| r.ms_ssim)),
        items: reports,
        skipped,
    })
}

pub const ABLATION_ROWS: [&str; 3] = ["LLM", "DHM", "LLM+DHM"];
pub const ABLATION_COLUMNS: [&str; 3] = ["Base", "EMSR", "Enhancement"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub modules: String,
    pub variant: String,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub alpha: f64,
    pub samples: usize,
    pub cells: Vec<AblationCell>,
    pub skipped: Vec<String>,
}

impl AblationGrid {
    pub fn cell(&self, modules: &str, variant: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.modules == modules && c.variant == variant)
    }
}

/// Images side by side, separated by white `gap`-pixel columns.
pub fn contact_sheet(images: &[&ImageRgb], gap: usize) -> Result<ImageRgb> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("contact sheet needs images".into()))?;
    for img in images {
        first.ensure_same_dims(img)?;
    }
    let (h, w) = first.dims();
    let total = images.len() * w + (images.len() - 1) * gap;
    ImageRgb::from_fn(h, total, |y, x, c| {
        let (i, off) = (x / (w + gap), x % (w + gap));
        if off < w {
            images[i].get(y, off, c)
        } else {
            1.0
        }
    })
}

/// Table-3 style grid: {LLM, DHM, LLM+DHM} × {Base, EMSR, Enhancement}.
///
/// Base is the raw network output, Enhancement its contrast stretch, and EMSR
/// the retinex image of the base blended with it at `opts.alpha`. With both
/// networks `None` every row is the identity (test mode). A contact sheet
/// per sample (input | LLM | DHM | LLM+DHM | EMSR | Enhancement | target) is
/// written to `sheets` when given.
pub fn ablate(
    llm: Option<&NetworkParams>,
    dhm: Option<&DhmParams>,
    items: &[EvalItem],
    opts: &InferOptions,
    resize: Option<(usize, usize)>,
    sheets: Option<&Path>,
) -> Result<AblationGrid> {
    let identity = llm.is_none() && dhm.is_none();
    let rows = if identity {
        [Pipeline::identity(), Pipeline::identity(), Pipeline::identity()]
    } else {
        let llm = llm.ok_or_else(|| Error::Config("ablation needs a low-light checkpoint".into()))?;
        let dhm = dhm.ok_or_else(|| Error::Config("ablation needs a dehazing checkpoint".into()))?;
        [
            Pipeline::new(Some(llm), None)?,
            Pipeline::new(None, Some(dhm))?,
            Pipeline::new(Some(llm), Some(dhm))?,
        ]
    };
    // scores[row][col] = (psnr values, ssim values)
    let mut scores = vec![vec![(Vec::new(), Vec::new()); 3]; 3];
    let mut skipped = Vec::new();
    for item in items {
        let Some(target) = &item.target else {
            skipped.push(format!("{}: missing ground truth", item.id));
            continue;
        };
        let input = prepare(&item.input, resize)?;
        let target = prepare(target, resize)?;
        let mut outputs: Vec<[ImageRgb; 3]> = Vec::with_capacity(3);
        for (r, pipe) in rows.iter().enumerate() {
            let base = pipe.base(&input)?;
            let retinex = emsr_apply(&base, &opts.retinex)?;
            let variants = [
                base.clone(),
                blend(&base, &retinex, opts.alpha)?,
                contrast_enhance(&base)?,
            ];
            for (c, img) in variants.iter().enumerate() {
                scores[r][c].0.push(psnr(img, &target)?);
                scores[r][c].1.push(ssim(img, &target)?);
            }
            outputs.push(variants);
        }
        if let Some(dir) = sheets {
            let sheet = contact_sheet(
                &[
                    &input,
                    &outputs[0][0],
                    &outputs[1][0],
                    &outputs[2][0],
                    &outputs[2][1],
                    &outputs[2][2],
                    &target,
                ],
                4,
            )?;
            sheet.save(dir.join(format!("{}.png", item.id)))?;
        }
    }
    let samples = items.len() - skipped.len();
    let mut cells = Vec::with_capacity(9);
    for (r, row) in ABLATION_ROWS.iter().enumerate() {
        for (c, col) in ABLATION_COLUMNS.iter().enumerate() {
            let (p, s) = &scores[r][c];
            cells.push(AblationCell {
                modules: row.to_string(),
                variant: col.to_string(),
                psnr: mean(p.iter().copied()),
                ssim: mean(s.iter().copied()),
            });
        }
    }
    Ok(AblationGrid {
        rows: ABLATION_ROWS.iter().map(|s| s.to_string()).collect(),
        columns: ABLATION_COLUMNS.iter().map(|s| s.to_string()).collect(),
        alpha: opts.alpha,
        samples,
        cells,
        skipped,
    })
}
