//! On-disk triplet datasets.
//!
//! Layout: `<root>/{train,val}/<id>/{bright,bright_hazy,dark_hazy}.png` plus
//! `<root>/manifest.json`. Source pairs are read from
//! `<pairs_dir>/<name>/{bright,dark}.{png,jpg,jpeg}`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{builtin_pair, make_triplet, HazeParams, ImageTriplet};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::io::{read_json, write_json};
use crate::seeds::indexed_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;
/// Validation share of the generated pairs (385 of 3441).
pub const VAL_FRACTION: (usize, usize) = (385, 3441);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split '{s}' (expected train or val)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub source: String,
    pub haze: HazeParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub triplets: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::Data(format!("no {MANIFEST_FILE} in {}", root.display())));
        }
        let m: Manifest = read_json(&path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.triplets.iter().filter(move |e| e.split == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PairSource {
    /// Procedural scenes of the given (width, height).
    Builtin { width: usize, height: usize },
    /// Directory of aligned pairs.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub count: usize,
    pub seed: u64,
    pub source: PairSource,
}

struct PairFiles {
    name: String,
    bright: PathBuf,
    dark: PathBuf,
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn list_pairs(dir: &Path) -> Result<Vec<PairFiles>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut pairs = Vec::new();
    for sub in subdirs {
        let name = sub
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match (find_image(&sub, "bright"), find_image(&sub, "dark")) {
            (Some(bright), Some(dark)) => pairs.push(PairFiles { name, bright, dark }),
            _ => log::warn!("skipping {}: needs bright and dark images", sub.display()),
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no bright/dark pairs found under {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

/// Number of validation triplets out of `count`.
pub fn val_count(count: usize) -> usize {
    count * VAL_FRACTION.0 / VAL_FRACTION.1
}

/// `count` procedural triplets in memory, seeded exactly as
/// [`synthesize_dataset`] seeds a built-in dataset.
pub fn builtin_triplets(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<ImageTriplet>> {
    (0..count)
        .map(|i| {
            let (b, d) = builtin_pair(height, width, indexed_seed(seed, "scene", i as u64))?;
            let haze = HazeParams::sample(indexed_seed(seed, "triplet", i as u64), height, width);
            make_triplet(&b, &d, &haze)
        })
        .collect()
}

/// Writes `count` triplets and the manifest; returns the manifest path.
pub fn synthesize_dataset(out: &Path, opts: &SynthOptions) -> Result<PathBuf> {
    let pairs = match &opts.source {
        PairSource::Dir(dir) => Some(list_pairs(dir)?),
        PairSource::Builtin { width, height } => {
            if *width == 0 || *height == 0 {
                return Err(Error::Config("builtin scene size must be positive".into()));
            }
            None
        }
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n_val = val_count(opts.count);
    let mut entries = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let seed = indexed_seed(opts.seed, "triplet", i as u64);
        let (source, bright, dark) = match (&pairs, &opts.source) {
            (Some(pairs), _) => {
                let p = &pairs[i % pairs.len()];
                let b = ImageRgb::load(&p.bright)?;
                let d = ImageRgb::load(&p.dark)?;
                if b.dims() != d.dims() {
                    return Err(Error::Data(format!(
                        "pair {} is not aligned: {:?} vs {:?}",
                        p.name,
                        b.dims(),
                        d.dims()
                    )));
                }
                (p.name.clone(), b, d)
            }
            (None, PairSource::Builtin { width, height }) => {
                let (b, d) = builtin_pair(*height, *width, indexed_seed(opts.seed, "scene", i as u64))?;
                ("builtin".to_string(), b, d)
            }
            (None, PairSource::Dir(_)) => unreachable!("directories are listed above"),
        };
        let (h, w) = bright.dims();
        let haze = HazeParams::sample(seed, h, w);
        let t = make_triplet(&bright, &dark, &haze)?;
        let split = if i + n_val >= opts.count {
            Split::Val
        } else {
            Split::Train
        };
        let id = format!("{i:05}");
        let dir = out.join(split.dir()).join(&id);
        t.bright.save(dir.join("bright.png"))?;
        t.bright_hazy.save(dir.join("bright_hazy.png"))?;
        t.dark_hazy.save(dir.join("dark_hazy.png"))?;
        entries.push(ManifestEntry {
            id,
            split,
            seed,
            source,
            haze,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: opts.seed,
        triplets: entries,
    };
    let path = out.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// All triplets of one split, in manifest order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<(String, ImageTriplet)>> {
    let manifest = Manifest::load(root)?;
    manifest
        .entries(split)
        .map(|e| {
            let dir = root.join(split.dir()).join(&e.id);
            let t = ImageTriplet::new(
                ImageRgb::load(dir.join("bright.png"))?,
                ImageRgb::load(dir.join("bright_hazy.png"))?,
                ImageRgb::load(dir.join("dark_hazy.png"))?,
                e.seed,
            )?;
            Ok((e.id.clone(), t))
        })
        .collect()
}

/// Network input plus its ground truth, if present on disk.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub input: ImageRgb,
    pub target: Option<ImageRgb>,
}

pub fn load_eval_items(root: &Path, split: Split) -> Result<Vec<EvalItem>> {
    let manifest = Manifest::load(root)?;
    manifest
        .entries(split)
        .map(|e| {
            let dir = root.join(split.dir()).join(&e.id);
            let gt = dir.join("bright.png");
            Ok(EvalItem {
                id: e.id.clone(),
                input: ImageRgb::load(dir.join("dark_hazy.png"))?,
                target: if gt.is_file() { Some(ImageRgb::load(&gt)?) } else { None },
            })
        })
        .collect()
}
