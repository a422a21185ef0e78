//! Synthetic blur pairs, image files, patches and dataset manifests.

mod blur;
mod image_io;
mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use blur::{convolve_replicate, make_blur_pair, BlurSpec, KernelKind};
pub use image_io::{load_image, save_image, ImageFormat};
pub use synth::synth_sharp;

/// An aligned sharp/blurred pair, both `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub sharp: Tensor,
    pub blurred: Tensor,
}

impl ImagePair {
    pub fn new(sharp: Tensor, blurred: Tensor) -> Result<Self> {
        let (c, _, _) = sharp.dims3()?;
        if c != 3 || sharp.shape() != blurred.shape() {
            return Err(Error::config(format!(
                "pair shapes differ or are not RGB: {:?} vs {:?}",
                sharp.shape(),
                blurred.shape()
            )));
        }
        Ok(ImagePair { sharp, blurred })
    }

    pub fn height(&self) -> usize {
        self.sharp.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.sharp.shape()[2]
    }
}

/// Copies the `size × size` window at `(y0, x0)` out of every channel.
pub fn crop(t: &Tensor, y0: usize, x0: usize, size: usize) -> Result<Tensor> {
    crop_rect(t, y0, x0, size, size)
}

/// Aligned random crops of both images at one uniformly drawn offset.
pub fn sample_patch<R: Rng + ?Sized>(pair: &ImagePair, size: usize, rng: &mut R) -> Result<ImagePair> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || size > h || size > w {
        return Err(Error::config(format!("patch size {size} does not fit a {h}×{w} image")));
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    Ok(ImagePair {
        sharp: crop(&pair.sharp, y0, x0, size)?,
        blurred: crop(&pair.blurred, y0, x0, size)?,
    })
}

pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3().expect("image tensor");
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        t.get3(ch, y, w - 1 - x)
    })
}

pub fn flip_vertical(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3().expect("image tensor");
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        t.get3(ch, h - 1 - y, x)
    })
}

/// Flips both images horizontally and, independently, vertically, each with
/// probability ½.
pub fn augment_flip<R: Rng + ?Sized>(pair: ImagePair, rng: &mut R) -> ImagePair {
    let (horizontal, vertical) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let mut p = pair;
    if horizontal {
        p = ImagePair {
            sharp: flip_horizontal(&p.sharp),
            blurred: flip_horizontal(&p.blurred),
        };
    }
    if vertical {
        p = ImagePair {
            sharp: flip_vertical(&p.sharp),
            blurred: flip_vertical(&p.blurred),
        };
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub split: Split,
    pub sharp: PathBuf,
    pub blurred: PathBuf,
    pub blur: BlurSpec,
}

/// A JSON-lines list of image pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(DatasetManifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("manifest records serialize");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Decodes every pair of `split`, checking that partners share dimensions.
    pub fn load_pairs(&self, split: Split) -> Result<Vec<ImagePair>> {
        self.split(split)
            .map(|r| {
                let sharp_path = self.root.join(&r.sharp);
                let sharp = load_image(&sharp_path)?;
                let blurred = load_image(&self.root.join(&r.blurred))?;
                if sharp.shape() != blurred.shape() {
                    return Err(Error::format(
                        sharp_path,
                        format!("partner image has shape {:?} vs {:?}", blurred.shape(), sharp.shape()),
                    ));
                }
                Ok(ImagePair { sharp, blurred })
            })
            .collect()
    }
}

/// Settings for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub train: usize,
    pub val: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub motion_min: f64,
    pub motion_max: f64,
    /// Probability that a pair uses motion blur rather than Gaussian blur.
    pub motion_fraction: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            train: 32,
            val: 8,
            height: 64,
            width: 64,
            sigma_min: 1.0,
            sigma_max: 3.0,
            motion_min: 5.0,
            motion_max: 15.0,
            motion_fraction: 0.5,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if !(0.0 < self.sigma_min && self.sigma_min <= self.sigma_max) {
            return Err(Error::config("need 0 < sigma_min ≤ sigma_max"));
        }
        if !(0.0 < self.motion_min && self.motion_min <= self.motion_max) {
            return Err(Error::config("need 0 < motion_min ≤ motion_max"));
        }
        if !(0.0..=1.0).contains(&self.motion_fraction) || !(self.noise_std >= 0.0) {
            return Err(Error::config("motion_fraction must lie in [0, 1] and noise_std must be ≥ 0"));
        }
        Ok(())
    }

    /// Draws the degradation for one pair.
    pub fn draw_spec<R: Rng + ?Sized>(&self, rng: &mut R) -> BlurSpec {
        let seed = rng.random();
        let mut spec = if rng.random_bool(self.motion_fraction) {
            let length = rng.random_range(self.motion_min..=self.motion_max);
            BlurSpec::motion(length, rng.random_range(0.0..180.0), seed)
        } else {
            BlurSpec::gaussian(rng.random_range(self.sigma_min..=self.sigma_max), seed)
        };
        spec.noise_std = self.noise_std;
        spec
    }
}

/// Generates pairs in memory: `(split, spec, pair)` in manifest order.
pub fn generate_pairs(cfg: &GenConfig) -> Result<Vec<(Split, BlurSpec, ImagePair)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let splits = std::iter::repeat_n(Split::Train, cfg.train).chain(std::iter::repeat_n(Split::Val, cfg.val));
    splits
        .map(|split| {
            let sharp = synth_sharp(cfg.height, cfg.width, &mut rng);
            let spec = cfg.draw_spec(&mut rng);
            let (sharp, blurred) = make_blur_pair(&sharp, &spec)?;
            Ok((split, spec, ImagePair { sharp, blurred }))
        })
        .collect()
}

/// Writes PNG pairs under `out_dir/{train,val}/` plus `out_dir/manifest.jsonl`.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let pairs = generate_pairs(cfg)?;
    let mut records = Vec::with_capacity(pairs.len());
    for (i, (split, spec, pair)) in pairs.into_iter().enumerate() {
        let sharp = PathBuf::from(format!("{split}/{i:04}_sharp.png"));
        let blurred = PathBuf::from(format!("{split}/{i:04}_blurred.png"));
        save_image(&out_dir.join(&sharp), &pair.sharp)?;
        save_image(&out_dir.join(&blurred), &pair.blurred)?;
        records.push(ManifestRecord {
            split,
            sharp,
            blurred,
            blur: spec,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Copies an `h × w` window at `(y0, x0)` out of every channel.
pub fn crop_rect(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, th, tw) = t.dims3()?;
    if y0 + h > th || x0 + w > tw {
        return Err(Error::config(format!("crop {h}×{w} at ({y0}, {x0}) exceeds {th}×{tw}")));
    }
    Ok(Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        t.get3(ch, y0 + y, x0 + x)
    }))
}
