use std::path::{Path, PathBuf};

use log::warn;

use crate::data_io::{load_image, scan_corpus, Image8};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Where a sampled patch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchLocation {
    pub image: usize,
    pub x: usize,
    pub y: usize,
}

/// Images from which square patches are drawn uniformly at random.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    images: Vec<Image8>,
    sources: Vec<PathBuf>,
    patch_size: usize,
}

impl PatchDataset {
    /// Every image found recursively under `dir`.
    pub fn from_corpus(dir: impl AsRef<Path>, patch_size: usize) -> Result<Self> {
        let paths = scan_corpus(dir)?;
        let mut images = Vec::with_capacity(paths.len());
        for p in &paths {
            images.push(load_image(p)?);
        }
        Self::build(images, paths, patch_size)
    }

    /// Patches of a single image (internal statistics).
    pub fn from_image(path: impl AsRef<Path>, patch_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let image = load_image(path)?;
        Self::build(vec![image], vec![path.to_path_buf()], patch_size)
    }

    pub fn from_images(images: Vec<Image8>, patch_size: usize) -> Result<Self> {
        let sources = (0..images.len()).map(|i| PathBuf::from(format!("<image {i}>"))).collect();
        Self::build(images, sources, patch_size)
    }

    fn build(images: Vec<Image8>, sources: Vec<PathBuf>, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        let mut kept = Self {
            images: Vec::new(),
            sources: Vec::new(),
            patch_size,
        };
        for (img, src) in images.into_iter().zip(sources) {
            if img.width() < patch_size || img.height() < patch_size {
                warn!(
                    "skipping {}: {}x{} is smaller than the {patch_size}px patch",
                    src.display(),
                    img.width(),
                    img.height()
                );
                continue;
            }
            kept.images.push(img);
            kept.sources.push(src);
        }
        if kept.images.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(kept)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image8] {
        &self.images
    }

    pub fn sources(&self) -> &[PathBuf] {
        &self.sources
    }

    /// Uniform image, then a uniform top-left corner among the valid ones.
    pub fn sample_locations(&self, count: usize, rng: &mut Rng) -> Vec<PatchLocation> {
        let p = self.patch_size;
        (0..count)
            .map(|_| {
                let image = rng.below(self.images.len() as u64) as usize;
                let img = &self.images[image];
                let x = rng.below((img.width() - p + 1) as u64) as usize;
                let y = rng.below((img.height() - p + 1) as u64) as usize;
                PatchLocation { image, x, y }
            })
            .collect()
    }

    pub fn patch_at(&self, loc: PatchLocation) -> Result<Image8> {
        let img = self
            .images
            .get(loc.image)
            .ok_or_else(|| Error::InvalidArgument(format!("no image {}", loc.image)))?;
        img.crop(loc.x, loc.y, self.patch_size, self.patch_size)
    }

    pub fn sample_patches(&self, count: usize, rng: &mut Rng) -> Vec<Image8> {
        self.sample_locations(count, rng)
            .into_iter()
            .map(|loc| self.patch_at(loc).expect("sampled location lies inside its image"))
            .collect()
    }
}

/// Largest `f32` strictly below `x`.
fn f32_below(x: f32) -> f32 {
    if x > 0.0 {
        f32::from_bits(x.to_bits() - 1)
    } else if x == 0.0 {
        -f32::from_bits(1)
    } else {
        f32::from_bits(x.to_bits() + 1)
    }
}

fn dequantize_value(v: u8, u: f64) -> f32 {
    let x = ((f64::from(v) + u) / 256.0 - 0.5) as f32;
    let upper = ((f64::from(v) + 1.0) / 256.0 - 0.5) as f32;
    if x >= upper {
        f32_below(upper)
    } else {
        x
    }
}

/// `(v + u)/256 − 0.5` with `u ~ U[0, 1)` per value; shape `[h, w, 3]`.
pub fn dequantize(patch: &Image8, rng: &mut Rng) -> Tensor {
    let data = patch.data().iter().map(|&v| dequantize_value(v, rng.uniform())).collect();
    Tensor::from_parts(vec![patch.height(), patch.width(), 3], data).expect("shape matches buffer")
}

/// Dequantisation with `u = 0.5`, the deterministic bin centre.
pub fn normalize(patch: &Image8) -> Tensor {
    let data = patch.data().iter().map(|&v| dequantize_value(v, 0.5)).collect();
    Tensor::from_parts(vec![patch.height(), patch.width(), 3], data).expect("shape matches buffer")
}

pub fn dequantize_batch(patches: &[Image8], rng: &mut Rng) -> Result<Tensor> {
    Tensor::stack(&patches.iter().map(|p| dequantize(p, rng)).collect::<Vec<_>>())
}

pub fn normalize_batch(patches: &[Image8]) -> Result<Tensor> {
    Tensor::stack(&patches.iter().map(normalize).collect::<Vec<_>>())
}

/// Inverse of the dequantisation bins: `floor((x + 0.5)·256)` clamped to
/// `0..=255`. Bin centres therefore round half up.
pub fn quantize_value(x: f64) -> u8 {
    ((x + 0.5) * 256.0).floor().clamp(0.0, 255.0) as u8
}

/// Quantises a `[h, w, 3]` tensor back to an 8-bit image.
pub fn quantize(x: &Tensor) -> Result<Image8> {
    match *x.shape() {
        [h, w, 3] => Image8::from_raw(w, h, x.data().iter().map(|&v| quantize_value(f64::from(v))).collect()),
        _ => Err(Error::InvalidShape {
            op: "quantize",
            shape: x.shape().to_vec(),
            reason: "expected [h, w, 3]".into(),
        }),
    }
}
