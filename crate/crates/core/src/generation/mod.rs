//! Illusion generation: every patch outside the protected target is pushed
//! through the flow, nudged towards higher (or lower) latent density and
//! decoded, and the overlapping results are averaged back into an image.

use log::warn;

use crate::analysis::window_starts;
use crate::data_io::Image8;
use crate::error::{Error, Result};
use crate::flow::{flow_forward, flow_inverse, FlowParams};
use crate::numerics::{lit, Real, Tensor};
use crate::training::{normalize_batch, quantize_value};

/// Patches decoded per forward/inverse pass.
const BATCH: usize = 64;

/// Default step sizes: towards higher and towards lower likelihood.
pub const ETA_INCREASE: f64 = 0.6;
pub const ETA_DECREASE: f64 = -0.8;

/// Protected target pixels (`true`) of an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "mask of {} values does not match {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Nonzero pixels (any channel) are targets.
    pub fn from_image(img: &Image8) -> Self {
        let bits = img.data().chunks(3).map(|p| p.iter().any(|&v| v != 0)).collect();
        Self {
            width: img.width(),
            height: img.height(),
            bits,
        }
    }

    /// Marks the rectangle `[x, x + w) x [y, y + h)` (clipped to the mask).
    pub fn with_rect(mut self, x: usize, y: usize, w: usize, h: usize) -> Self {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.bits[yy * self.width + xx] = true;
            }
        }
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Black/white rendering (white = target).
    pub fn to_image(&self) -> Image8 {
        let gray: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        Image8::from_gray(self.width, self.height, &gray).expect("extents match")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManipulationConfig {
    /// Signed latent step size; positive raises likelihood.
    pub eta: f64,
    pub stride: usize,
    pub patch_size: usize,
}

impl Default for ManipulationConfig {
    fn default() -> Self {
        Self {
            eta: ETA_INCREASE,
            stride: 8,
            patch_size: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridEntry {
    pub x: usize,
    pub y: usize,
    /// Overlaps the mask; left unmodified and ignored when recomposing.
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// Row-major order of top-left corners.
    pub entries: Vec<GridEntry>,
    /// Number of kept patches covering each pixel.
    pub coverage: Vec<u32>,
}

impl PatchGrid {
    pub fn kept(&self) -> impl Iterator<Item = &GridEntry> {
        self.entries.iter().filter(|e| !e.excluded)
    }

    pub fn kept_count(&self) -> usize {
        self.kept().count()
    }

    /// Unmasked pixels no kept patch covers; they keep their input values.
    pub fn uncovered(&self, mask: &Mask) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !mask.get(x, y) && self.coverage[y * self.width + x] == 0 {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Stride-spaced starts plus a final start flush with the far edge.
fn grid_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v = window_starts(extent, patch, stride);
    if v.last().is_some_and(|&last| last + patch < extent) {
        v.push(extent - patch);
    }
    v
}

pub fn extract_patches(image: &Image8, mask: &Mask, cfg: &ManipulationConfig) -> Result<PatchGrid> {
    let p = cfg.patch_size;
    if (mask.width, mask.height) != (image.width(), image.height()) {
        return Err(Error::InvalidArgument(format!(
            "mask is {}x{} but image is {}x{}",
            mask.width,
            mask.height,
            image.width(),
            image.height()
        )));
    }
    if cfg.stride == 0 || p == 0 {
        return Err(Error::InvalidArgument("stride and patch size must be positive".into()));
    }
    if image.width() < p || image.height() < p {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is smaller than the {p}px patch",
            image.width(),
            image.height()
        )));
    }
    let (w, h) = (image.width(), image.height());
    let mut entries = Vec::new();
    let mut coverage = vec![0u32; w * h];
    for y in grid_starts(h, p, cfg.stride) {
        for x in grid_starts(w, p, cfg.stride) {
            let excluded = (y..y + p).any(|yy| (x..x + p).any(|xx| mask.get(xx, yy)));
            if !excluded {
                for yy in y..y + p {
                    for c in &mut coverage[yy * w + x..yy * w + x + p] {
                        *c += 1;
                    }
                }
            }
            entries.push(GridEntry { x, y, excluded });
        }
    }
    let grid = PatchGrid {
        width: w,
        height: h,
        patch_size: p,
        stride: cfg.stride,
        entries,
        coverage,
    };
    let uncovered = grid.uncovered(mask).len();
    if uncovered > 0 {
        warn!("{uncovered} unmasked pixel(s) lie only in excluded patches and stay unchanged");
    }
    Ok(grid)
}

/// `z − η·z·exp(−z²/2)`, elementwise.
pub fn latent_step<T: Real>(z: &Tensor<T>, eta: f64) -> Tensor<T> {
    z.map(|v| {
        let x = v.to_f64().unwrap();
        lit(x - eta * x * (-0.5 * x * x).exp())
    })
}

/// Largest value a normalised pixel may take (just below 0.5).
fn upper_bound() -> f32 {
    f32::from_bits(0.5f32.to_bits() - 1)
}

/// Encodes, steps in latent space and decodes a batch `[N, P, P, C]` (or a
/// single patch), clamping the result to the normalised pixel range.
pub fn manipulate_patch(x: &Tensor, eta: f64, params: &FlowParams) -> Result<Tensor> {
    let (z, _) = flow_forward(x, params)?;
    let decoded = flow_inverse(&latent_step(&z, eta), params)?;
    let hi = upper_bound();
    Ok(decoded.map(|v| v.clamp(-0.5, hi)))
}

/// Averages the kept patches back into `original`. `manipulated[i]` is the
/// `[P, P, 3]` result for the i-th kept grid entry.
pub fn recompose(grid: &PatchGrid, manipulated: &[Tensor], original: &Image8) -> Result<Image8> {
    let p = grid.patch_size;
    if manipulated.len() != grid.kept_count() {
        return Err(Error::InvalidArgument(format!(
            "{} manipulated patches for {} kept grid entries",
            manipulated.len(),
            grid.kept_count()
        )));
    }
    if (original.width(), original.height()) != (grid.width, grid.height) {
        return Err(Error::InvalidArgument("original image does not match the grid".into()));
    }
    let w = grid.width;
    let mut sum = vec![0.0f64; w * grid.height * 3];
    let mut count = vec![0u32; w * grid.height];
    for (entry, patch) in grid.kept().zip(manipulated) {
        if patch.shape() != [p, p, 3] {
            return Err(Error::ShapeMismatch {
                op: "recompose",
                lhs: vec![p, p, 3],
                rhs: patch.shape().to_vec(),
            });
        }
        for (dy, row) in patch.data().chunks(p * 3).enumerate() {
            let pix = (entry.y + dy) * w + entry.x;
            for (k, v) in row.iter().enumerate() {
                sum[pix * 3 + k] += f64::from(*v);
            }
            for c in &mut count[pix..pix + p] {
                *c += 1;
            }
        }
    }
    let mut out = original.clone();
    for y in 0..grid.height {
        for x in 0..w {
            let i = y * w + x;
            if count[i] > 0 {
                let n = f64::from(count[i]);
                let rgb = [0, 1, 2].map(|k| quantize_value(sum[i * 3 + k] / n));
                out.set(x, y, rgb);
            }
        }
    }
    Ok(out)
}

/// Full pipeline: extract, manipulate every kept patch, recompose. Pixels
/// under the mask are returned bit-identical to the input.
pub fn generate_illusion(image: &Image8, mask: &Mask, params: &FlowParams, cfg: &ManipulationConfig) -> Result<Image8> {
    if cfg.patch_size != params.config().patch_size {
        return Err(Error::InvalidArgument(format!(
            "patch size {} differs from the model's {}",
            cfg.patch_size,
            params.config().patch_size
        )));
    }
    if !cfg.eta.is_finite() {
        return Err(Error::InvalidArgument(format!("eta must be finite, got {}", cfg.eta)));
    }
    if cfg.eta > 1.0 {
        warn!("eta {} > 1 can move latent values past zero", cfg.eta);
    }
    let grid = extract_patches(image, mask, cfg)?;
    let p = cfg.patch_size;
    let kept: Vec<GridEntry> = grid.kept().copied().collect();
    let mut manipulated = Vec::with_capacity(kept.len());
    for chunk in kept.chunks(BATCH) {
        let patches = chunk
            .iter()
            .map(|e| image.crop(e.x, e.y, p, p))
            .collect::<Result<Vec<_>>>()?;
        let x = normalize_batch(&patches)?;
        manipulated.extend(manipulate_patch(&x, cfg.eta, params)?.unstack());
    }
    let mut out = recompose(&grid, &manipulated, image)?;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(x, y) {
                out.set(x, y, image.get(x, y));
            }
        }
    }
    Ok(out)
}
