use crate::data_io::Image8;
use crate::error::Result;
use crate::flow::{log_likelihood, FlowParams};
use crate::training::normalize_batch;

/// Patches scored per forward pass; bounds memory on large images.
const BATCH: usize = 256;

/// NLL (nats) of each 8-bit patch under bin-centre dequantisation.
pub fn score_patches(patches: &[Image8], params: &FlowParams) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(BATCH) {
        let batch = normalize_batch(chunk)?;
        out.extend(log_likelihood(&batch, params)?.into_iter().map(|l| -l));
    }
    Ok(out)
}

/// Top-left corners of all `patch`-sized windows of an extent, `stride`
/// apart, starting at 0.
pub fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if extent < patch || stride == 0 {
        return Vec::new();
    }
    (0..=(extent - patch)).step_by(stride).collect()
}

/// Scores every stride-spaced window, row-major; returns `(rows, cols, nll)`.
pub fn score_windows(image: &Image8, params: &FlowParams, stride: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>)> {
    let p = params.config().patch_size;
    let ys = window_starts(image.height(), p, stride);
    let xs = window_starts(image.width(), p, stride);
    let mut nll = Vec::with_capacity(ys.len() * xs.len());
    let mut pending = Vec::with_capacity(BATCH);
    for &y in &ys {
        for &x in &xs {
            pending.push(image.crop(x, y, p, p)?);
            if pending.len() == BATCH {
                nll.extend(score_patches(&pending, params)?);
                pending.clear();
            }
        }
    }
    nll.extend(score_patches(&pending, params)?);
    Ok((ys, xs, nll))
}
