use log::warn;

use crate::data_io::Image8;
use crate::error::{Error, Result};
use crate::flow::FlowParams;

use super::score::score_windows;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPatch {
    pub x: usize,
    pub y: usize,
    pub nll: f64,
    pub patch: Image8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinMax {
    /// Most likely first.
    pub most_likely: Vec<ScoredPatch>,
    /// Least likely first.
    pub least_likely: Vec<ScoredPatch>,
}

/// Scores every `stride`-spaced patch and returns the `k` most and `k`
/// least likely. Equal scores keep row-major `(y, x)` order.
pub fn minmax_patches(image: &Image8, params: &FlowParams, k: usize, stride: usize) -> Result<MinMax> {
    let p = params.config().patch_size;
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument("k and stride must be positive".into()));
    }
    if image.width() < p || image.height() < p {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is smaller than the {p}px patch",
            image.width(),
            image.height()
        )));
    }
    let (ys, xs, nll) = score_windows(image, params, stride)?;
    let positions: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    if positions.len() < k {
        warn!("only {} patches available, fewer than k = {k}", positions.len());
    }
    let k = k.min(positions.len());

    let mut order: Vec<usize> = (0..positions.len()).collect();
    // stable sort keeps row-major order among equal scores
    order.sort_by(|&a, &b| nll[a].total_cmp(&nll[b]));
    let mut desc: Vec<usize> = (0..positions.len()).collect();
    desc.sort_by(|&a, &b| nll[b].total_cmp(&nll[a]));

    let pick = |idx: &[usize]| -> Result<Vec<ScoredPatch>> {
        idx.iter()
            .map(|&i| {
                let (y, x) = positions[i];
                Ok(ScoredPatch {
                    x,
                    y,
                    nll: nll[i],
                    patch: image.crop(x, y, p, p)?,
                })
            })
            .collect()
    };
    Ok(MinMax {
        most_likely: pick(&order[..k])?,
        least_likely: pick(&desc[..k])?,
    })
}

/// Mean over patches of the per-patch standard deviation of all pixel
/// values (all channels pooled).
pub fn mean_patch_std(patches: &[ScoredPatch]) -> f64 {
    if patches.is_empty() {
        return 0.0;
    }
    let total: f64 = patches
        .iter()
        .map(|s| {
            let d = s.patch.data();
            let n = d.len() as f64;
            let mean = d.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            (d.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum();
    total / patches.len() as f64
}
