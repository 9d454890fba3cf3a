use std::io::Write;

use log::warn;

use crate::data_io::Image8;
use crate::error::{Error, Result};
use crate::flow::FlowParams;

use super::score::score_windows;

/// Per-position NLL of the overlapping patches of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct NllHeatmap {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub patch_size: usize,
    /// Row-major, `rows x cols`, in nats.
    pub values: Vec<f64>,
}

/// Linear min-max mapping used for the PNG rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl NllHeatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        for row in self.values.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Grayscale rendering, one pixel per cell: the lowest NLL maps to 0
    /// and the highest to 255. A constant map renders black.
    pub fn to_image(&self) -> (Image8, Normalization) {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let gray: Vec<u8> = self
            .values
            .iter()
            .map(|v| {
                if span > 0.0 {
                    ((v - min) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        let img = Image8::from_gray(self.cols, self.rows, &gray).expect("grid extents match values");
        (img, Normalization { min, max })
    }
}

pub fn nll_heatmap(image: &Image8, params: &FlowParams, stride: usize) -> Result<NllHeatmap> {
    let p = params.config().patch_size;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if image.width() < p || image.height() < p {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is smaller than the {p}px patch",
            image.width(),
            image.height()
        )));
    }
    if !(image.width() - p).is_multiple_of(stride) || !(image.height() - p).is_multiple_of(stride) {
        warn!("stride {stride} leaves the right/bottom image border unscored");
    }
    let (ys, xs, values) = score_windows(image, params, stride)?;
    Ok(NllHeatmap {
        rows: ys.len(),
        cols: xs.len(),
        stride,
        patch_size: p,
        values,
    })
}
