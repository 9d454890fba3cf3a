use crate::data_io::Image8;
use crate::error::{Error, Result};

/// Black `block`-sized squares separated by white bars of width `bar`. Bars
/// are centred on multiples of `block + bar`, so the outermost bars are
/// half width.
pub fn render_hermann_grid(size: usize, block: usize, bar: usize) -> Result<Image8> {
    let period = block + bar;
    if block == 0 || bar == 0 || size == 0 || !size.is_multiple_of(period) {
        return Err(Error::InvalidArgument(format!(
            "grid size {size} must be a positive multiple of block + bar = {period}"
        )));
    }
    let lo = bar / 2;
    let in_block = |v: usize| (lo..lo + block).contains(&(v % period));
    let mut img = Image8::filled(size, size, [255; 3]);
    for y in 0..size {
        for x in 0..size {
            if in_block(x) && in_block(y) {
                img.set(x, y, [0; 3]);
            }
        }
    }
    Ok(img)
}

/// Interior bar intersections `(x, y)` of a grid from [`render_hermann_grid`].
pub fn intersection_centers(size: usize, block: usize, bar: usize) -> Vec<(usize, usize)> {
    let period = block + bar;
    let ticks: Vec<usize> = (1..size / period).map(|i| i * period).collect();
    ticks.iter().flat_map(|&y| ticks.iter().map(move |&x| (x, y))).collect()
}

/// `patch`-sized windows centred on each interior intersection.
pub fn intersection_patches(grid: &Image8, block: usize, bar: usize, patch: usize) -> Result<Vec<Image8>> {
    let half = patch / 2;
    intersection_centers(grid.width(), block, bar)
        .into_iter()
        .map(|(x, y)| {
            if x < half || y < half {
                return Err(Error::InvalidArgument("patch exceeds the grid border".into()));
            }
            grid.crop(x - half, y - half, patch, patch)
        })
        .collect()
}
