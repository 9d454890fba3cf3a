//! Procedural "dead leaves" scenes: occluding shaded shapes with power-law
//! sizes. Their patch statistics (large smooth regions, sharp occlusion
//! edges, elongated structures, scale invariance) stand in for natural
//! photographs when no photo corpus is at hand.

use std::path::{Path, PathBuf};

use crate::data_io::{hsv_to_rgb, save_image, Hsv, Image8};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Standard deviation of additive pixel noise, in 8-bit levels.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            shapes: 60,
            min_radius: 3.0,
            max_radius: 48.0,
            noise: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk { r: f64 },
    Rect { half_w: f64, half_h: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Leaf {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    shape: Shape,
    colour: [f64; 3],
    // brightness change per pixel along the rotated x and y axes
    shade: [f64; 2],
}

impl Leaf {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        match self.shape {
            Shape::Disk { r } => u * u + v * v <= r * r,
            Shape::Rect { half_w, half_h } => u.abs() <= half_w && v.abs() <= half_h,
        }
    }

    fn colour_at(&self, x: f64, y: f64) -> [f64; 3] {
        let (u, v) = self.local(x, y);
        let d = self.shade[0] * u + self.shade[1] * v;
        self.colour.map(|c| c + d)
    }
}

/// Radius from a truncated `r^-3` law (scale-invariant occlusion statistics).
fn power_law_radius(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo.powi(-2), hi.powi(-2));
    (a - rng.uniform() * (a - b)).powf(-0.5)
}

fn random_colour(rng: &mut Rng) -> [f64; 3] {
    // mostly desaturated, as in natural scenes
    let hsv = Hsv {
        h: rng.uniform() * 360.0,
        s: rng.uniform().powi(2) * 0.7,
        v: 0.08 + 0.88 * rng.uniform(),
    };
    hsv_to_rgb(hsv).map(f64::from)
}

fn random_leaf(rng: &mut Rng, cfg: &SceneConfig) -> Leaf {
    let r = power_law_radius(rng, cfg.min_radius, cfg.max_radius);
    let theta = if rng.uniform() < 0.5 {
        // axis-aligned structure is common in scenes
        (rng.below(4) as f64) * std::f64::consts::FRAC_PI_2
    } else {
        rng.uniform() * std::f64::consts::PI
    };
    let shape = match rng.below(3) {
        0 => Shape::Disk { r },
        1 => Shape::Rect {
            half_w: r,
            half_h: r * (0.4 + 0.6 * rng.uniform()),
        },
        _ => Shape::Rect {
            half_w: r * 2.0,
            half_h: (r * 0.15).max(1.0),
        },
    };
    let margin = r;
    Leaf {
        cx: -margin + rng.uniform() * (cfg.width as f64 + 2.0 * margin),
        cy: -margin + rng.uniform() * (cfg.height as f64 + 2.0 * margin),
        cos: theta.cos(),
        sin: theta.sin(),
        shape,
        colour: random_colour(rng),
        shade: [rng.gaussian() * 40.0 / r.max(4.0), rng.gaussian() * 40.0 / r.max(4.0)],
    }
}

pub fn dead_leaves(cfg: &SceneConfig, rng: &mut Rng) -> Result<Image8> {
    if cfg.width == 0 || cfg.height == 0 || !(cfg.min_radius > 0.0 && cfg.min_radius <= cfg.max_radius) {
        return Err(Error::InvalidArgument(format!("invalid scene configuration {cfg:?}")));
    }
    let background = random_colour(rng);
    let tilt = rng.gaussian() * 30.0 / cfg.height as f64;
    let leaves: Vec<Leaf> = (0..cfg.shapes).map(|_| random_leaf(rng, cfg)).collect();
    let mut img = Image8::new(cfg.width, cfg.height);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            // later leaves lie on top
            let c = leaves
                .iter()
                .rev()
                .find(|l| l.contains(fx, fy))
                .map(|l| l.colour_at(fx, fy))
                .unwrap_or(background.map(|b| b + tilt * fy));
            let px = c.map(|v| (v + cfg.noise * rng.gaussian()).round().clamp(0.0, 255.0) as u8);
            img.set(x, y, px);
        }
    }
    Ok(img)
}

/// Writes `count` scenes named `scene_0000.png`, ... into `dir`. Scene `i`
/// depends only on `(seed, i)`.
pub fn write_corpus(dir: impl AsRef<Path>, count: usize, cfg: &SceneConfig, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let mut rng = Rng::with_stream(seed, i as u64);
            let img = dead_leaves(cfg, &mut rng)?;
            let path = dir.join(format!("scene_{i:04}.png"));
            save_image(&img, &path)?;
            Ok(path)
        })
        .collect()
}
