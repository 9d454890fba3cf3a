use std::fmt;
use std::str::FromStr;

use crate::data_io::{hsv_to_rgb, Hsv, Image8};
use crate::error::{Error, Result};

/// Templates are rendered at the model's 16x16 patch size.
pub const TEMPLATE_SIZE: usize = 16;

/// Fixed HSV channel values (8-bit scale) used when another channel is swept.
pub const DEFAULT_HUE_LEVEL: u8 = 30;
pub const DEFAULT_SATURATION_LEVEL: u8 = 200;
pub const DEFAULT_VALUE_LEVEL: u8 = 200;

/// Which quantity the 0..=255 levels of a template control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelMode {
    Gray,
    HsvHue,
    HsvSaturation,
    HsvValue,
}

impl ChannelMode {
    /// RGB colour for a level of the swept channel. Hue levels map linearly
    /// onto `[0, 360)` degrees, so level 255 sits next to level 0 on the hue
    /// circle.
    pub fn colour(self, level: u8) -> [u8; 3] {
        let frac = |l: u8| f64::from(l) / 255.0;
        let hue = |l: u8| f64::from(l) / 256.0 * 360.0;
        match self {
            ChannelMode::Gray => [level; 3],
            ChannelMode::HsvHue => hsv_to_rgb(Hsv {
                h: hue(level),
                s: frac(DEFAULT_SATURATION_LEVEL),
                v: frac(DEFAULT_VALUE_LEVEL),
            }),
            ChannelMode::HsvSaturation => hsv_to_rgb(Hsv {
                h: hue(DEFAULT_HUE_LEVEL),
                s: frac(level),
                v: frac(DEFAULT_VALUE_LEVEL),
            }),
            ChannelMode::HsvValue => hsv_to_rgb(Hsv {
                h: hue(DEFAULT_HUE_LEVEL),
                s: frac(DEFAULT_SATURATION_LEVEL),
                v: frac(level),
            }),
        }
    }
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelMode::Gray => "gray",
            ChannelMode::HsvHue => "hue",
            ChannelMode::HsvSaturation => "saturation",
            ChannelMode::HsvValue => "value",
        })
    }
}

impl FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" | "grey" => Ok(ChannelMode::Gray),
            "hue" | "hsv_hue" => Ok(ChannelMode::HsvHue),
            "saturation" | "hsv_saturation" => Ok(ChannelMode::HsvSaturation),
            "value" | "hsv_value" => Ok(ChannelMode::HsvValue),
            _ => Err(Error::InvalidArgument(format!(
                "unknown channel mode {s:?} (expected gray, hue, saturation or value)"
            ))),
        }
    }
}

/// Polarity of White's illusion: which bar the target interrupts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BarPolarity {
    /// Black top and bottom thirds, target interrupts a white bar.
    WhiteBar,
    /// White top and bottom thirds, target interrupts a black bar.
    BlackBar,
}

impl FromStr for BarPolarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white_bar" | "white" => Ok(BarPolarity::WhiteBar),
            "black_bar" | "black" => Ok(BarPolarity::BlackBar),
            _ => Err(Error::InvalidArgument(format!(
                "unknown bar polarity {s:?} (expected white_bar or black_bar)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    /// Uniform surround with an 8x8 centre square.
    Contrast { surround: u8 },
    Whites { polarity: BarPolarity },
    /// White cross (bars 6 wide) on black with the centre square as target.
    HermannCross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Template {
    pub kind: TemplateKind,
    pub mode: ChannelMode,
}

const CONTRAST_CENTRE: std::ops::Range<usize> = 4..12;
const WHITES_MIDDLE_ROWS: std::ops::Range<usize> = 5..11;
const WHITES_TARGET_COLS: std::ops::Range<usize> = 4..12;
const CROSS_BAR: std::ops::Range<usize> = 5..11;

impl Template {
    pub fn contrast(surround: u8, mode: ChannelMode) -> Self {
        Self {
            kind: TemplateKind::Contrast { surround },
            mode,
        }
    }

    pub fn whites(polarity: BarPolarity) -> Self {
        Self {
            kind: TemplateKind::Whites { polarity },
            mode: ChannelMode::Gray,
        }
    }

    pub fn hermann_cross() -> Self {
        Self {
            kind: TemplateKind::HermannCross,
            mode: ChannelMode::Gray,
        }
    }

    /// Level (of the swept channel) at pixel `(x, y)` for a given target.
    pub fn level_at(&self, x: usize, y: usize, target: u8) -> u8 {
        match self.kind {
            TemplateKind::Contrast { surround } => {
                if CONTRAST_CENTRE.contains(&x) && CONTRAST_CENTRE.contains(&y) {
                    target
                } else {
                    surround
                }
            }
            TemplateKind::Whites { polarity } => {
                let (outer, flank) = match polarity {
                    BarPolarity::WhiteBar => (0, 255),
                    BarPolarity::BlackBar => (255, 0),
                };
                if !WHITES_MIDDLE_ROWS.contains(&y) {
                    outer
                } else if WHITES_TARGET_COLS.contains(&x) {
                    target
                } else {
                    flank
                }
            }
            TemplateKind::HermannCross => match (CROSS_BAR.contains(&x), CROSS_BAR.contains(&y)) {
                (true, true) => target,
                (true, false) | (false, true) => 255,
                (false, false) => 0,
            },
        }
    }

    /// Whether `(x, y)` belongs to the swept target region.
    pub fn is_target(&self, x: usize, y: usize) -> bool {
        match self.kind {
            TemplateKind::Contrast { .. } => CONTRAST_CENTRE.contains(&x) && CONTRAST_CENTRE.contains(&y),
            TemplateKind::Whites { .. } => WHITES_MIDDLE_ROWS.contains(&y) && WHITES_TARGET_COLS.contains(&x),
            TemplateKind::HermannCross => CROSS_BAR.contains(&x) && CROSS_BAR.contains(&y),
        }
    }

    pub fn render(&self, target: u8) -> Image8 {
        let mut img = Image8::new(TEMPLATE_SIZE, TEMPLATE_SIZE);
        for y in 0..TEMPLATE_SIZE {
            for x in 0..TEMPLATE_SIZE {
                img.set(x, y, self.mode.colour(self.level_at(x, y, target)));
            }
        }
        img
    }
}

pub fn make_contrast_template(surround: u8, target: u8, mode: ChannelMode) -> Image8 {
    Template::contrast(surround, mode).render(target)
}

pub fn make_whites_template(polarity: BarPolarity, target: u8) -> Image8 {
    Template::whites(polarity).render(target)
}

pub fn make_hermann_cross_template(target: u8) -> Image8 {
    Template::hermann_cross().render(target)
}
