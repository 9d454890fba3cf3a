use std::cmp::Ordering;
use std::io::Write;

use crate::error::{Error, Result};
use crate::flow::FlowParams;

use super::score::score_patches;
use super::templates::{Template, TEMPLATE_SIZE};

pub const LEVELS: usize = 256;

/// Scores of a template over all 256 target levels.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSweep {
    pub template: Template,
    pub nll: Vec<f64>,
    pub normalized_likelihood: Vec<f64>,
    /// Percentile rank: `100 ·` the cumulative normalised likelihood.
    pub rank: Vec<f64>,
}

impl TemplateSweep {
    /// Normalises `exp(−nll)` over the levels in the log domain and
    /// accumulates the ranks.
    pub fn from_nll(template: Template, nll: Vec<f64>) -> Result<Self> {
        if nll.len() != LEVELS {
            return Err(Error::InvalidArgument(format!("expected {LEVELS} NLL values, got {}", nll.len())));
        }
        if let Some(i) = nll.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { index: i });
        }
        let ll: Vec<f64> = nll.iter().map(|v| -v).collect();
        let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = ll.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let normalized_likelihood = weights.iter().map(|w| w / total).collect();
        let mut running = 0.0;
        let rank = weights
            .iter()
            .map(|w| {
                running += w;
                100.0 * running / total
            })
            .collect();
        Ok(Self {
            template,
            nll,
            normalized_likelihood,
            rank,
        })
    }

    /// Target level with the highest likelihood (lowest level on ties).
    pub fn argmax(&self) -> u8 {
        let mut best = 0;
        for (i, v) in self.nll.iter().enumerate() {
            if *v < self.nll[best] {
                best = i;
            }
        }
        best as u8
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "target_value,nll_nats,normalized_likelihood,percentile_rank")?;
        for i in 0..LEVELS {
            writeln!(
                w,
                "{i},{},{},{}",
                self.nll[i], self.normalized_likelihood[i], self.rank[i]
            )?;
        }
        Ok(())
    }
}

/// Renders all 256 target levels and scores them with bin-centre
/// dequantisation.
pub fn sweep_target(template: &Template, params: &FlowParams) -> Result<TemplateSweep> {
    if params.config().patch_size != TEMPLATE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "templates are {TEMPLATE_SIZE}x{TEMPLATE_SIZE} but the model takes {0}x{0} patches",
            params.config().patch_size
        )));
    }
    let patches: Vec<_> = (0..LEVELS).map(|t| template.render(t as u8)).collect();
    TemplateSweep::from_nll(*template, score_patches(&patches, params)?)
}

/// `100 · Σ_{v ≤ value} normalized_likelihood[v]`.
pub fn percentile_rank(sweep: &TemplateSweep, value: u8) -> f64 {
    sweep.rank[value as usize]
}

/// Which context is predicted to make the target look higher on the swept
/// channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AHigher,
    BHigher,
    Tie,
}

impl Direction {
    pub fn reversed(self) -> Self {
        match self {
            Direction::AHigher => Direction::BHigher,
            Direction::BHigher => Direction::AHigher,
            Direction::Tie => Direction::Tie,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextComparison {
    pub target: u8,
    pub rank_a: f64,
    pub rank_b: f64,
    /// A higher percentile rank predicts a higher perceived value.
    pub direction: Direction,
}

pub fn compare_contexts(a: &TemplateSweep, b: &TemplateSweep, target: u8) -> Result<ContextComparison> {
    if a.template.mode != b.template.mode {
        return Err(Error::InvalidArgument(format!(
            "cannot compare a {} sweep with a {} sweep",
            a.template.mode, b.template.mode
        )));
    }
    let (rank_a, rank_b) = (percentile_rank(a, target), percentile_rank(b, target));
    let direction = match rank_a.partial_cmp(&rank_b) {
        Some(Ordering::Greater) => Direction::AHigher,
        Some(Ordering::Less) => Direction::BHigher,
        _ => Direction::Tie,
    };
    Ok(ContextComparison {
        target,
        rank_a,
        rank_b,
        direction,
    })
}
