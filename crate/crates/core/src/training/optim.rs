use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::flow::{log_likelihood, nll_and_gradient, FlowConfig, FlowParams};
use crate::numerics::linalg::{Lu, MIN_ABS_DET};
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP_NORM: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub flow: FlowConfig,
    pub batch_size: usize,
    /// Total number of optimisation steps; a resumed run continues up to it.
    pub steps: u64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub checkpoint_every: u64,
    /// Where periodic checkpoints are written (overwritten each time).
    pub checkpoint_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            batch_size: 256,
            steps: 2000,
            learning_rate: 1e-4,
            warmup_steps: 500,
            checkpoint_every: 500,
            checkpoint_path: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} must be positive")));
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be at least 2".into()));
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Linear warmup: `lr · min(1, (step + 1) / warmup)`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// First and second moment estimates, one tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros(params: &FlowParams) -> Self {
        let m: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { v: m.clone(), m }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean NLL of the batch before the update, in nats.
    pub nll: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub learning_rate: f64,
    pub skipped: bool,
}

/// Mean negative log-likelihood of a batch `[N, P, P, C]` in nats.
pub fn nll_loss(batch: &Tensor, params: &FlowParams) -> Result<f64> {
    let ll = match log_likelihood(batch, params) {
        Err(Error::NonFinite { .. }) if batch.rank() == 4 => {
            // locate the first offending patch
            for (index, x) in batch.unstack().iter().enumerate() {
                if log_likelihood(x, params).map_or(true, |v| !v[0].is_finite()) {
                    return Err(Error::NonFiniteLoss { index });
                }
            }
            return Err(Error::NonFinite { op: "nll_loss" });
        }
        r => r?,
    };
    if ll.is_empty() {
        return Err(Error::InvalidArgument("nll_loss needs a nonempty batch".into()));
    }
    let mut total = 0.0;
    for (index, v) in ll.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        total -= v;
    }
    Ok(total / ll.len() as f64)
}

fn is_numerical_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::SingularMatrix { .. }
    )
}

fn invconv_ok(params: &FlowParams) -> bool {
    params
        .steps()
        .iter()
        .all(|s| Lu::new(&s.invconv.weight).is_ok_and(|lu| lu.det().abs() > MIN_ABS_DET))
}

/// One clipped, warmed-up Adam update at global step `step` (0-based).
///
/// A step whose loss or gradient is not finite, or which would make an
/// invertible 1x1 convolution singular, leaves parameters and moments
/// untouched and is reported with `skipped = true`.
pub fn train_step(
    params: &FlowParams,
    state: &AdamState,
    batch: &Tensor,
    config: &TrainConfig,
    step: u64,
) -> Result<(FlowParams, AdamState, StepMetrics)> {
    let lr = config.learning_rate_at(step);
    let skip = |nll: f64, grad_norm: f64| {
        log::warn!("step {step}: non-finite loss, gradient or update, or singular 1x1 convolution; update skipped");
        Ok((
            params.clone(),
            state.clone(),
            StepMetrics {
                step,
                nll,
                grad_norm,
                learning_rate: lr,
                skipped: true,
            },
        ))
    };
    let (nll, grads) = match nll_and_gradient(params, batch) {
        Ok(r) => r,
        Err(e) if is_numerical_failure(&e) => return skip(f64::NAN, f64::NAN),
        Err(e) => return Err(e),
    };
    let grad_norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v).powi(2))
        .sum::<f64>()
        .sqrt();
    if !nll.is_finite() || !grad_norm.is_finite() {
        return skip(nll, grad_norm);
    }
    let clip = if grad_norm > GRAD_CLIP_NORM {
        GRAD_CLIP_NORM / grad_norm
    } else {
        1.0
    };
    let t = (step + 1) as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);

    let mut next = params.clone();
    let mut next_state = state.clone();
    for (((p, g), m), v) in next
        .tensors_mut()
        .into_iter()
        .zip(&grads)
        .zip(&mut next_state.m)
        .zip(&mut next_state.v)
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = f64::from(g.data()[i]) * clip;
            let mi = BETA1 * f64::from(m[i]) + (1.0 - BETA1) * gi;
            let vi = BETA2 * f64::from(v[i]) + (1.0 - BETA2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            p[i] = (f64::from(p[i]) - update) as f32;
        }
    }
    let finite = next.tensors().iter().all(|t| t.is_finite());
    if !finite || !invconv_ok(&next) {
        return skip(nll, grad_norm);
    }
    Ok((
        next,
        next_state,
        StepMetrics {
            step,
            nll,
            grad_norm,
            learning_rate: lr,
            skipped: false,
        },
    ))
}
