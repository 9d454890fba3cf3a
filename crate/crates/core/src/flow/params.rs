use crate::error::{Error, Result};
use crate::numerics::linalg::{identity, random_orthogonal};
use crate::numerics::{gaussian_sample, lit, Real, Rng, Tensor};

/// Hyperparameters of the patch flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowConfig {
    /// Side of the square input patch, in pixels.
    pub patch_size: usize,
    /// Input channels before the squeeze.
    pub channels: usize,
    /// Number of (actnorm, invconv, coupling) steps.
    pub steps: usize,
    /// Channel count of the coupling networks' hidden layers.
    pub hidden_width: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            channels: 3,
            steps: 32,
            hidden_width: 128,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "patch size must be positive and even, got {}",
                self.patch_size
            )));
        }
        if self.channels == 0 || self.steps == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidArgument(format!(
                "channels, steps and hidden width must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Channels after the 2x2 squeeze.
    pub fn squeezed_channels(&self) -> usize {
        4 * self.channels
    }

    pub fn latent_side(&self) -> usize {
        self.patch_size / 2
    }

    /// Total dimensionality D of a patch (and of its latent code).
    pub fn dims(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        [self.patch_size, self.patch_size, self.channels]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_side();
        [s, s, self.squeezed_channels()]
    }

    /// Shapes of the per-step tensors in canonical order.
    pub fn step_shapes(&self) -> [Vec<usize>; TENSORS_PER_STEP] {
        let c = self.squeezed_channels();
        let half = c / 2;
        let h = self.hidden_width;
        [
            vec![c],
            vec![c],
            vec![c, c],
            vec![3, 3, half, h],
            vec![h],
            vec![3, 3, h, h],
            vec![h],
            vec![3, 3, h, c],
            vec![c],
        ]
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        (0..self.steps).flat_map(|_| self.step_shapes()).collect()
    }
}

pub const TENSORS_PER_STEP: usize = 9;

/// Per-channel affine normalisation, stored as log-scale so the scale stays
/// strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ActNormParams<T: Real = f32> {
    pub log_scale: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ActNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            log_scale: Tensor::zeros(&[channels]),
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn from_scale(scale: &Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if scale.data().iter().any(|&s| !(s > T::zero())) {
            return Err(Error::InvalidArgument(
                "actnorm scale must be strictly positive".into(),
            ));
        }
        if scale.shape() != bias.shape() || scale.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "actnorm",
                lhs: scale.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            log_scale: scale.map(|s| s.ln()),
            bias,
        })
    }

    pub fn scale(&self) -> Tensor<T> {
        self.log_scale.map(|v| v.exp())
    }
}

/// Invertible 1x1 convolution: a dense `C x C` channel-mixing matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct InvConvParams<T: Real = f32> {
    pub weight: Tensor<T>,
}

/// Affine coupling network: three 3x3 convolutions with tanh between them.
/// The last layer emits `C` channels: raw log-scale for the first half,
/// shift for the second.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingParams<T: Real = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStep<T: Real = f32> {
    pub actnorm: ActNormParams<T>,
    pub invconv: InvConvParams<T>,
    pub coupling: CouplingParams<T>,
}

/// All learned parameters of the flow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams<T: Real = f32> {
    config: FlowConfig,
    steps: Vec<FlowStep<T>>,
}

/// Raw coupling output that saturates `sigmoid(raw + 2)` to exactly 1.
const SATURATING_LOG_SCALE: f64 = 60.0;

impl<T: Real> FlowParams<T> {
    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn steps(&self) -> &[FlowStep<T>] {
        &self.steps
    }

    pub fn steps_mut(&mut self) -> &mut [FlowStep<T>] {
        &mut self.steps
    }

    /// The flow that maps every patch to its squeezed self with zero log-det:
    /// unit actnorm, identity mixing, and couplings whose scale saturates to
    /// exactly 1 with zero shift.
    pub fn identity(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let c = config.squeezed_channels();
        let h = config.hidden_width;
        let steps = (0..config.steps)
            .map(|_| {
                let mut b3 = Tensor::zeros(&[c]);
                for v in &mut b3.data_mut()[..c / 2] {
                    *v = lit(SATURATING_LOG_SCALE);
                }
                FlowStep {
                    actnorm: ActNormParams::identity(c),
                    invconv: InvConvParams {
                        weight: identity(c),
                    },
                    coupling: CouplingParams {
                        w1: Tensor::zeros(&[3, 3, c / 2, h]),
                        b1: Tensor::zeros(&[h]),
                        w2: Tensor::zeros(&[3, 3, h, h]),
                        b2: Tensor::zeros(&[h]),
                        w3: Tensor::zeros(&[3, 3, h, c]),
                        b3,
                    },
                }
            })
            .collect();
        Ok(Self { config, steps })
    }

    /// Training initialisation: unit actnorm (set later from data), random
    /// orthogonal mixing, fan-in scaled hidden convolutions and a zero final
    /// coupling layer.
    pub fn init(config: FlowConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.squeezed_channels();
        let h = config.hidden_width;
        let fan = |cin: usize| lit::<T>((1.0 / (9.0 * cin as f64)).sqrt());
        let steps = (0..config.steps)
            .map(|_| {
                let s1 = fan(c / 2);
                let s2 = fan(h);
                FlowStep {
                    actnorm: ActNormParams::identity(c),
                    invconv: InvConvParams {
                        weight: random_orthogonal(rng, c),
                    },
                    coupling: CouplingParams {
                        w1: gaussian_sample::<T>(rng, &[3, 3, c / 2, h]).map(|v| v * s1),
                        b1: Tensor::zeros(&[h]),
                        w2: gaussian_sample::<T>(rng, &[3, 3, h, h]).map(|v| v * s2),
                        b2: Tensor::zeros(&[h]),
                        w3: Tensor::zeros(&[3, 3, h, c]),
                        b3: Tensor::zeros(&[c]),
                    },
                }
            })
            .collect();
        Ok(Self { config, steps })
    }

    /// Fully random valid parameters with every tensor non-zero; `spread`
    /// scales the perturbation away from the identity.
    pub fn random(config: FlowConfig, rng: &mut Rng, spread: f64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::init(config, rng)?;
        let s: T = lit(spread);
        for step in &mut p.steps {
            step.actnorm.log_scale = gaussian_sample::<T>(rng, step.actnorm.log_scale.shape()).map(|v| v * s);
            step.actnorm.bias = gaussian_sample::<T>(rng, step.actnorm.bias.shape()).map(|v| v * s);
            let cp = &mut step.coupling;
            let w3_scale = lit::<T>(0.5 * spread) * lit((1.0 / (9.0 * config.hidden_width as f64)).sqrt());
            cp.w3 = gaussian_sample::<T>(rng, cp.w3.shape()).map(|v| v * w3_scale);
            cp.b1 = gaussian_sample::<T>(rng, cp.b1.shape()).map(|v| v * s);
            cp.b2 = gaussian_sample::<T>(rng, cp.b2.shape()).map(|v| v * s);
            cp.b3 = gaussian_sample::<T>(rng, cp.b3.shape()).map(|v| v * s);
        }
        Ok(p)
    }

    /// All tensors in canonical order: per step, actnorm log-scale, actnorm
    /// bias, mixing matrix, then w1, b1, w2, b2, w3, b3 of the coupling net.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.steps
            .iter()
            .flat_map(|s| {
                [
                    &s.actnorm.log_scale,
                    &s.actnorm.bias,
                    &s.invconv.weight,
                    &s.coupling.w1,
                    &s.coupling.b1,
                    &s.coupling.w2,
                    &s.coupling.b2,
                    &s.coupling.w3,
                    &s.coupling.b3,
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.steps
            .iter_mut()
            .flat_map(|s| {
                [
                    &mut s.actnorm.log_scale,
                    &mut s.actnorm.bias,
                    &mut s.invconv.weight,
                    &mut s.coupling.w1,
                    &mut s.coupling.b1,
                    &mut s.coupling.w2,
                    &mut s.coupling.b2,
                    &mut s.coupling.w3,
                    &mut s.coupling.b3,
                ]
            })
            .collect()
    }

    pub fn from_tensors(config: FlowConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (t, s) in tensors.iter().zip(&shapes) {
            if t.shape() != s.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "FlowParams::from_tensors",
                    lhs: s.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let steps = (0..config.steps)
            .map(|_| FlowStep {
                actnorm: ActNormParams {
                    log_scale: next(),
                    bias: next(),
                },
                invconv: InvConvParams { weight: next() },
                coupling: CouplingParams {
                    w1: next(),
                    b1: next(),
                    w2: next(),
                    b2: next(),
                    w3: next(),
                    b3: next(),
                },
            })
            .collect();
        Ok(Self { config, steps })
    }

    pub fn cast<U: Real>(&self) -> FlowParams<U> {
        FlowParams::from_tensors(self.config, self.tensors().into_iter().map(Tensor::cast).collect())
            .expect("same layout")
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}
