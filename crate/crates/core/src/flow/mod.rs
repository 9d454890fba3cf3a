//! The invertible patch-density model.
//!
//! A patch `[P, P, 3]` is squeezed once to `[P/2, P/2, 12]` and then passed
//! through `K` steps of actnorm, invertible 1x1 convolution and affine
//! coupling. The latent code has the same dimensionality as the patch and a
//! standard-normal prior, so the log-likelihood is exact:
//! `log p(x) = log N(f(x); 0, I) + Σ log |det ∂h_i/∂h_{i-1}|`.

pub mod graph;
pub mod layers;
pub mod model;
pub mod params;

pub use graph::{nll_and_gradient, record_mean_nll, record_params};
pub use layers::{actnorm_apply, coupling_apply, invconv_apply, squeeze, Direction};
pub use model::{
    actnorm_initialize, bits_per_dim, flow_forward, flow_inverse, log_likelihood, sample_patch,
    standard_normal_log_density,
};
pub use params::{ActNormParams, CouplingParams, FlowConfig, FlowParams, FlowStep, InvConvParams};
