use std::f64::consts::PI;

use log::warn;

use super::layers::{actnorm_apply, coupling_apply, invconv_apply, squeeze, Direction};
use super::params::FlowParams;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, lit, Real, Rng, Tensor};

/// Patches per forward pass when scoring large batches.
const SCORE_CHUNK: usize = 64;

fn as_batch<T: Real>(x: &Tensor<T>, expected: [usize; 3], op: &'static str) -> Result<(Tensor<T>, bool)> {
    match x.shape() {
        s if s == expected => Ok((x.clone().reshape(&[1, expected[0], expected[1], expected[2]])?, true)),
        [_, a, b, c] if [*a, *b, *c] == expected => Ok((x.clone(), false)),
        s => Err(Error::ShapeMismatch {
            op,
            lhs: expected.to_vec(),
            rhs: s.to_vec(),
        }),
    }
}

fn strip_batch<T: Real>(t: Tensor<T>, single: bool) -> Result<Tensor<T>> {
    if single {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    } else {
        Ok(t)
    }
}

/// Maps patches to latent codes. Accepts one patch `[P, P, C]` or a batch
/// `[N, P, P, C]`; returns codes of matching rank and the per-patch total
/// `log |det J|`.
pub fn flow_forward<T: Real>(x: &Tensor<T>, params: &FlowParams<T>) -> Result<(Tensor<T>, Vec<f64>)> {
    let cfg = params.config();
    let (xb, single) = as_batch(x, cfg.patch_shape(), "flow_forward")?;
    let n = xb.shape()[0];
    let mut h = squeeze(&xb, Direction::Forward)?;
    let mut logdet = vec![0.0; n];
    for step in params.steps() {
        let (y, ld) = actnorm_apply(&h, &step.actnorm, Direction::Forward)?;
        h = y;
        accumulate(&mut logdet, &ld);
        let (y, ld) = invconv_apply(&h, &step.invconv, Direction::Forward)?;
        h = y;
        accumulate(&mut logdet, &ld);
        let (y, ld) = coupling_apply(&h, &step.coupling, Direction::Forward)?;
        h = y;
        accumulate(&mut logdet, &ld);
    }
    Ok((strip_batch(h, single)?, logdet))
}

fn accumulate(total: &mut [f64], part: &[f64]) {
    for (t, p) in total.iter_mut().zip(part) {
        *t += p;
    }
}

/// Exact inverse of [`flow_forward`].
pub fn flow_inverse<T: Real>(z: &Tensor<T>, params: &FlowParams<T>) -> Result<Tensor<T>> {
    let cfg = params.config();
    let (mut h, single) = as_batch(z, cfg.latent_shape(), "flow_inverse")?;
    for step in params.steps().iter().rev() {
        h = coupling_apply(&h, &step.coupling, Direction::Inverse)?.0;
        h = invconv_apply(&h, &step.invconv, Direction::Inverse)?.0;
        h = actnorm_apply(&h, &step.actnorm, Direction::Inverse)?.0;
    }
    strip_batch(squeeze(&h, Direction::Inverse)?, single)
}

/// `log N(z; 0, I)` of one latent vector.
pub fn standard_normal_log_density<T: Real>(z: &[T]) -> f64 {
    let sq: f64 = z.iter().map(|v| v.to_f64().unwrap().powi(2)).sum();
    -0.5 * z.len() as f64 * (2.0 * PI).ln() - 0.5 * sq
}

/// Exact log-likelihood (nats) of each patch: the standard-normal density of
/// its code plus the flow's log-determinant.
pub fn log_likelihood<T: Real>(x: &Tensor<T>, params: &FlowParams<T>) -> Result<Vec<f64>> {
    let cfg = params.config();
    let (xb, _) = as_batch(x, cfg.patch_shape(), "log_likelihood")?;
    let n = xb.shape()[0];
    let d = cfg.dims();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = SCORE_CHUNK.min(n - start);
        let chunk = xb.slice_batch(start, len)?;
        let (z, logdet) = flow_forward(&chunk, params)?;
        for (zi, ld) in z.data().chunks(d).zip(&logdet) {
            out.push(standard_normal_log_density(zi) + ld);
        }
        start += len;
    }
    Ok(out)
}

/// Bits per dimension of a continuous NLL, plus `log2(levels)` for the
/// dequantisation bin width (pass `levels = 1` for no offset).
pub fn bits_per_dim(nll_nats: f64, dims: usize, levels: u32) -> f64 {
    assert!(dims > 0, "bits_per_dim needs a positive dimension");
    nll_nats / (dims as f64 * std::f64::consts::LN_2) + f64::from(levels.max(1)).log2()
}

/// Draws `x = f⁻¹(temperature · ε)`, `ε ~ N(0, I)`.
pub fn sample_patch<T: Real>(params: &FlowParams<T>, rng: &mut Rng, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be non-negative, got {temperature}"
        )));
    }
    let shape = params.config().latent_shape();
    let t: T = lit(temperature);
    let z = gaussian_sample::<T>(rng, &shape).map(|v| v * t);
    flow_inverse(&z, params)
}

/// Variance below which a channel is treated as constant during
/// data-dependent initialisation.
const MIN_INIT_VARIANCE: f64 = 1e-12;

/// Data-dependent actnorm initialisation: walking the batch through the flow
/// step by step, each actnorm is set so its output has zero mean and unit
/// variance per channel.
pub fn actnorm_initialize<T: Real>(batch: &Tensor<T>, params: &FlowParams<T>) -> Result<FlowParams<T>> {
    let cfg = *params.config();
    let (xb, _) = as_batch(batch, cfg.patch_shape(), "actnorm_initialize")?;
    if xb.shape()[0] < 2 {
        return Err(Error::InvalidArgument(
            "actnorm initialisation needs a batch of at least 2".into(),
        ));
    }
    let mut out = params.clone();
    let mut h = squeeze(&xb, Direction::Forward)?;
    let c = h.channels();
    for (k, step) in out.steps_mut().iter_mut().enumerate() {
        let count = (h.numel() / c) as f64;
        let mut mean = vec![0.0f64; c];
        for px in h.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v.to_f64().unwrap();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f64; c];
        for px in h.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                *s += (v.to_f64().unwrap() - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= count);

        let mut log_scale = Vec::with_capacity(c);
        for (ch, &v) in var.iter().enumerate() {
            if v < MIN_INIT_VARIANCE {
                warn!("actnorm init: step {k} channel {ch} has zero variance; scale clamped to 1");
                log_scale.push(T::zero());
            } else {
                log_scale.push(lit(-0.5 * v.ln()));
            }
        }
        step.actnorm.log_scale = Tensor::new(vec![c], log_scale)?;
        step.actnorm.bias = Tensor::new(vec![c], mean.iter().map(|m| lit(-m)).collect())?;

        h = actnorm_apply(&h, &step.actnorm, Direction::Forward)?.0;
        h = invconv_apply(&h, &step.invconv, Direction::Forward)?.0;
        h = coupling_apply(&h, &step.coupling, Direction::Forward)?.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::params::FlowConfig;
    use crate::numerics::fd::finite_diff_jacobian;
    use crate::numerics::linalg::Lu;

    fn tiny() -> FlowConfig {
        FlowConfig {
            patch_size: 2,
            channels: 3,
            steps: 2,
            hidden_width: 4,
        }
    }

    fn small() -> FlowConfig {
        FlowConfig {
            patch_size: 8,
            channels: 3,
            steps: 3,
            hidden_width: 8,
        }
    }

    #[test]
    fn identity_flow_is_squeeze_with_zero_logdet() {
        let p = FlowParams::<f32>::identity(FlowConfig::default()).unwrap();
        let x = gaussian_sample::<f32>(&mut Rng::new(1), &[16, 16, 3]).map(|v| v * 0.2);
        let (z, ld) = flow_forward(&x, &p).unwrap();
        assert_eq!(z, squeeze(&x, Direction::Forward).unwrap());
        assert_eq!(ld, vec![0.0]);
        assert_eq!(flow_inverse(&z, &p).unwrap(), x);
    }

    #[test]
    fn identity_flow_closed_form_likelihoods() {
        let p = FlowParams::<f32>::identity(FlowConfig::default()).unwrap();
        let zero = Tensor::<f32>::zeros(&[16, 16, 3]);
        let ll = log_likelihood(&zero, &p).unwrap()[0];
        let expect = -384.0 * (2.0 * PI).ln();
        assert!((ll - expect).abs() < 1e-9);
        assert!((ll + 705.744_793_50).abs() < 1e-6);
        let ones = Tensor::<f32>::ones(&[16, 16, 3]);
        let ll1 = log_likelihood(&ones, &p).unwrap()[0];
        assert!((ll1 - (expect - 384.0)).abs() < 1e-9);
        assert!((ll1 + 1_089.744_793_50).abs() < 1e-6);
    }

    #[test]
    fn rejects_mismatched_patch_shape() {
        let p = FlowParams::<f32>::identity(small()).unwrap();
        assert!(flow_forward(&Tensor::zeros(&[6, 6, 3]), &p).is_err());
        assert!(flow_inverse(&Tensor::zeros(&[4, 4, 3]), &p).is_err());
    }

    #[test]
    fn random_flow_inverts() {
        let mut rng = Rng::new(2);
        for trial in 0..20 {
            let p = FlowParams::<f32>::random(small(), &mut rng, 0.3).unwrap();
            let x = gaussian_sample::<f32>(&mut rng, &[4, 8, 8, 3]).map(|v| v * 0.3);
            let (z, _) = flow_forward(&x, &p).unwrap();
            let back = flow_inverse(&z, &p).unwrap();
            let err = back.max_abs_diff(&x).unwrap();
            assert!(err < 1e-4, "trial {trial}: {err}");
            let (z2, _) = flow_forward(&back, &p).unwrap();
            assert!(z2.max_abs_diff(&z).unwrap() < 1e-4);
        }
    }

    fn jacobian_logdet(p: &FlowParams<f64>, x: &Tensor<f64>) -> f64 {
        let shape = x.shape().to_vec();
        let j = finite_diff_jacobian(
            |v| {
                let t = Tensor::new(shape.clone(), v.to_vec())?;
                Ok(flow_forward(&t, p)?.0.into_data())
            },
            x.data(),
            1e-5,
        )
        .unwrap();
        let n = j.len();
        let m = Tensor::new(vec![n, n], j.into_iter().flatten().collect()).unwrap();
        Lu::new(&m).unwrap().log_abs_det()
    }

    #[test]
    fn logdet_matches_finite_difference_jacobian() {
        let mut rng = Rng::new(3);
        for draw in 0..20 {
            let p = FlowParams::<f64>::random(tiny(), &mut rng, 0.5).unwrap();
            let x = gaussian_sample::<f64>(&mut rng, &[2, 2, 3]).map(|v| v * 0.3);
            let (_, ld) = flow_forward(&x, &p).unwrap();
            let oracle = jacobian_logdet(&p, &x);
            let rel = (ld[0] - oracle).abs() / oracle.abs().max(1e-12);
            assert!(rel < 1e-3, "draw {draw}: analytic {} vs oracle {oracle}", ld[0]);
        }
    }

    #[test]
    fn bits_per_dim_conversions() {
        assert!((bits_per_dim(768.0 * std::f64::consts::LN_2, 768, 1) - 1.0).abs() < 1e-12);
        assert_eq!(bits_per_dim(0.0, 768, 256), 8.0);
        let a = bits_per_dim(1234.5, 100, 256);
        let b = bits_per_dim(2469.0, 200, 256);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn zero_temperature_sample_is_inverse_of_zero() {
        let p = FlowParams::<f32>::random(small(), &mut Rng::new(4), 0.3).unwrap();
        let a = sample_patch(&p, &mut Rng::new(5), 0.0).unwrap();
        let b = flow_inverse(&Tensor::zeros(&small().latent_shape()), &p).unwrap();
        assert_eq!(a, b);
        let c = sample_patch(&p, &mut Rng::new(6), 0.7).unwrap();
        let d = sample_patch(&p, &mut Rng::new(6), 0.7).unwrap();
        assert_eq!(c, d);
        assert!(sample_patch(&p, &mut Rng::new(6), -1.0).is_err());
    }

    #[test]
    fn actnorm_init_standardises_first_step() {
        let mut rng = Rng::new(7);
        let p = FlowParams::<f64>::init(small(), &mut rng).unwrap();
        let batch = gaussian_sample::<f64>(&mut rng, &[16, 8, 8, 3]).map(|v| 0.1 + 0.2 * v);
        let q = actnorm_initialize(&batch, &p).unwrap();
        let h = squeeze(&batch, Direction::Forward).unwrap();
        let (y, _) = actnorm_apply(&h, &q.steps()[0].actnorm, Direction::Forward).unwrap();
        let c = y.channels();
        let count = (y.numel() / c) as f64;
        for ch in 0..c {
            let vals: Vec<f64> = y.data().chunks(c).map(|px| px[ch]).collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-3, "ch {ch}: {mean} {var}");
        }
    }

    #[test]
    fn actnorm_init_fixed_point_on_standardised_batch() {
        let mut rng = Rng::new(8);
        let p = FlowParams::<f64>::init(small(), &mut rng).unwrap();
        // standardise each squeezed channel of a random batch exactly
        let raw = gaussian_sample::<f64>(&mut rng, &[8, 8, 8, 3]);
        let h = squeeze(&raw, Direction::Forward).unwrap();
        let c = h.channels();
        let count = (h.numel() / c) as f64;
        let mut data = h.data().to_vec();
        for ch in 0..c {
            let mean = data.chunks(c).map(|px| px[ch]).sum::<f64>() / count;
            let var = data.chunks(c).map(|px| (px[ch] - mean).powi(2)).sum::<f64>() / count;
            for px in data.chunks_mut(c) {
                px[ch] = (px[ch] - mean) / var.sqrt();
            }
        }
        let std_batch = squeeze(&Tensor::new(h.shape().to_vec(), data).unwrap(), Direction::Inverse).unwrap();
        let q = actnorm_initialize(&std_batch, &p).unwrap();
        let an = &q.steps()[0].actnorm;
        assert!(an.log_scale.max_abs() < 1e-9);
        assert!(an.bias.max_abs() < 1e-9);
    }

    #[test]
    fn actnorm_init_on_constant_batch_clamps() {
        let p = FlowParams::<f32>::init(small(), &mut Rng::new(9)).unwrap();
        let batch = Tensor::<f32>::full(&[4, 8, 8, 3], 0.2);
        let q = actnorm_initialize(&batch, &p).unwrap();
        for t in q.tensors() {
            assert!(t.is_finite());
        }
        assert!(q.steps()[0].actnorm.log_scale.data().iter().all(|&v| v == 0.0));
        assert!(actnorm_initialize(&Tensor::<f32>::zeros(&[1, 8, 8, 3]), &p).is_err());
    }
}
