//! The flow's mean negative log-likelihood recorded on an autodiff tape.

use std::f64::consts::PI;

use super::layers::{squeeze, Direction, COUPLING_SCALE_SHIFT};
use super::params::{FlowParams, TENSORS_PER_STEP};
use crate::error::{Error, Result};
use crate::numerics::{lit, Real, Tape, Tensor, Var};

/// Registers every parameter tensor on the tape, in canonical order.
pub fn record_params<T: Real>(tape: &mut Tape<T>, params: &FlowParams<T>) -> Vec<Var> {
    params.tensors().into_iter().map(|t| tape.param(t.clone())).collect()
}

/// Records `(1/N) Σ −log p(x_i)` for a patch batch `[N, P, P, C]` and
/// returns the scalar loss node.
pub fn record_mean_nll<T: Real>(
    tape: &mut Tape<T>,
    params: &FlowParams<T>,
    vars: &[Var],
    batch: &Tensor<T>,
) -> Result<Var> {
    let cfg = params.config();
    let expected = cfg.patch_shape();
    let n = match batch.shape() {
        [n, a, b, c] if [*a, *b, *c] == expected && *n > 0 => *n,
        s => {
            return Err(Error::ShapeMismatch {
                op: "record_mean_nll",
                lhs: expected.to_vec(),
                rhs: s.to_vec(),
            })
        }
    };
    if vars.len() != cfg.steps * TENSORS_PER_STEP {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameter variables, got {}",
            cfg.steps * TENSORS_PER_STEP,
            vars.len()
        )));
    }
    let inv_n: T = lit(1.0 / n as f64);
    let latent = cfg.latent_side();
    let pixels: T = lit((latent * latent) as f64);
    let c = cfg.squeezed_channels();
    let half = c / 2;

    let mut h = tape.constant(squeeze(batch, Direction::Forward)?);
    let shift = tape.constant(Tensor::scalar(lit(COUPLING_SCALE_SHIFT)));
    // terms whose sum is the total log-determinant averaged over the batch
    let mut logdet_terms = Vec::with_capacity(3 * cfg.steps);

    for v in vars.chunks(TENSORS_PER_STEP) {
        let (log_scale, bias, weight) = (v[0], v[1], v[2]);
        let (w1, b1, w2, b2, w3, b3) = (v[3], v[4], v[5], v[6], v[7], v[8]);

        let scale = tape.exp(log_scale)?;
        let centred = tape.add(h, bias)?;
        h = tape.mul(centred, scale)?;
        let s = tape.sum(log_scale)?;
        logdet_terms.push(tape.scale(s, pixels)?);

        h = tape.matmul(h, weight)?;
        let lad = tape.log_abs_det(weight)?;
        logdet_terms.push(tape.scale(lad, pixels)?);

        let x1 = tape.slice_channels(h, 0, half)?;
        let x2 = tape.slice_channels(h, half, half)?;
        let a = tape.conv2d(x1, w1, b1)?;
        let a = tape.tanh(a)?;
        let a = tape.conv2d(a, w2, b2)?;
        let a = tape.tanh(a)?;
        let out = tape.conv2d(a, w3, b3)?;
        let raw = tape.slice_channels(out, 0, half)?;
        let t = tape.slice_channels(out, half, half)?;
        let shifted = tape.add(raw, shift)?;
        let s = tape.sigmoid(shifted)?;
        let scaled = tape.mul(x2, s)?;
        let y2 = tape.add(scaled, t)?;
        h = tape.concat_channels(x1, y2)?;
        let log_s = tape.log(s)?;
        let sum_log_s = tape.sum(log_s)?;
        logdet_terms.push(tape.scale(sum_log_s, inv_n)?);
    }

    let sq = tape.mul(h, h)?;
    let sq_sum = tape.sum(sq)?;
    let mut loss = tape.scale(sq_sum, lit(0.5 / n as f64))?;
    for term in logdet_terms {
        let neg = tape.scale(term, -T::one())?;
        loss = tape.add(loss, neg)?;
    }
    let constant = tape.constant(Tensor::scalar(lit(0.5 * cfg.dims() as f64 * (2.0 * PI).ln())));
    tape.add(loss, constant)
}

/// Mean NLL of a batch and its exact gradient with respect to every
/// parameter tensor (canonical order).
pub fn nll_and_gradient<T: Real>(params: &FlowParams<T>, batch: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, params);
    let loss = record_mean_nll(&mut tape, params, &vars, batch)?;
    let value = tape.value(loss).item()?.to_f64().unwrap();
    let grads = tape.gradient(loss, &vars)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::model::log_likelihood;
    use crate::flow::params::FlowConfig;
    use crate::numerics::{finite_diff_gradient, gaussian_sample, relative_error, Rng};

    fn tiny() -> FlowConfig {
        FlowConfig {
            patch_size: 2,
            channels: 3,
            steps: 2,
            hidden_width: 4,
        }
    }

    #[test]
    fn taped_loss_matches_inference_path() {
        let mut rng = Rng::new(1);
        let cfg = FlowConfig {
            patch_size: 8,
            channels: 3,
            steps: 2,
            hidden_width: 6,
        };
        let p = FlowParams::<f64>::random(cfg, &mut rng, 0.4).unwrap();
        let x = gaussian_sample::<f64>(&mut rng, &[5, 8, 8, 3]).map(|v| v * 0.3);
        let (loss, _) = nll_and_gradient(&p, &x).unwrap();
        let ll = log_likelihood(&x, &p).unwrap();
        let mean_nll = -ll.iter().sum::<f64>() / ll.len() as f64;
        assert!((loss - mean_nll).abs() < 1e-9 * mean_nll.abs().max(1.0), "{loss} vs {mean_nll}");
    }

    #[test]
    fn gradient_matches_central_differences_on_tiny_flow() {
        let mut rng = Rng::new(2);
        let cfg = tiny();
        let p = FlowParams::<f64>::random(cfg, &mut rng, 0.5).unwrap();
        let x = gaussian_sample::<f64>(&mut rng, &[4, 2, 2, 3]).map(|v| v * 0.3);
        let (_, analytic) = nll_and_gradient(&p, &x).unwrap();
        let tensors: Vec<Tensor<f64>> = p.tensors().into_iter().cloned().collect();
        let numeric = finite_diff_gradient(
            |ts| {
                let q = FlowParams::from_tensors(cfg, ts.to_vec())?;
                let ll = log_likelihood(&x, &q)?;
                Ok(-ll.iter().sum::<f64>() / ll.len() as f64)
            },
            &tensors,
            1e-3,
        )
        .unwrap();
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = relative_error(a, n);
            assert!(err < 1e-4, "tensor {i}: rel err {err:e}");
        }
    }

    #[test]
    fn rejects_wrong_batch_shape() {
        let p = FlowParams::<f32>::identity(tiny()).unwrap();
        let mut tape = Tape::new();
        let vars = record_params(&mut tape, &p);
        let bad = Tensor::<f32>::zeros(&[2, 4, 4, 3]);
        assert!(record_mean_nll(&mut tape, &p, &vars, &bad).is_err());
    }
}
