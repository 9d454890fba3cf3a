use std::io::Write;

use patchlikely::flow::{flow_forward, log_likelihood, nll_and_gradient, FlowConfig, FlowParams};
use patchlikely::numerics::linalg::Lu;
use patchlikely::numerics::{finite_diff_gradient, finite_diff_jacobian, gaussian_sample, relative_error, Rng, Tensor};

use crate::config::FileConfig;
use crate::{CliError, GradcheckArgs};

pub const GRADIENT_EPS: f64 = 1e-3;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const JACOBIAN_EPS: f64 = 1e-5;
pub const LOGDET_TOLERANCE: f64 = 1e-3;

const TENSOR_NAMES: [&str; 9] = [
    "actnorm.log_scale",
    "actnorm.bias",
    "invconv.weight",
    "coupling.w1",
    "coupling.b1",
    "coupling.w2",
    "coupling.b2",
    "coupling.w3",
    "coupling.b3",
];

pub fn tiny_config() -> FlowConfig {
    FlowConfig {
        patch_size: 2,
        channels: 3,
        steps: 2,
        hidden_width: 4,
    }
}

pub struct TensorCheck {
    pub name: String,
    pub relative_error: f64,
}

pub struct Report {
    pub tensors: Vec<TensorCheck>,
    pub logdet_analytic: f64,
    pub logdet_numeric: f64,
}

impl Report {
    pub fn logdet_relative_error(&self) -> f64 {
        (self.logdet_analytic - self.logdet_numeric).abs() / self.logdet_numeric.abs().max(1e-12)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.relative_error < GRADIENT_TOLERANCE)
            && self.logdet_relative_error() < LOGDET_TOLERANCE
    }
}

/// Compares the taped gradient of the mean NLL and the flow's log-determinant
/// against central differences on a random float64 flow.
pub fn check(seed: u64, inject_fault: bool) -> patchlikely::Result<Report> {
    let cfg = tiny_config();
    let mut rng = Rng::new(seed);
    let params = FlowParams::<f64>::random(cfg, &mut rng, 0.5)?;
    let batch = gaussian_sample::<f64>(&mut rng, &[4, 2, 2, 3]).map(|v| v * 0.3);

    let (_, mut analytic) = nll_and_gradient(&params, &batch)?;
    if inject_fault {
        let t = &analytic[3];
        let mut data = t.data().to_vec();
        data[0] += 1e-2 * data[0].abs().max(1.0);
        analytic[3] = Tensor::new(t.shape().to_vec(), data)?;
    }
    let tensors: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    let numeric = finite_diff_gradient(
        |ts| {
            let q = FlowParams::from_tensors(cfg, ts.to_vec())?;
            let ll = log_likelihood(&batch, &q)?;
            Ok(-ll.iter().sum::<f64>() / ll.len() as f64)
        },
        &tensors,
        GRADIENT_EPS,
    )?;
    let checks = analytic
        .iter()
        .zip(&numeric)
        .enumerate()
        .map(|(i, (a, n))| TensorCheck {
            name: format!("step{}.{}", i / TENSOR_NAMES.len(), TENSOR_NAMES[i % TENSOR_NAMES.len()]),
            relative_error: relative_error(a, n),
        })
        .collect();

    let x = gaussian_sample::<f64>(&mut rng, &cfg.patch_shape()).map(|v| v * 0.3);
    let (_, ld) = flow_forward(&x, &params)?;
    let shape = x.shape().to_vec();
    let jac = finite_diff_jacobian(
        |v| Ok(flow_forward(&Tensor::new(shape.clone(), v.to_vec())?, &params)?.0.into_data()),
        x.data(),
        JACOBIAN_EPS,
    )?;
    let n = jac.len();
    let m = Tensor::new(vec![n, n], jac.into_iter().flatten().collect())?;
    Ok(Report {
        tensors: checks,
        logdet_analytic: ld[0],
        logdet_numeric: Lu::new(&m)?.log_abs_det(),
    })
}

pub fn run(a: &GradcheckArgs, file: &FileConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let seed = file.resolve(a.seed, "seed", 0)?;
    let report = check(seed, a.inject_fault)?;
    let io = |e| CliError::io("<stdout>", e);
    writeln!(out, "check,relative_error,tolerance,status").map_err(io)?;
    for t in &report.tensors {
        let status = if t.relative_error < GRADIENT_TOLERANCE { "ok" } else { "FAIL" };
        writeln!(out, "grad:{},{:e},{GRADIENT_TOLERANCE:e},{status}", t.name, t.relative_error).map_err(io)?;
    }
    let ld = report.logdet_relative_error();
    let status = if ld < LOGDET_TOLERANCE { "ok" } else { "FAIL" };
    writeln!(out, "logdet,{ld:e},{LOGDET_TOLERANCE:e},{status}").map_err(io)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed("gradient check failed".into()))
    }
}
