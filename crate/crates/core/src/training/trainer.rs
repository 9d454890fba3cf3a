use log::{info, warn};

use crate::error::{Error, Result};
use crate::flow::{actnorm_initialize, FlowParams};
use crate::numerics::{Rng, Tensor};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::dataset::{dequantize_batch, PatchDataset};
use super::optim::{train_step, AdamState, StepMetrics, TrainConfig};

/// Random stream reserved for parameter initialisation; step `s` uses
/// stream `s`.
pub const INIT_STREAM: u64 = u64::MAX;

/// The dequantised batch consumed at global step `step`.
pub fn batch_for_step(dataset: &PatchDataset, batch_size: usize, seed: u64, step: u64) -> Result<Tensor> {
    let mut rng = Rng::with_stream(seed, step);
    let patches = dataset.sample_patches(batch_size, &mut rng);
    dequantize_batch(&patches, &mut rng)
}

fn check_compatible(config: &TrainConfig, dataset: &PatchDataset) -> Result<()> {
    config.validate()?;
    if dataset.patch_size() != config.flow.patch_size {
        return Err(Error::InvalidArgument(format!(
            "dataset patch size {} differs from model patch size {}",
            dataset.patch_size(),
            config.flow.patch_size
        )));
    }
    if config.flow.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "images are RGB but the model expects {} channels",
            config.flow.channels
        )));
    }
    Ok(())
}

/// Freshly initialised parameters with actnorm fitted to the step-0 batch.
pub fn initial_checkpoint(config: &TrainConfig, dataset: &PatchDataset) -> Result<Checkpoint> {
    check_compatible(config, dataset)?;
    let mut rng = Rng::with_stream(config.seed, INIT_STREAM);
    let params = FlowParams::init(config.flow, &mut rng)?;
    let batch = batch_for_step(dataset, config.batch_size, config.seed, 0)?;
    let params = actnorm_initialize(&batch, &params)?;
    Ok(Checkpoint {
        adam: AdamState::zeros(&params),
        params,
        step: 0,
        seed: config.seed,
    })
}

/// Runs steps `start..config.steps`, where `start` is 0 or the step of the
/// checkpoint being resumed. Periodic and final checkpoints go to
/// `config.checkpoint_path` when set.
pub fn train(
    config: &TrainConfig,
    dataset: &PatchDataset,
    resume: Option<Checkpoint>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Checkpoint> {
    check_compatible(config, dataset)?;
    let mut ckpt = match resume {
        Some(c) => {
            if *c.config() != config.flow || c.seed != config.seed {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint (model {:?}, seed {}) does not match the run configuration (model {:?}, seed {})",
                    c.config(),
                    c.seed,
                    config.flow,
                    config.seed
                )));
            }
            if c.step > config.steps {
                warn!("checkpoint is already at step {} beyond the requested {}", c.step, config.steps);
            }
            c
        }
        None => initial_checkpoint(config, dataset)?,
    };

    let mut skipped = 0u64;
    for step in ckpt.step..config.steps {
        let batch = batch_for_step(dataset, config.batch_size, config.seed, step)?;
        let (params, adam, metrics) = train_step(&ckpt.params, &ckpt.adam, &batch, config, step)?;
        ckpt.params = params;
        ckpt.adam = adam;
        ckpt.step = step + 1;
        skipped += u64::from(metrics.skipped);
        on_step(&metrics);
        if let Some(path) = &config.checkpoint_path {
            if ckpt.step % config.checkpoint_every == 0 && ckpt.step < config.steps {
                save_checkpoint(&ckpt, path)?;
            }
        }
    }
    if skipped > 0 {
        warn!("{skipped} update(s) skipped");
    }
    info!("training finished at step {}", ckpt.step);
    if let Some(path) = &config.checkpoint_path {
        save_checkpoint(&ckpt, path)?;
    }
    Ok(ckpt)
}
