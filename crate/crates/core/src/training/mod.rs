//! Maximum-likelihood training: patch sampling, dequantisation, the Adam
//! loop and the checkpoint format.

pub mod checkpoint;
pub mod dataset;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{
    dequantize, dequantize_batch, normalize, normalize_batch, quantize, quantize_value, PatchDataset, PatchLocation,
};
pub use optim::{nll_loss, train_step, AdamState, StepMetrics, TrainConfig};
pub use trainer::{batch_for_step, initial_checkpoint, train};
