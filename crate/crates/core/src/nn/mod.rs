//! A small CPU convolutional network engine: layers, the two preset
//! architectures, SGD training, checkpoints and finite-difference checks.

mod checkpoint;
mod gradcheck;
mod model;
pub mod ops;
mod scalar;
mod spec;
mod tensor;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{gradient_check, gradient_check_with, rel_error, GradCheckOptions, GradCheckReport, Mismatch};
pub use model::{Gradients, InitRecord, LayerParams, Mode, ModelParams, Trace};
pub use scalar::{gemm, Scalar};
pub use spec::{LayerSpec, NetworkSpec, Shape, INPUT_SHAPE};
pub use tensor::Tensor4;
pub use train::{
    derive_seed, evaluate_accuracy, normalize_batch, train, EpochStats, TrainConfig, TrainLog, Trainer, GRAD_CHUNK,
};
pub(crate) use train::Workers;
