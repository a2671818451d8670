//! A small ReLU MLP with pluggable weight backends, plus synthetic tasks.

mod model;
mod task;
mod train;

pub use model::{
    layer_name, Backend, ForwardOutput, Gradients, LayerWeight, ParamId, SharedBasis, ToyLayer, ToyMlp, TrainMode,
};
pub use task::{make_task, Dataset, Generator, Shift, Splits, SyntheticTask};
pub use train::{
    accuracy, apply_gradients, epoch_batches, evaluate, predictions, train, EpochMetrics, Evaluation, TrainConfig,
};
