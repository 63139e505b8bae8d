//! Small encoder-decoder segmentation network with hand-written backprop.

pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use layers::ConvParams;
pub use model::{argmax_labels, Layer, OccNet, ParamSet};
pub use tensor::{Real, Tensor4};
pub use train::{
    grad_check, infer_batch, sgd_step, train, evaluate_model, EpochLog, Example, GradCheckReport, LossKind, PlateauSchedule,
    SgdState, TrainConfig, TrainLog,
};
