//! Small dense models, explicit gradients and optimizers.

mod model;
mod optim;
mod params;
mod train;

pub use model::{Head, Labeled, ModelKind, ModelSpec, Sample, Target, TargetRef, PROB_EPS};
pub(crate) use model::{acc, affine, outer_acc};
pub use optim::{OptimizerConfig, OptimizerState};
pub use params::{Layer, LayerShape, ParamVector};
pub use train::{train, TrainConfig};
