//! Hand-written tensor and layer engine: functional kernels with explicit
//! backward passes, a declarative layer stack with a recorded tape, optimizers
//! and a finite-difference gradient checker.

pub mod checkpoint;
mod float;
pub mod gradcheck;
mod layers;
pub mod ops;
mod optim;
mod tensor;

pub use float::Float;
pub use gradcheck::{relative_error, GradCheckReport};
pub use layers::{
    infer_shapes, Act, BatchStats, LayerSpec, Mode, Param, ParamRole, Projection, Sequential, Tape, BN_EPSILON,
    BN_MOMENTUM,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use tensor::Tensor;
