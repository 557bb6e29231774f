//! A minimal reverse-mode autodiff engine, a micro MoE transformer built on
//! it, and the AdamW training loop that drives the routing controllers.

pub mod check;
mod error;
pub mod graph;
pub mod model;
pub mod scalar;
pub mod train;

pub use error::{LmError, Result};
pub use graph::{Graph, Tensor, Var};
pub use model::{Batch, Forward, Model, ModelConfig, MoeRecord, Param, ParamGroup, RouterSettings, RouterState, RoutingControl, RoutingMode};
pub use scalar::Scalar;
pub use train::{lr_at, AdamW, EvalResult, LrSchedule, Split, StepRecord, TrainPlan, Trainer};
