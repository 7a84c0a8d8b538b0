//! Dense tensors, reverse-mode differentiation, optimization and schedules.

mod graph;
mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod real;
mod schedule;
mod tensor;

pub use gradcheck::{grad_check, rel_err, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var};
pub use optim::{AdamWConfig, OptimState};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use real::Real;
pub use schedule::{alpha_schedule, ema_momentum, ScheduleCfg};
pub use tensor::Tensor;
