//! Tensor values, the differentiation tape, parameters and the optimizer.

mod check;
mod gemm;
mod params;
mod tape;
mod tensor;

pub use check::{
    default_abs_floor, default_step, default_tolerance, grad_check, relative_error, Fragment, GradCheckConfig, GradCheckReport,
    ParamCheck, Probe,
};
pub use params::{Adam, ParamEntry, ParamStore};
pub use tape::{
    softmax_in_place, Activation, BatchMoments, CustomOp, Gradients, NormStats, Padding, Tape, Var,
    PROB_FLOOR,
};
pub use tensor::{Float, Tensor};
