//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every forward primitive appends its result to a [`Tape`]; a single
//! reverse sweep from a scalar loss yields gradients for all parameters
//! bound on that tape.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckReport, ParamCheck, FD_STEP};
pub use params::ParamStore;
pub use tape::{Gradients, KernelGroup, KernelScatterPlan, Tape, Var};
pub use tensor::{Scalar, Tensor};
