//! Reverse-mode autodiff kernel: dense f64 matrices on an append-only tape.
//!
//! Every differentiable operation in the model is built from the ops defined
//! here, each with an analytic backward rule that is finite-difference checked
//! (see `gradcheck`). Determinism contract: a fixed registry seed plus a fixed
//! op sequence reproduces results bit for bit.

mod gradcheck;
mod mat;
mod params;
mod registry;
mod tape;

pub use gradcheck::{
    check_scalar_fn, check_scalar_fn_with_eps, op_checks, weighted_scalar, CheckReport, GRAD_EPS,
    GRAD_REL_TOL, KERNEL_OPS,
};
pub use mat::Mat;
pub use params::ParamBlock;
pub use registry::{derive_seed, KernelRegistry};
pub use tape::{Tape, ValueId};
