//! Scalar reverse-mode differentiation and a central-difference oracle.
//!
//! Everything numeric in the crate is written against [`Real`], which is
//! implemented both by plain `f64` (fast value-only evaluation) and by
//! [`Var`] (values recorded on a [`Tape`] for [`Tape::backward`]).

mod finite_diff;
mod real;
mod tape;

pub use finite_diff::{central_difference, gradients_agree, FD_STEP, GRAD_ABS_TOL, GRAD_REL_TOL};
pub use real::Real;
pub(crate) use real::sigmoid_f64;
pub use tape::{Gradients, Tape, Var};
