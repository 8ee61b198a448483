//! Decoder-side building blocks for set-prediction detectors:
//!
//! * [`assignment`]: cost matrices, Hungarian matching, top-N and
//!   category-specific candidate selection with per-class matching.
//! * [`refinement`]: look-forward-once/twice/densely reference box updates
//!   and their gradient reach.
//! * [`metrics`]: assignment stability scores and a small AP evaluator.
//! * [`harness`]: a synthetic overlapping-object benchmark and a tiny
//!   refinement decoder trained through the [`numeric`] tape.
//! * [`experiment`]: manifests, ablation grids and their CSV outputs.

pub mod assignment;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod numeric;
pub mod refinement;
pub mod selftest;

pub use error::{Error, Result};

pub use geometry::{BoxOffset, LogitBox, NormalizedBox};
