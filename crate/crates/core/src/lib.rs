//! Recurrently controlled recurrent networks.
//!
//! A controller (two recurrent branches) produces, at every timestep, the
//! forget and output gates for a listener recurrence. The crate contains the
//! cells, the element-wise gated scan in naive and lane-parallel forms,
//! bidirectional and stacked baselines, a pooled classification head, and a
//! small training stack (Adam, checkpoints, text corpora) with everything
//! differentiated by a define-by-run tape and verified against finite
//! differences.

pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod numerics;
pub mod scan;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamId, ParamSet, Real, Tensor, Var};
