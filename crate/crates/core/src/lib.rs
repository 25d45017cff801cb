//! Hierarchical dialogue understanding at toy scale.
//!
//! The pipeline turns a dialogue plus query into a classification:
//!
//! 1. [`preprocess`] substitutes argument mentions with `[S1]`/`[S2]`,
//!    inserts a `[T]` token ahead of every turn and argument, and assembles
//!    `[CLS] … [SEP] … [SEP]`.
//! 2. [`mask`] restricts every `[T]` row of self-attention to its own span.
//! 3. [`encoder`] runs a small transformer encoder under that mask.
//! 4. [`graph`] builds the dialogue/turn/argument graph from the `[CLS]` and
//!    `[T]` states and refines it with soft channel composition plus graph
//!    convolutions.
//! 5. [`head`] classifies the concatenated dialogue and argument nodes;
//!    [`metrics`] scores predictions.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type used by the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod inspect;
pub mod ir;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod scalar;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Element type used by the CLI and checkpoints it writes.
pub type Real = f64;

pub type Model = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type ParamSet = tape::ParamSet<f64>;
pub type HetGraph = graph::HetGraph<f64>;
