//! Composite-field multi-task detection with fork-normalized gradient merging.
//!
//! A shared backbone predicts one grid of per-cell values ("field") per task.
//! Training merges the task gradients where the heads branch off; decoding
//! clusters center votes into detections carrying every attribute.

// Validation writes `!(x > 0.0)` on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod config;
pub mod decoder;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod registry;
pub mod scene;
pub mod seed;
pub mod synth;

pub use codec::{encode_targets, ideal_fields, FieldSet, FieldTarget, TargetSet};
pub use config::{RunConfig, RunManifest};
pub use decoder::{decode, DecodeParams, Detection, Prediction};
pub use error::{Error, Result};
pub use geometry::GridGeometry;
pub use grid::Grid;
pub use registry::{AttributeKind, AttributeSpec, Group, TaskRegistry};
pub use scene::{Instance, Scene};
