//! Deterministic multi-human parsing engine.
//!
//! Instances are encoded as linear combinations of shared mask prototypes,
//! one coefficient vector per cell of a multi-level grid. Part and human
//! candidates decoded from those grids are de-duplicated with matrix NMS and
//! assembled into per-person parsing results.

// `!(x > lo)` guards double as NaN rejection.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assign;
pub mod cli;
pub mod error;
pub mod grouping;
pub mod io;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod scene;
pub mod synth;
pub mod umpp;

pub use assign::{build_targets, default_levels, GridTargets, LevelId, LevelSpec};
pub use error::{Error, Result};
pub use grouping::{run_pipeline, GroupingConfig, NmsKernel, ParsingResult, ScoredInstance};
pub use mask::{iou, BinaryMask, DenseMap, LabelMap};
pub use scalar::Real;
pub use scene::{GroundTruthInstance, GroundTruthScene, InstanceKind};

pub type DenseMap32 = DenseMap<f32>;
pub type DenseMap64 = DenseMap<f64>;
pub type ScoredInstance32 = ScoredInstance<f32>;
pub type ScoredInstance64 = ScoredInstance<f64>;
pub type ParsingResult32 = ParsingResult<f32>;
pub type ParsingResult64 = ParsingResult<f64>;
