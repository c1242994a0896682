//! Rotary-position-embedding attention logits with a three-stage,
//! training-free decay-resilience modulation:
//!
//! 1. a semantic residual bias built from cosine affinity ([`semantic`]),
//! 2. a calibrated Gaussian gate on semantically scaled distance ([`distance`]),
//! 3. a boundary-constrained rational-quadratic reinforcement gate ([`reinforce`]).
//!
//! [`pipeline`] wires the stages together with softmax and value aggregation,
//! and [`harness`] holds the desk-scale experiments (decay sweeps, ablation
//! comparisons, attention-map export).
//!
//! All arithmetic is `f64` and every operation is a pure function of its
//! inputs, with fixed summation order so repeated runs are bit-identical.

pub mod distance;
pub mod error;
pub mod harness;
pub mod pipeline;
pub mod reinforce;
pub mod rope;
pub mod semantic;
pub mod types;

pub use error::{DrsError, Result};
pub use pipeline::{AttentionResult, CalibrationReport, PipelineConfig, Variant};
pub use types::{
    DrsHyperParams, LogitsMatrix, ModulationMaps, RotarySchedule, Segment, Stage, TokenSequence,
};
