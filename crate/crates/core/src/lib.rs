//! conftrace: a hook-instrumented transformer inference engine and
//! causal-intervention toolkit for tracing how verbal confidence is
//! computed, validated at desk scale against a planted cache-and-retrieve
//! circuit.
//!
//! Layering, bottom up:
//!
//! * [`kernels`]       dense f64 primitives (matmul, softmax, rms-norm)
//! * [`model`]         weight-directory format, tokenizer, model bundle
//! * [`hooks`] / [`engine`]  hooked forward pass, greedy decode, traces
//! * [`interventions`] steering, patching, noising, swaps, attention blocks
//! * [`metrics`]       confidence lexicons, logit/calibration/digit metrics
//! * [`probing`]       ridge + logistic probes with cross-validated scoring
//! * [`toycircuit`]    planted model generator and its closed-form oracle
//! * [`harness`]       trials, templates, experiment runner, exports, CLI glue

// Numeric code throughout indexes rows and columns explicitly; iterator
// rewrites of those loops hide the matrix structure they mirror.
#![allow(clippy::needless_range_loop)]

pub mod engine;
pub mod error;
pub mod harness;
pub mod hooks;
pub mod interventions;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod par;
pub mod probing;
pub mod toycircuit;

pub use error::{Error, Result};
