//! Experiment orchestration: trial ingestion, prompt templating with
//! data-driven position maps, partitioning, the six experiment families,
//! calibration, and result export.
//!
//! The harness is the only layer that knows how prompts are laid out; the
//! engine and interventions operate on token indices it resolves. Templates
//! ship as JSON data (text plus role-offset annotations), so position maps
//! are configuration, not code.

pub mod experiment;
pub mod export;
pub mod template;
pub mod trials;

pub use experiment::{
    calibrate, run_experiment, BlockEdgeSpec, CalibrationReport, ExperimentConfig, ExperimentKind,
    ProbeReport, RunOutput,
};
pub use export::{export_calibration, export_plots, export_results};
pub use template::{
    builtin_lexicon, render_prompt, Anchor, PositionMap, PromptTemplate, RoleOffset,
};
pub use trials::{
    load_trials, parse_trials, partition_trials, prepare_trials, save_trials, PreparedTrial, Trial,
};
