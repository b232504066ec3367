//! Causal-intervention mechanisms, expressed as hook-set builders.
//!
//! Five families share one vocabulary: steering (add a scaled difference-of-
//! means direction), activation patching (overwrite a residual with a clean
//! capture), noising (overwrite with a dataset mean), activation swaps
//! (overwrite with a length-matched donor's capture), and attention knockout
//! (sever query -> key edges over a layer window). Everything here builds
//! [`HookSet`]s; the engine applies them without knowing which family asked.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hooks::{EditFn, HookSet};
use crate::kernels::l2_norm;

// ---------------------------------------------------------------------------
// position roles
// ---------------------------------------------------------------------------

/// Prompt positions an intervention can name, independent of any concrete
/// prompt. The harness resolves each role to a token index per trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRole {
    /// the newline token immediately after the answer span
    AnswerNewline,
    /// one past the answer newline
    AfterAnswerNewline,
    /// the final prompt token: the colon the confidence read-out follows
    ReadoutColon,
    /// the colon inside the instruction block, before the in-context class
    /// placeholder (absent from templates without an instruction block)
    InstructionColon,
    LastAnswerToken,
    FirstAnswerToken,
}

impl PositionRole {
    pub const ALL: [PositionRole; 6] = [
        PositionRole::AnswerNewline,
        PositionRole::AfterAnswerNewline,
        PositionRole::ReadoutColon,
        PositionRole::InstructionColon,
        PositionRole::LastAnswerToken,
        PositionRole::FirstAnswerToken,
    ];
}

// ---------------------------------------------------------------------------
// steering
// ---------------------------------------------------------------------------

/// Fraction of the current residual norm one unit of steering strength adds.
pub const STEERING_BASE_FRACTION: f64 = 0.03;

/// A difference-of-means direction in residual space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringVector {
    pub direction: Vec<f64>,
    pub norm: f64,
}

/// Mean of the high-group residuals minus mean of the low-group residuals,
/// taken at one (layer, position role) site.
pub fn build_steering_vector(high: &[Vec<f64>], low: &[Vec<f64>]) -> Result<SteeringVector> {
    if high.is_empty() || low.is_empty() {
        return Err(Error::DegenerateDirection(format!(
            "steering direction needs both groups ({} high, {} low samples)",
            high.len(),
            low.len()
        )));
    }
    let d = high[0].len();
    for v in high.iter().chain(low) {
        if v.len() != d {
            return Err(Error::Shape(format!(
                "steering samples mix lengths {d} and {}",
                v.len()
            )));
        }
    }
    let mut direction = vec![0.0; d];
    for v in high {
        for (acc, x) in direction.iter_mut().zip(v) {
            *acc += x / high.len() as f64;
        }
    }
    for v in low {
        for (acc, x) in direction.iter_mut().zip(v) {
            *acc -= x / low.len() as f64;
        }
    }
    let norm = l2_norm(&direction);
    if norm < 1e-10 {
        return Err(Error::DegenerateDirection(format!(
            "group means coincide (direction norm {norm:.3e})"
        )));
    }
    Ok(SteeringVector { direction, norm })
}

/// Residual edit adding `alpha * base_fraction * |r| / |v|` times the
/// direction, where `|r|` is the norm of the residual being edited — the
/// injection strength tracks each trial's own activation scale.
pub fn steering_edit(vector: &SteeringVector, alpha: f64, base_fraction: f64) -> EditFn {
    let dir = vector.direction.clone();
    let dir_norm = vector.norm;
    Arc::new(move |r: &[f64]| {
        let scale = alpha * base_fraction * l2_norm(r) / dir_norm;
        r.iter().zip(&dir).map(|(a, d)| a + scale * d).collect()
    })
}

/// Steer the post-MLP residual at (layer, position).
pub fn apply_steering(
    hooks: HookSet,
    layer: usize,
    position: usize,
    vector: &SteeringVector,
    alpha: f64,
) -> HookSet {
    hooks.edit_residual(
        layer,
        position,
        Default::default(),
        steering_edit(vector, alpha, STEERING_BASE_FRACTION),
    )
}

// ---------------------------------------------------------------------------
// calibration means (corruption and noising sources)
// ---------------------------------------------------------------------------

/// Mean activation per answer-relative position over a calibration set.
/// Trials contribute to every relative position their answer reaches, so the
/// per-position sample counts are non-increasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationMeans {
    pub by_relative_position: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

/// `samples[t][j]` is the vector at answer-relative position `j` of
/// calibration trial `t`; answers may differ in length.
pub fn compute_calibration_means(samples: &[Vec<Vec<f64>>]) -> Result<CalibrationMeans> {
    if samples.is_empty() {
        return Err(Error::InsufficientTrials(
            "calibration means need at least one trial".into(),
        ));
    }
    let max_len = samples.iter().map(Vec::len).max().unwrap();
    if max_len == 0 {
        return Err(Error::InsufficientTrials(
            "calibration trials are all empty".into(),
        ));
    }
    let d = samples
        .iter()
        .flat_map(|t| t.first())
        .map(Vec::len)
        .next()
        .unwrap();
    let mut sums = vec![vec![0.0; d]; max_len];
    let mut counts = vec![0usize; max_len];
    for trial in samples {
        for (j, v) in trial.iter().enumerate() {
            if v.len() != d {
                return Err(Error::Shape(format!(
                    "calibration vectors mix lengths {d} and {}",
                    v.len()
                )));
            }
            for (acc, x) in sums[j].iter_mut().zip(v) {
                *acc += x;
            }
            counts[j] += 1;
        }
    }
    for (sum, &c) in sums.iter_mut().zip(&counts) {
        for x in sum.iter_mut() {
            *x /= c as f64;
        }
    }
    Ok(CalibrationMeans {
        by_relative_position: sums,
        counts,
    })
}

/// Overwrite every embedding in the answer span with the calibration mean of
/// its answer-relative position. Fails when the span outruns calibration
/// coverage.
pub fn corrupt_answer_embeddings(
    hooks: HookSet,
    answer_span: Range<usize>,
    means: &CalibrationMeans,
) -> Result<HookSet> {
    if answer_span.is_empty() {
        return Err(Error::Validation("empty answer span".into()));
    }
    if answer_span.len() > means.by_relative_position.len() {
        return Err(Error::InsufficientTrials(format!(
            "answer spans {} positions but calibration covers {}",
            answer_span.len(),
            means.by_relative_position.len()
        )));
    }
    let mut hooks = hooks;
    for (j, p) in answer_span.enumerate() {
        hooks = hooks.replace_embedding(p, means.by_relative_position[j].clone());
    }
    Ok(hooks)
}

/// Mean residual over a sample of trials at one (layer, role) site.
pub fn residual_mean(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InsufficientTrials(
            "residual mean over no samples".into(),
        ));
    }
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for v in samples {
        if v.len() != d {
            return Err(Error::Shape(format!(
                "residual samples mix lengths {d} and {}",
                v.len()
            )));
        }
        for (acc, x) in mean.iter_mut().zip(v) {
            *acc += x / samples.len() as f64;
        }
    }
    Ok(mean)
}

// ---------------------------------------------------------------------------
// overwrite-style edits
// ---------------------------------------------------------------------------

/// Restore a clean run's post-MLP residual into a corrupted run.
pub fn patch_position(hooks: HookSet, layer: usize, position: usize, clean: Vec<f64>) -> HookSet {
    hooks.overwrite_residual(layer, position, clean)
}

/// Replace the post-MLP residual with a dataset mean, erasing what the site
/// carries about this trial.
pub fn mean_ablate(hooks: HookSet, layer: usize, position: usize, mean: Vec<f64>) -> HookSet {
    hooks.overwrite_residual(layer, position, mean)
}

/// Transplant a donor trial's post-MLP residual into the recipient's run.
pub fn swap_activation(hooks: HookSet, layer: usize, position: usize, donor: Vec<f64>) -> HookSet {
    hooks.overwrite_residual(layer, position, donor)
}

// ---------------------------------------------------------------------------
// donor matching for swaps
// ---------------------------------------------------------------------------

/// Prompt-shape coordinates used to match swap donors to recipients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialShape {
    pub question_tokens: usize,
    pub answer_tokens: usize,
}

/// One donor index per recipient, chosen with replacement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwapPlan {
    pub donor_for: Vec<usize>,
}

fn quantile_bin(sorted: &[usize], value: usize, n_bins: usize) -> usize {
    let below = sorted.partition_point(|&x| x < value);
    (below * n_bins / sorted.len()).min(n_bins - 1)
}

/// Match each recipient to a donor with a similar prompt shape. Donors are
/// quantile-binned on question and answer token counts; a recipient draws
/// from its own bin, or from the nearest occupied bin (ties resolved toward
/// the smaller bin index), cycling through bin members in order. `forbidden`
/// optionally bars one donor index per recipient (a trial must not donate to
/// itself when the pools overlap).
pub fn match_donors(
    recipients: &[TrialShape],
    donors: &[TrialShape],
    n_bins: usize,
    forbidden: Option<&[Option<usize>]>,
) -> Result<SwapPlan> {
    if donors.is_empty() {
        return Err(Error::InsufficientTrials("swap donor pool is empty".into()));
    }
    if n_bins == 0 {
        return Err(Error::Validation(
            "donor matching needs at least one bin".into(),
        ));
    }
    if let Some(f) = forbidden {
        if f.len() != recipients.len() {
            return Err(Error::Shape(format!(
                "{} forbidden entries for {} recipients",
                f.len(),
                recipients.len()
            )));
        }
    }
    let mut q_sorted: Vec<usize> = donors.iter().map(|d| d.question_tokens).collect();
    let mut a_sorted: Vec<usize> = donors.iter().map(|d| d.answer_tokens).collect();
    q_sorted.sort_unstable();
    a_sorted.sort_unstable();

    // bin id = question_bin * n_bins + answer_bin
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bins * n_bins];
    for (i, d) in donors.iter().enumerate() {
        let qb = quantile_bin(&q_sorted, d.question_tokens, n_bins);
        let ab = quantile_bin(&a_sorted, d.answer_tokens, n_bins);
        bins[qb * n_bins + ab].push(i);
    }
    let mut cursor = vec![0usize; bins.len()];
    let mut donor_for = Vec::with_capacity(recipients.len());
    for (r, shape) in recipients.iter().enumerate() {
        let barred = forbidden.and_then(|f| f[r]);
        let qb = quantile_bin(&q_sorted, shape.question_tokens, n_bins);
        let ab = quantile_bin(&a_sorted, shape.answer_tokens, n_bins);
        // rank occupied bins by distance, then by flat index
        let mut best: Option<usize> = None;
        let mut best_key = (usize::MAX, usize::MAX);
        for (flat, members) in bins.iter().enumerate() {
            let usable = members.iter().any(|&m| Some(m) != barred);
            if !usable {
                continue;
            }
            let bq = flat / n_bins;
            let ba = flat % n_bins;
            let dist = bq.abs_diff(qb) + ba.abs_diff(ab);
            if (dist, flat) < best_key {
                best_key = (dist, flat);
                best = Some(flat);
            }
        }
        let Some(flat) = best else {
            return Err(Error::InsufficientTrials(format!(
                "no eligible donor for recipient {r}"
            )));
        };
        let members = &bins[flat];
        let mut pick = members[cursor[flat] % members.len()];
        cursor[flat] += 1;
        if Some(pick) == barred {
            pick = members[cursor[flat] % members.len()];
            cursor[flat] += 1;
        }
        donor_for.push(pick);
    }
    Ok(SwapPlan { donor_for })
}

// ---------------------------------------------------------------------------
// attention knockout
// ---------------------------------------------------------------------------

/// Centered, clipped, half-open layer window `[center - w/2, center - w/2 + w)`.
pub fn layer_window(center: usize, width: usize, n_layers: usize) -> Result<Range<usize>> {
    if width == 0 {
        return Err(Error::Validation("layer window of width 0".into()));
    }
    let start = center as i64 - (width / 2) as i64;
    let end = start + width as i64;
    let clipped = start.max(0) as usize..end.clamp(0, n_layers as i64) as usize;
    if clipped.is_empty() {
        return Err(Error::Validation(format!(
            "layer window centered at {center} (width {width}) lies outside 0..{n_layers}"
        )));
    }
    Ok(clipped)
}

/// Block every (target, source) edge in the cartesian product, minus the
/// preserve list, for the given layer range. Pairs where the source lies in
/// the target's future are discarded (causal masking already severs them);
/// an expansion with nothing left to block is an error.
pub fn block_edges(
    hooks: HookSet,
    layers: Range<usize>,
    targets: &[usize],
    sources: &[usize],
    preserve: &[(usize, usize)],
) -> Result<HookSet> {
    let mut hooks = hooks;
    let mut blocked = 0usize;
    for &t in targets {
        for &s in sources {
            if s > t || preserve.contains(&(t, s)) {
                continue;
            }
            hooks = hooks.block_attention(layers.clone(), t, s);
            blocked += 1;
        }
    }
    if blocked == 0 {
        return Err(Error::Validation(
            "attention knockout expansion is empty: every candidate edge was acausal or preserved"
                .into(),
        ));
    }
    Ok(hooks)
}

// ---------------------------------------------------------------------------
// intervention descriptions
// ---------------------------------------------------------------------------

/// One endpoint of an attention-knockout edge, in role terms. The harness
/// resolves endpoints to concrete token positions per trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "at")]
pub enum EdgeEnd {
    Role { role: PositionRole },
    QuestionSpan,
    AnswerSpan,
    All,
}

/// A single experiment cell, serializable into sweep configurations. Layer
/// ranges are half-open `(start, end)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InterventionSpec {
    Steer {
        role: PositionRole,
        layer: usize,
        alpha: f64,
    },
    Patch {
        role: PositionRole,
        layer: usize,
    },
    Noise {
        role: PositionRole,
        layer: usize,
        /// answer levels the noising mean was computed over
        calibration_levels: Vec<u8>,
    },
    Swap {
        role: PositionRole,
        layer: usize,
        donor_level: u8,
    },
    Block {
        target: EdgeEnd,
        source: EdgeEnd,
        #[serde(default)]
        preserve: Vec<(EdgeEnd, EdgeEnd)>,
        layers: (usize, usize),
    },
}

impl InterventionSpec {
    /// The layer(s) the intervention touches, for sweep bookkeeping.
    pub fn layer_range(&self) -> Range<usize> {
        match self {
            InterventionSpec::Steer { layer, .. }
            | InterventionSpec::Patch { layer, .. }
            | InterventionSpec::Noise { layer, .. }
            | InterventionSpec::Swap { layer, .. } => *layer..*layer + 1,
            InterventionSpec::Block { layers, .. } => layers.0..layers.1,
        }
    }
}

// ---------------------------------------------------------------------------
