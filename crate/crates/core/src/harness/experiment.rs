//! Orchestration of the six experiment families over a trial set.
//!
//! Every family follows the same shape: a deterministic prepare pass runs
//! each trial once with no hooks (recording the baseline read-out and any
//! residuals the family will need), then each (layer, role, condition) cell
//! builds hooks per trial, re-runs, and scores per-trial rows. Cells are
//! processed in a fixed order and trials within a cell go through an
//! order-preserving worker pool, so outputs are byte-identical across
//! worker counts. An engine error aborts only its trial: the cell logs it,
//! and a cell with more than 1% aborted trials is marked invalid.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine;
use crate::error::{Error, Result};
use crate::harness::template::{resolve_lexicon, PositionMap, PromptTemplate};
use crate::harness::trials::{partition_trials, PreparedTrial};
use crate::hooks::{CaptureSpec, HookSet, LogitCapture};
use crate::interventions::{
    apply_steering, block_edges, build_steering_vector, compute_calibration_means,
    corrupt_answer_embeddings, layer_window, match_donors, mean_ablate, patch_position,
    residual_mean, swap_activation, EdgeEnd, PositionRole, TrialShape,
};
use crate::kernels::Matrix;
use crate::metrics::{
    aggregate_rows, auroc, ece, logit_difference, recovery, recovery_token, ConfidenceLexicon,
    EceReport, MetricsAggregate, MetricsReport, TrialRow,
};
use crate::model::ModelBundle;
use crate::par;
use crate::probing::{cv_auroc, cv_r2, Dataset};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Steer,
    Patch,
    Noise,
    Swap,
    Block,
    Probe,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Steer => "steer",
            ExperimentKind::Patch => "patch",
            ExperimentKind::Noise => "noise",
            ExperimentKind::Swap => "swap",
            ExperimentKind::Block => "block",
            ExperimentKind::Probe => "probe",
        }
    }
}

/// One attention edge to sever, in role terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockEdgeSpec {
    pub label: String,
    pub target: EdgeEnd,
    pub source: EdgeEnd,
    #[serde(default)]
    pub preserve: Vec<(EdgeEnd, EdgeEnd)>,
}

fn default_edges() -> Vec<BlockEdgeSpec> {
    let role = |r| EdgeEnd::Role { role: r };
    vec![
        BlockEdgeSpec {
            label: "readout<-newline".into(),
            target: role(PositionRole::ReadoutColon),
            source: role(PositionRole::AnswerNewline),
            preserve: vec![],
        },
        BlockEdgeSpec {
            label: "readout<-answer".into(),
            target: role(PositionRole::ReadoutColon),
            source: EdgeEnd::AnswerSpan,
            preserve: vec![],
        },
        BlockEdgeSpec {
            label: "readout<-question".into(),
            target: role(PositionRole::ReadoutColon),
            source: EdgeEnd::QuestionSpan,
            preserve: vec![],
        },
        BlockEdgeSpec {
            label: "newline<-answer".into(),
            target: role(PositionRole::AnswerNewline),
            source: EdgeEnd::AnswerSpan,
            preserve: vec![],
        },
    ]
}

fn default_template() -> String {
    "minimal0_9".into()
}
fn default_roles() -> Vec<PositionRole> {
    vec![
        PositionRole::AnswerNewline,
        PositionRole::AfterAnswerNewline,
        PositionRole::ReadoutColon,
    ]
}
fn default_alphas() -> Vec<f64> {
    vec![-5.0, -2.0, 2.0, 5.0]
}
fn default_window() -> usize {
    3
}
fn default_bins() -> usize {
    5
}
fn default_lambda() -> f64 {
    1e-3
}
fn default_folds() -> usize {
    5
}
fn default_group() -> usize {
    50
}
fn default_high() -> Vec<usize> {
    vec![7, 8, 9]
}
fn default_low() -> Vec<usize> {
    vec![0, 1, 2]
}
fn default_calibration() -> usize {
    20
}
fn default_workers() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_template")]
    pub template: String,
    /// lexicon id or path; defaults to the template's lexicon
    #[serde(default)]
    pub lexicon: Option<String>,
    pub layers: Vec<usize>,
    #[serde(default = "default_roles")]
    pub roles: Vec<PositionRole>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// attention-knockout window width around each center layer
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub edges: Vec<BlockEdgeSpec>,
    /// quantile bins per axis for donor matching
    #[serde(default = "default_bins")]
    pub match_bins: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_folds")]
    pub k_folds: usize,
    #[serde(default = "default_group")]
    pub n_high: usize,
    #[serde(default = "default_group")]
    pub n_low: usize,
    #[serde(default = "default_high")]
    pub high_classes: Vec<usize>,
    #[serde(default = "default_low")]
    pub low_classes: Vec<usize>,
    /// trials reserved for corruption / ablation means
    #[serde(default = "default_calibration")]
    pub n_calibration: usize,
    /// patching restricts to high-confidence trials when set (noising
    /// defaults to all trials; set it there explicitly if wanted)
    #[serde(default = "default_true")]
    pub high_confidence_only: bool,
    /// cap on test trials per cell (deterministic truncation)
    #[serde(default)]
    pub n_test: Option<usize>,
    #[serde(default)]
    pub with_replacement: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl ExperimentConfig {
    /// A config with every optional knob at its default.
    pub fn new(experiment: ExperimentKind, layers: Vec<usize>) -> Self {
        ExperimentConfig {
            experiment,
            template: default_template(),
            lexicon: None,
            layers,
            roles: default_roles(),
            alphas: default_alphas(),
            window: default_window(),
            edges: vec![],
            match_bins: default_bins(),
            lambda: default_lambda(),
            k_folds: default_folds(),
            n_high: default_group(),
            n_low: default_group(),
            high_classes: default_high(),
            low_classes: default_low(),
            n_calibration: default_calibration(),
            high_confidence_only: true,
            n_test: None,
            with_replacement: false,
            seed: 0,
            workers: default_workers(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn validate(&self, model: &ModelBundle, template: &PromptTemplate) -> Result<()> {
        let depth = model.config.n_layers;
        if self.layers.is_empty() {
            return Err(Error::Config("layer list is empty".into()));
        }
        if let Some(&bad) = self.layers.iter().find(|&&l| l >= depth) {
            return Err(Error::Config(format!(
                "layer {bad} outside model depth {depth}"
            )));
        }
        if self.roles.is_empty() {
            return Err(Error::Config("role list is empty".into()));
        }
        for role in &self.roles {
            if !template.roles.contains_key(role) {
                return Err(Error::Config(format!(
                    "role {role:?} is not defined by template {}",
                    template.id
                )));
            }
        }
        if self
            .high_classes
            .iter()
            .any(|c| self.low_classes.contains(c))
        {
            return Err(Error::Config("high and low classes overlap".into()));
        }
        match self.experiment {
            ExperimentKind::Steer => {
                if self.alphas.is_empty() {
                    return Err(Error::Config("steering needs at least one alpha".into()));
                }
            }
            ExperimentKind::Patch | ExperimentKind::Noise => {
                if self.n_calibration == 0 {
                    return Err(Error::Config("calibration set must be non-empty".into()));
                }
            }
            ExperimentKind::Swap => {
                if self.match_bins == 0 {
                    return Err(Error::Config(
                        "donor matching needs at least one bin".into(),
                    ));
                }
            }
            ExperimentKind::Block => {
                if self.window == 0 {
                    return Err(Error::Config("knockout window must be at least 1".into()));
                }
            }
            ExperimentKind::Probe => {
                if self.k_folds < 2 {
                    return Err(Error::Config("probing needs at least 2 folds".into()));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

/// Cross-validated probe scores for one (layer, role) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer: usize,
    pub role: String,
    /// trials with a high- or low-class baseline read-out
    pub n: usize,
    /// logistic probe: held-out AUROC of high vs low class
    pub auroc: f64,
    /// ridge probe: held-out R^2 against the verbalized confidence
    pub r2: f64,
    pub auroc_folds: Vec<f64>,
    pub r2_folds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutput {
    pub metrics: Vec<MetricsReport>,
    pub probes: Vec<ProbeReport>,
}

/// Baseline confidence-elicitation quality over a trial set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    /// trials whose first read-out token is outside the lexicon
    pub n_excluded: usize,
    pub accuracy: f64,
    pub ece: EceReport,
    pub auroc: f64,
    /// read-out count per confidence class
    pub class_histogram: Vec<usize>,
}

// ---------------------------------------------------------------------------
// prepare pass
// ---------------------------------------------------------------------------

/// One trial's clean run: the baseline read-out plus captured residuals at
/// the sites a family asked for.
#[derive(Debug, Clone)]
struct CleanRun {
    token: u32,
    class: Option<usize>,
    confidence: Option<f64>,
    logit_diff: f64,
    residuals: BTreeMap<(usize, PositionRole), Vec<f64>>,
}

fn role_name(role: PositionRole) -> &'static str {
    match role {
        PositionRole::AnswerNewline => "answer_newline",
        PositionRole::AfterAnswerNewline => "after_answer_newline",
        PositionRole::ReadoutColon => "readout_colon",
        PositionRole::InstructionColon => "instruction_colon",
        PositionRole::LastAnswerToken => "last_answer_token",
        PositionRole::FirstAnswerToken => "first_answer_token",
    }
}

/// First generated token and the lexicon-class logits at the read-out.
fn measure(
    model: &ModelBundle,
    lexicon: &ConfidenceLexicon,
    tokens: &[u32],
    hooks: &HookSet,
) -> Result<(u32, Vec<f64>)> {
    let out = engine::decode_with_hooks(model, tokens, 1, hooks, &CaptureSpec::logits_last())?;
    let logits = out.trace.logits_at(tokens.len() - 1)?;
    let class_logits = lexicon
        .first_tokens()
        .iter()
        .map(|&t| logits[t as usize])
        .collect();
    Ok((out.generated[0], class_logits))
}

/// Run every trial clean, capturing residuals at each requested
/// (layer, role) site.
fn clean_pass(
    model: &ModelBundle,
    lexicon: &ConfidenceLexicon,
    trials: &[PreparedTrial],
    sites: &[(usize, PositionRole)],
    workers: usize,
) -> Result<Vec<CleanRun>> {
    let runs = par::map_ordered(workers, trials, |t| -> Result<CleanRun> {
        let mut pairs = Vec::with_capacity(sites.len());
        for &(layer, role) in sites {
            pairs.push((layer, t.map.resolve_required(role)?));
        }
        let capture =
            CaptureSpec::residual_pairs(pairs.iter().copied()).with_logits(LogitCapture::Last);
        let out = engine::decode_with_hooks(model, &t.tokens, 1, &HookSet::new(), &capture)?;
        let logits = out.trace.logits_at(t.tokens.len() - 1)?;
        let class_logits: Vec<f64> = lexicon
            .first_tokens()
            .iter()
            .map(|&tok| logits[tok as usize])
            .collect();
        let token = out.generated[0];
        let class = lexicon.class_of_token(token);
        let confidence = match class {
            Some(k) => Some(lexicon.class_to_confidence(k)?),
            None => None,
        };
        let logit_diff = match class {
            Some(k) => logit_difference(&class_logits, k)?,
            None => 0.0,
        };
        let mut residuals = BTreeMap::new();
        for (&site, &(layer, pos)) in sites.iter().zip(&pairs) {
            residuals.insert(site, out.trace.residual_at(layer, pos)?.to_vec());
        }
        Ok(CleanRun {
            token,
            class,
            confidence,
            logit_diff,
            residuals,
        })
    });
    runs.into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Data(format!("trial {}: {e}", trials[i].trial.id))))
        .collect()
}

/// Per-trial row of one intervened run, scored against the clean baseline.
fn build_row(
    trial_id: u64,
    base: &CleanRun,
    lexicon: &ConfidenceLexicon,
    token: u32,
    class_logits: &[f64],
) -> Result<TrialRow> {
    let iv_class = lexicon.class_of_token(token);
    let iv_confidence = match iv_class {
        Some(k) => Some(lexicon.class_to_confidence(k)?),
        None => None,
    };
    let logit_diff_intervened = match base.class {
        Some(k) => logit_difference(class_logits, k)?,
        None => 0.0,
    };
    Ok(TrialRow {
        trial_id,
        baseline_token: base.token,
        intervened_token: token,
        token_changed: token != base.token,
        logit_diff_baseline: base.logit_diff,
        logit_diff_intervened,
        confidence_baseline: base.confidence,
        confidence_intervened: iv_confidence,
        excluded: base.class.is_none() || iv_class.is_none(),
    })
}

/// Assemble a cell report from per-trial outcomes, logging aborted trials.
fn finish_cell(
    experiment: &str,
    layer: Option<usize>,
    role: &str,
    condition: &str,
    results: Vec<(u64, Result<TrialRow>)>,
) -> MetricsReport {
    let attempted = results.len();
    let mut rows = Vec::with_capacity(attempted);
    let mut errors = Vec::new();
    for (trial_id, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => errors.push(format!("trial {trial_id} layer {layer:?} role {role}: {e}")),
        }
    }
    let aborted = errors.len();
    let aggregate = if rows.is_empty() {
        MetricsAggregate {
            n: 0,
            n_excluded: 0,
            first_token_change_rate: 0.0,
            mean_logit_diff_change: 0.0,
            sem_logit_diff_change: 0.0,
            mean_confidence_change: 0.0,
            sem_confidence_change: 0.0,
        }
    } else {
        aggregate_rows(&rows).expect("non-empty rows aggregate")
    };
    MetricsReport {
        experiment: experiment.into(),
        layer,
        role: role.into(),
        condition: condition.into(),
        rows,
        aggregate,
        aborted_trials: aborted,
        invalid: aborted * 100 > attempted.max(1),
        recovery: None,
        recovery_token: None,
        errors,
    }
}

/// Seeded shuffle of 0..n, used to split calibration from test trials.
fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed_0511));
    idx.shuffle(&mut rng);
    idx
}

// ---------------------------------------------------------------------------
// entry points
// ---------------------------------------------------------------------------

/// Run one experiment family over prepared trials.
pub fn run_experiment(
    config: &ExperimentConfig,
    model: &ModelBundle,
    trials: &[PreparedTrial],
) -> Result<RunOutput> {
    let template = PromptTemplate::resolve(&config.template)?;
    config.validate(model, &template)?;
    let lexicon = resolve_lexicon(config.lexicon.as_deref().unwrap_or(&template.lexicon))?;
    if trials.is_empty() {
        return Err(Error::Data("no trials to run".into()));
    }
    match config.experiment {
        ExperimentKind::Steer => Ok(RunOutput {
            metrics: run_steer(config, model, &lexicon, trials)?,
            probes: vec![],
        }),
        ExperimentKind::Patch => Ok(RunOutput {
            metrics: run_patch(config, model, &lexicon, trials)?,
            probes: vec![],
        }),
        ExperimentKind::Noise => Ok(RunOutput {
            metrics: run_noise(config, model, &lexicon, trials)?,
            probes: vec![],
        }),
        ExperimentKind::Swap => Ok(RunOutput {
            metrics: run_swap(config, model, &lexicon, trials)?,
            probes: vec![],
        }),
        ExperimentKind::Block => Ok(RunOutput {
            metrics: run_block(config, model, &lexicon, trials)?,
            probes: vec![],
        }),
        ExperimentKind::Probe => Ok(RunOutput {
            metrics: vec![],
            probes: run_probe(config, model, &lexicon, trials)?,
        }),
    }
}

/// Baseline confidence elicitation: decode each trial's read-out, map it to
/// a confidence value, and score calibration (ECE over 10 bins, AUROC
/// against correctness, class histogram).
pub fn calibrate(
    model: &ModelBundle,
    lexicon: &ConfidenceLexicon,
    trials: &[PreparedTrial],
    workers: usize,
) -> Result<CalibrationReport> {
    if trials.is_empty() {
        return Err(Error::Data("no trials to calibrate".into()));
    }
    let measured = par::map_ordered(workers, trials, |t| {
        measure(model, lexicon, &t.tokens, &HookSet::new())
    });
    let n_classes = lexicon.first_tokens().len();
    let mut histogram = vec![0usize; n_classes];
    let mut confidences = Vec::new();
    let mut correct = Vec::new();
    let mut n_excluded = 0usize;
    for (t, m) in trials.iter().zip(measured) {
        let (token, _) = m.map_err(|e| Error::Data(format!("trial {}: {e}", t.trial.id)))?;
        match lexicon.class_of_token(token) {
            Some(k) => {
                histogram[k] += 1;
                confidences.push(lexicon.class_to_confidence(k)?);
                correct.push(t.trial.correct);
            }
            None => n_excluded += 1,
        }
    }
    if confidences.is_empty() {
        return Err(Error::Coverage(
            "no trial produced an in-lexicon read-out".into(),
        ));
    }
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    Ok(CalibrationReport {
        n: trials.len(),
        n_excluded,
        accuracy,
        ece: ece(&confidences, &correct, 10)?,
        auroc: auroc(&confidences, &correct)?,
        class_histogram: histogram,
    })
}

// ---------------------------------------------------------------------------
// families
// ---------------------------------------------------------------------------

fn run_steer(
    config: &ExperimentConfig,
    model: &ModelBundle,
    lexicon: &ConfidenceLexicon,
    trials: &[PreparedTrial],
) -> Result<Vec<MetricsReport>> {
    let sites: Vec<(usize, PositionRole)> = config
        .layers
        .iter()
        .flat_map(|&l| config.roles.iter().map(move |&r| (l, r)))
        .collect();
    let runs = clean_pass(model, lexicon, trials, &sites, config.workers)?;
    let classes: Vec<Option<usize>> = runs.iter().map(|r| r.class).collect();
    let (high_idx, low_idx) = partition_trials(
        &classes,
        &config.high_classes,
        &config.low_classes,
        config.n_high,
        config.n_low,
        config.seed,
        config.with_replacement,
    )?;
    let fit: BTreeSet<usize> = high_idx.iter().chain(&low_idx).copied().collect();
    let mut test_idx: Vec<usize> = (0..trials.len()).filter(|i| !fit.contains(i)).collect();
    if let Some(cap) = config.n_test {
        test_idx.truncate(cap);
    }
    if test_idx.is_empty() {
        return Err(Error::InsufficientTrials(
            "no trials left to steer after direction fitting".into(),
        ));
    }

    let mut reports = Vec::new();
    for &layer in &config.layers {
        for &role in &config.roles {
            let gather = |idx: &[usize]| -> Vec<Vec<f64>> {
                idx.iter()
                    .map(|&i| runs[i].residuals[&(layer, role)].clone())
                    .collect()
            };
            let vector = build_steering_vector(&gather(&high_idx), &gather(&low_idx))?;
            for &alpha in &config.alphas {
                let results: Vec<(u64, Result<TrialRow>)> =
                    par::map_ordered(config.workers, &test_idx, |&i| -> (u64, Result<TrialRow>) {
                        let t = &trials[i];
                        let run = || -> Result<TrialRow> {
                            let pos = t.map.resolve_required(role)?;
                            let hooks = apply_steering(HookSet::new(), layer, pos, &vector, alpha);
                            let (tok, cl) = measure(model, lexicon, &t.tokens, &hooks)?;
                            build_row(t.trial.id, &runs[i], lexicon, tok, &cl)
                        };
                        (t.trial.id, run())
                    });
                reports.push(finish_cell(
                    "steer",
                    Some(layer),
                    role_name(role),
                    &format!("alpha={alpha}"),
                    results,
                ));
            }
        }
    }
    Ok(reports)
}

fn run_patch(
    config: &ExperimentConfig,
    model: &ModelBundle,
    lexicon: &ConfidenceLexicon,
    trials: &[PreparedTrial],
) -> Result<Vec<MetricsReport>> {
    let sites: Vec<(usize, PositionRole)> = config
        .layers
        .iter()
        .flat_map(|&l| config.roles.iter().map(move |&r| (l, r)))
        .collect();
    let runs = clean_pass(model, lexicon, trials, &sites, config.workers)?;

    let order = shuffled_indices(trials.len(), config.seed);
    if order.len() <= config.n_calibration {
        return Err(Error::InsufficientTrials(format!(
            "{} trials cannot fund a {}-trial calibration set plus tests",
            order.len(),
            config.n_calibration
        )));
    }
    let (cal_idx, rest) = order.split_at(config.n_calibration);
    let mut test_idx: Vec<usize> = rest
        .iter()
        .copied()
        .filter(|&i| {
            !config.high_confidence_only
                || runs[i]
                    .class
                    .is_some_and(|k| config.high_classes.contains(&k))
        })
        .collect();
    test_idx.sort_unstable();
    if let Some(cap) = config.n_test {
        test_idx.truncate(cap);
    }
    if test_idx.is_empty() {
        return Err(Error::InsufficientTrials(
            "no high-confidence test trials for patching".into(),
        ));
    }
    for i in &test_idx {
        assert!(!cal_idx.contains(i), "calibration and test sets overlap");
    }

    // corruption means: answer-token embeddings by relative position
    let samples: Vec<Vec<Vec<f64>>> = cal_idx
        .iter()
        .map(|&i| {
            trials[i]
                .map
                .answer_span
                .clone()
                .map(|p| model.embedding.row(trials[i].tokens[p] as usize).to_vec())
                .collect()
        })
        .collect();
    let means = compute_calibration_means(&samples)?;

    // the corrupted run is cell-independent; measure it once per trial
    let corrupt: Vec<Result<(u32, f64)>> =
        par::map_ordered(config.workers, &test_idx, |&i| -> Result<(u32, f64)> {
            let t = &trials[i];
            let hooks =
                corrupt_answer_embeddings(HookSet::new(), t.map.answer_span.clone(), &means)?;
            let (tok, cl) = measure(model, lexicon, &t.tokens, &hooks)?;
            let ld = match runs[i].class {
                Some(k) => logit_difference(&cl, k)?,
                None => 0.0,
            };
            Ok((tok, ld))
        });

    let mut reports = Vec::new();
    for &layer in &config.layers {
        for &role in &config.roles {
            let results: Vec<(u64, Result<TrialRow>)> =
                par::map_ordered(config.workers, &test_idx, |&i| -> (u64, Result<TrialRow>) {
                    let t = &trials[i];
                    let run = || -> Result<TrialRow> {
                        let pos = t.map.resolve_required(role)?;
                        let hooks = corrupt_answer_embeddings(
                            HookSet::new(),
                            t.map.answer_span.clone(),
                            &means,
                        )?;
                        let hooks = patch_position(
                            hooks,
                            layer,
                            pos,
                            runs[i].residuals[&(layer, role)].clone(),
                        );
                        let (tok, cl) = measure(model, lexicon, &t.tokens, &hooks)?;
                        build_row(t.trial.id, &runs[i], lexicon, tok, &cl)
                    };
                    (t.trial.id, run())
                });
            let mut report = finish_cell("patch", Some(layer), role_name(role), "patched", results);

            // recovery over trials where clean, corrupt, and patched all
            // landed: of the mean logit difference, and of token identity
            let mut clean_ld = Vec::new();
            let mut corrupt_ld = Vec::new();
            let mut patched_ld = Vec::new();
            let mut n_corrupt_changed = 0usize;
            let mut n_patched_changed = 0usize;
            let mut n_ok = 0usize;
            for (slot, &i) in test_idx.iter().enumerate() {
                let row = report
                    .rows
                    .iter()
                    .find(|r| r.trial_id == trials[i].trial.id);
                let (Some(row), Ok((ctok, cld))) = (row, corrupt[slot].as_ref()) else {
                    continue;
                };
                if row.excluded {
                    continue;
                }
                n_ok += 1;
                clean_ld.push(row.logit_diff_baseline);
                corrupt_ld.push(*cld);
                patched_ld.push(row.logit_diff_intervened);
                if *ctok != row.baseline_token {
                    n_corrupt_changed += 1;
                }
                if row.token_changed {
                    n_patched_changed += 1;
                }
            }
            if n_ok > 0 {
                let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                match recovery(m(&clean_ld), m(&corrupt_ld), m(&patched_ld)) {
                    Ok(r) => report.recovery = Some(r),
                    Err(e) => report.errors.push(format!("recovery undefined: {e}")),
                }
                let rate_c = n_corrupt_changed as f64 / n_ok as f64;
                let rate_p = n_patched_changed as f64 / n_ok as f64;
                match recovery_token(rate_c, rate_p) {
                    Ok(r) => report.recovery_token = Some(r),
                    Err(e) => report.errors.push(format!("token recovery undefined: {e}")),
                }
            }
            reports.push(report);
        }
    }
    Ok(reports)
}

fn run_noise(
    config: &ExperimentConfig,
    model: &ModelBundle,
    lexicon: &ConfidenceLexicon,
    trials: &[PreparedTrial],
) -> Result<Vec<MetricsReport>> {
    let sites: Vec<(usize, PositionRole)> = config
        .layers
        .iter()
        .flat_map(|&l| config.roles.iter().map(move |&r| (l, r)))
        .collect();
    let runs = clean_pass(model, lexicon, trials, &sites, config.workers)?;

    let order = shuffled_indices(trials.len(), config.seed);
    if order.len() <= config.n_calibration {
        return Err(Error::InsufficientTrials(format!(
            "{} trials cannot fund a {}-trial calibration set plus tests",
            order.len(),
            config.n_calibration
        )));
    }
    let (cal_idx, rest) = order.split_at(config.n_calibration);
    let mut test_idx = rest.to_vec();
    test_idx.sort_unstable();
    if let Some(cap) = config.n_test {
        test_idx.truncate(cap);
    }

    let mut reports = Vec::new();
    for &layer in &config.layers {
        for &role in &config.roles {
            let cal: Vec<Vec<f64>> = cal_idx
                .iter()
                .map(|&i| runs[i].residuals[&(layer, role)].clone())
                .collect();
            let mean = residual_mean(&cal)?;
            let results: Vec<(u64, Result<TrialRow>)> =
                par::map_ordered(config.workers, &test_idx, |&i| -> (u64, Result<TrialRow>) {
                    let t = &trials[i];
                    let run = || -> Result<TrialRow> {
                        let pos = t.map.resolve_required(role)?;
                        let hooks = mean_ablate(HookSet::new(), layer, pos, mean.clone());
                        let (tok, cl) = measure(model, lexicon, &t.tokens, &hooks)?;
                        build_row(t.trial.id, &runs[i], lexicon, tok, &cl)
                    };
                    (t.trial.id, run())
                });
            reports.push(finish_cell(
                "noise",
                Some(layer),
                role_name(role),
                "mean_ablated",
                results,
            ));
        }
    }
    Ok(reports)
}

fn run_swap(
    config: &ExperimentConfig,
    model: &ModelBundle,
    lexicon: &ConfidenceLexicon,
    trials: &[PreparedTrial],
) -> Result<Vec<MetricsReport>> {
    let sites: Vec<(usize, PositionRole)> = config
        .layers
        .iter()
        .flat_map(|&l| config.roles.iter().map(move |&r| (l, r)))
        .collect();
    let runs = clean_pass(model, lexicon, trials, &sites, config.workers)?;
    let classes: Vec<Option<usize>> = runs.iter().map(|r| r.class).collect();
    let (recip_idx, low_idx) = partition_trials(
        &classes,
        &config.high_classes,
        &config.low_classes,
        config.n_high,
        config.n_low,
        config.seed,
        config.with_replacement,
    )?;
    let shape = |i: usize| TrialShape {
        question_tokens: trials[i].map.question_span.len(),
        answer_tokens: trials[i].map.answer_span.len(),
    };
    let recip_shapes: Vec<TrialShape> = recip_idx.iter().map(|&i| shape(i)).collect();

    // donor plans per condition: cross-confidence, matched same-confidence
    // controls (never the recipient itself), and exact self-swaps
    let cross_plan = match_donors(
        &recip_shapes,
        &low_idx.iter().map(|&i| shape(i)).collect::<Vec<_>>(),
        config.match_bins,
        None,
    )?;
    let self_forbidden: Vec<Option<usize>> = (0..recip_idx.len()).map(Some).collect();
    let same_plan = match_donors(
        &recip_shapes,
        &recip_shapes,
        config.match_bins,
        Some(&self_forbidden),
    )?;
    let conditions: Vec<(&str, Vec<usize>)> = vec![
        (
            "cross",
            cross_plan.donor_for.iter().map(|&j| low_idx[j]).collect(),
        ),
        (
            "same",
            same_plan.donor_for.iter().map(|&j| recip_idx[j]).collect(),
        ),
        ("self", recip_idx.clone()),
    ];

    let mut reports = Vec::new();
    for &layer in &config.layers {
        for &role in &config.roles {
            for (label, donor_of) in &conditions {
                let pairs: Vec<(usize, usize)> = recip_idx
                    .iter()
                    .copied()
                    .zip(donor_of.iter().copied())
                    .collect();
                let results: Vec<(u64, Result<TrialRow>)> = par::map_ordered(
                    config.workers,
                    &pairs,
                    |&(i, j)| -> (u64, Result<TrialRow>) {
                        let t = &trials[i];
                        let run = || -> Result<TrialRow> {
                            let pos = t.map.resolve_required(role)?;
                            let donor_vec = runs[j].residuals[&(layer, role)].clone();
                            let hooks = swap_activation(HookSet::new(), layer, pos, donor_vec);
                            let (tok, cl) = measure(model, lexicon, &t.tokens, &hooks)?;
                            build_row(t.trial.id, &runs[i], lexicon, tok, &cl)
                        };
                        (t.trial.id, run())
                    },
                );
                reports.push(finish_cell(
                    "swap",
                    Some(layer),
                    role_name(role),
                    label,
                    results,
                ));
            }
        }
    }
    Ok(reports)
}

fn resolve_edge(end: &EdgeEnd, map: &PositionMap, len: usize) -> Result<Vec<usize>> {
    match end {
        EdgeEnd::Role { role } => Ok(vec![map.resolve_required(*role)?]),
        EdgeEnd::QuestionSpan => Ok(map.question_span.clone().collect()),
        EdgeEnd::AnswerSpan => Ok(map.answer_span.clone().collect()),
        EdgeEnd::All => Ok((0..len).collect()),
    }
}

fn run_block(
    config: &ExperimentConfig,
    model: &ModelBundle,
    lexicon: &ConfidenceLexicon,
    trials: &[PreparedTrial],
) -> Result<Vec<MetricsReport>> {
    let runs = clean_pass(model, lexicon, trials, &[], config.workers)?;
    let edges = if config.edges.is_empty() {
        default_edges()
    } else {
        config.edges.clone()
    };
    let mut test_idx: Vec<usize> = (0..trials.len()).collect();
    if let Some(cap) = config.n_test {
        test_idx.truncate(cap);
    }

    let mut reports = Vec::new();
    for &center in &config.layers {
        for edge in &edges {
            let results: Vec<(u64, Result<TrialRow>)> =
                par::map_ordered(config.workers, &test_idx, |&i| -> (u64, Result<TrialRow>) {
                    let t = &trials[i];
                    let run = || -> Result<TrialRow> {
                        let window = layer_window(center, config.window, model.config.n_layers)?;
                        let targets = resolve_edge(&edge.target, &t.map, t.tokens.len())?;
                        let sources = resolve_edge(&edge.source, &t.map, t.tokens.len())?;
                        let mut preserve = Vec::new();
                        for (pt, ps) in &edge.preserve {
                            for &a in &resolve_edge(pt, &t.map, t.tokens.len())? {
                                for &b in &resolve_edge(ps, &t.map, t.tokens.len())? {
                                    preserve.push((a, b));
                                }
                            }
                        }
                        let hooks =
                            block_edges(HookSet::new(), window, &targets, &sources, &preserve)?;
                        let (tok, cl) = measure(model, lexicon, &t.tokens, &hooks)?;
                        build_row(t.trial.id, &runs[i], lexicon, tok, &cl)
                    };
                    (t.trial.id, run())
                });
            reports.push(finish_cell(
                "block",
                Some(center),
                &edge.label,
                "blocked",
                results,
            ));
        }
    }
    Ok(reports)
}

fn run_probe(
    config: &ExperimentConfig,
    model: &ModelBundle,
    lexicon: &ConfidenceLexicon,
    trials: &[PreparedTrial],
) -> Result<Vec<ProbeReport>> {
    let sites: Vec<(usize, PositionRole)> = config
        .layers
        .iter()
        .flat_map(|&l| config.roles.iter().map(move |&r| (l, r)))
        .collect();
    let runs = clean_pass(model, lexicon, trials, &sites, config.workers)?;

    // keep trials whose baseline class falls in either group
    let kept: Vec<usize> = (0..trials.len())
        .filter(|&i| {
            runs[i].class.is_some_and(|k| {
                config.high_classes.contains(&k) || config.low_classes.contains(&k)
            })
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::InsufficientTrials(
            "no trials in the probe's class groups".into(),
        ));
    }

    let mut reports = Vec::new();
    for &layer in &config.layers {
        for &role in &config.roles {
            let d = model.config.d_model;
            let mut features = Matrix::zeros(kept.len(), d);
            let mut labels = Vec::with_capacity(kept.len());
            let mut confidences = Vec::with_capacity(kept.len());
            for (r, &i) in kept.iter().enumerate() {
                let resid = &runs[i].residuals[&(layer, role)];
                for c in 0..d {
                    features.set(r, c, resid[c]);
                }
                let class = runs[i].class.expect("kept trials are classified");
                labels.push(config.high_classes.contains(&class));
                confidences.push(runs[i].confidence.expect("kept trials have confidence"));
            }
            let class_data = Dataset::with_labels(features.clone(), labels)?;
            let auroc_probe = cv_auroc(
                &class_data,
                config.k_folds,
                config.lambda,
                200,
                1e-8,
                config.seed,
            )?;
            let reg_data = Dataset::new(features, confidences)?;
            let r2_probe = cv_r2(&reg_data, config.k_folds, config.lambda, config.seed)?;
            reports.push(ProbeReport {
                layer,
                role: role_name(role).into(),
                n: kept.len(),
                auroc: auroc_probe.mean_score,
                r2: r2_probe.mean_score,
                auroc_folds: auroc_probe.fold_scores,
                r2_folds: r2_probe.fold_scores,
            });
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::template::builtin_lexicon;
    use crate::harness::trials::prepare_trials;
    use crate::toycircuit::{
        build_planted_model, correctness_table, gen_planted_trials, PlantedSpec,
    };

    fn toy_setup(n: usize) -> (ModelBundle, Vec<PreparedTrial>) {
        let (model, _) = build_planted_model(&PlantedSpec::default()).unwrap();
        let table = correctness_table(11);
        let trials = gen_planted_trials(n, 23, &table).unwrap();
        let template = PromptTemplate::builtin("minimal0_9").unwrap();
        let prepared = prepare_trials(trials, &model.vocab, &template).unwrap();
        (model, prepared)
    }

    fn base_config(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            experiment: kind,
            template: "minimal0_9".into(),
            lexicon: None,
            layers: vec![4],
            roles: vec![
                PositionRole::AnswerNewline,
                PositionRole::AfterAnswerNewline,
            ],
            alphas: vec![2.0],
            window: 3,
            edges: vec![],
            match_bins: 3,
            lambda: 1e-3,
            k_folds: 3,
            n_high: 12,
            n_low: 12,
            high_classes: vec![7, 8, 9],
            low_classes: vec![0, 1, 2],
            n_calibration: 10,
            high_confidence_only: true,
            n_test: Some(40),
            with_replacement: false,
            seed: 5,
            workers: 1,
        }
    }

    #[test]
    fn config_validation_catches_bad_layers_and_roles() {
        let (model, _) = toy_setup(4);
        let template = PromptTemplate::builtin("minimal0_9").unwrap();
        let mut config = base_config(ExperimentKind::Steer);
        config.layers = vec![99];
        let err = config.validate(&model, &template).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert_eq!(err.exit_code(), 2);

        let mut config = base_config(ExperimentKind::Steer);
        config.roles = vec![PositionRole::InstructionColon];
        assert!(config.validate(&model, &template).is_err());

        let mut config = base_config(ExperimentKind::Probe);
        config.high_classes = vec![5, 9];
        config.low_classes = vec![5];
        assert!(config.validate(&model, &template).is_err());
    }

    #[test]
    fn calibrate_reports_full_histogram_on_planted_trials() {
        let (model, prepared) = toy_setup(80);
        let lexicon = builtin_lexicon("toy_numeric0_9").unwrap();
        let report = calibrate(&model, &lexicon, &prepared, 1).unwrap();
        assert_eq!(report.n, 80);
        assert_eq!(report.n_excluded, 0, "planted read-outs are always digits");
        assert_eq!(report.class_histogram.iter().sum::<usize>(), 80);
        assert!(report.auroc > 0.5, "planted confidence tracks correctness");
        assert!(report.ece.ece < 0.5);
    }

    #[test]
    fn steering_moves_confidence_in_the_alpha_direction() {
        let (model, prepared) = toy_setup(120);
        let mut config = base_config(ExperimentKind::Steer);
        config.layers = vec![4];
        config.roles = vec![PositionRole::AnswerNewline];
        config.alphas = vec![-60.0, 60.0];
        config.n_test = Some(20);
        let out = run_experiment(&config, &model, &prepared).unwrap();
        assert_eq!(out.metrics.len(), 2);
        let down = &out.metrics[0];
        let up = &out.metrics[1];
        assert_eq!(down.condition, "alpha=-60");
        assert!(!down.invalid && !up.invalid);
        assert!(
            up.aggregate.mean_confidence_change > down.aggregate.mean_confidence_change,
            "positive alpha should raise confidence: up {} down {}",
            up.aggregate.mean_confidence_change,
            down.aggregate.mean_confidence_change
        );
    }

    #[test]
    fn patching_after_retrieval_restores_the_clean_readout() {
        let (model, prepared) = toy_setup(120);
        let mut config = base_config(ExperimentKind::Patch);
        config.layers = vec![7];
        config.roles = vec![PositionRole::ReadoutColon];
        config.n_test = Some(15);
        let out = run_experiment(&config, &model, &prepared).unwrap();
        let report = &out.metrics[0];
        assert!(!report.invalid);
        let rec = report.recovery.expect("recovery defined");
        assert!(rec > 0.9, "post-retrieval patch should restore: {rec}");
        let rec_tok = report.recovery_token.expect("token recovery defined");
        assert!(rec_tok > 0.9, "token recovery {rec_tok}");
    }

    #[test]
    fn self_swap_is_an_exact_identity() {
        let (model, prepared) = toy_setup(120);
        let mut config = base_config(ExperimentKind::Swap);
        config.layers = vec![4];
        config.roles = vec![PositionRole::AnswerNewline];
        config.n_high = 8;
        config.n_low = 8;
        let out = run_experiment(&config, &model, &prepared).unwrap();
        let selfs: Vec<&MetricsReport> = out
            .metrics
            .iter()
            .filter(|m| m.condition == "self")
            .collect();
        assert_eq!(selfs.len(), 1);
        assert_eq!(selfs[0].aggregate.first_token_change_rate, 0.0);
        assert_eq!(selfs[0].aggregate.mean_logit_diff_change, 0.0);
        let cross = out.metrics.iter().find(|m| m.condition == "cross").unwrap();
        assert!(
            cross.aggregate.first_token_change_rate > 0.9,
            "cross-confidence swap at the cache site should rewrite the read-out: {}",
            cross.aggregate.first_token_change_rate
        );
    }

    #[test]
    fn blocking_the_retrieval_edge_flattens_confidence() {
        let (model, prepared) = toy_setup(60);
        let mut config = base_config(ExperimentKind::Block);
        config.layers = vec![6];
        config.window = 1;
        config.edges = vec![BlockEdgeSpec {
            label: "readout<-newline".into(),
            target: EdgeEnd::Role {
                role: PositionRole::ReadoutColon,
            },
            source: EdgeEnd::Role {
                role: PositionRole::AnswerNewline,
            },
            preserve: vec![],
        }];
        config.n_test = Some(30);
        let out = run_experiment(&config, &model, &prepared).unwrap();
        let report = &out.metrics[0];
        assert!(!report.invalid);
        // trials whose planted level is nonzero must fall to the zero read-out
        let nonzero_changed = report
            .rows
            .iter()
            .filter(|r| r.confidence_baseline.is_some_and(|c| c > 0.05))
            .all(|r| r.token_changed);
        assert!(
            nonzero_changed,
            "every nonzero-confidence trial should change"
        );
    }

    #[test]
    fn probe_separates_high_from_low_at_the_cached_site() {
        let (model, prepared) = toy_setup(150);
        let mut config = base_config(ExperimentKind::Probe);
        config.layers = vec![4];
        config.roles = vec![PositionRole::AnswerNewline];
        config.k_folds = 3;
        let out = run_experiment(&config, &model, &prepared).unwrap();
        assert_eq!(out.probes.len(), 1);
        let probe = &out.probes[0];
        assert!(
            probe.auroc > 0.95,
            "cached axis is linearly readable: {}",
            probe.auroc
        );
        assert!(
            probe.r2 > 0.8,
            "confidence regression should fit: {}",
            probe.r2
        );
        assert_eq!(probe.auroc_folds.len(), 3);
    }

    #[test]
    fn runs_are_identical_across_worker_counts() {
        let (model, prepared) = toy_setup(80);
        let mut config = base_config(ExperimentKind::Noise);
        config.layers = vec![4];
        config.roles = vec![PositionRole::AnswerNewline];
        config.n_test = Some(20);
        let a = run_experiment(&config, &model, &prepared).unwrap();
        config.workers = 8;
        let b = run_experiment(&config, &model, &prepared).unwrap();
        assert_eq!(
            serde_json::to_string(&a.metrics).unwrap(),
            serde_json::to_string(&b.metrics).unwrap(),
            "worker count must not affect results"
        );
    }
}
