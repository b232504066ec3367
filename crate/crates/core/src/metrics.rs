//! Confidence lexicons and outcome metrics.
//!
//! A lexicon maps a model's verbalized confidence (a class name's first
//! token, or a numeric string) onto [0, 1]. The metrics here quantify how an
//! intervention moved that read-out: logit margins, first-token change
//! rates, patching recovery, calibration (ECE), and discrimination (AUROC).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// lexicon
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LexiconKind {
    /// ten named classes, each owning a sub-range of [0, 1]
    Categorical,
    /// integer 0..=100 verbalized as digits; confidence = value / 100
    Numeric0To100,
    /// single digit 0..=9; confidence = value / 9
    Numeric0To9,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexiconClass {
    pub label: String,
    /// token id the class's verbalization starts with
    pub first_token: u32,
    pub lo: f64,
    pub hi: f64,
}

impl LexiconClass {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Number of confidence classes a categorical lexicon must carry.
pub const CATEGORICAL_CLASSES: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceLexicon {
    pub kind: LexiconKind,
    pub classes: Vec<LexiconClass>,
}

impl ConfidenceLexicon {
    pub fn new(kind: LexiconKind, classes: Vec<LexiconClass>) -> Result<Self> {
        let lex = ConfidenceLexicon { kind, classes };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != CATEGORICAL_CLASSES {
            return Err(Error::Config(format!(
                "lexicon must list exactly {CATEGORICAL_CLASSES} classes, got {}",
                self.classes.len()
            )));
        }
        let mut tokens: Vec<u32> = self.classes.iter().map(|c| c.first_token).collect();
        tokens.sort_unstable();
        tokens.dedup();
        if tokens.len() != self.classes.len() {
            return Err(Error::Config("lexicon classes share a first token".into()));
        }
        // ranges must partition [0, 1] in class order
        let mut edge = 0.0;
        for (i, c) in self.classes.iter().enumerate() {
            if (c.lo - edge).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "class {i} ({}) starts at {}, expected {edge} (ranges must partition [0,1])",
                    c.label, c.lo
                )));
            }
            if c.hi <= c.lo {
                return Err(Error::Config(format!(
                    "class {i} ({}) has empty range",
                    c.label
                )));
            }
            edge = c.hi;
        }
        if (edge - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "class ranges end at {edge}, expected 1 (ranges must partition [0,1])"
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lex: ConfidenceLexicon =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("lexicon json: {e}")))?;
        lex.validate()?;
        Ok(lex)
    }

    /// Class index (position in `classes`) of a first token, if any.
    pub fn class_of_token(&self, token: u32) -> Option<usize> {
        self.classes.iter().position(|c| c.first_token == token)
    }

    pub fn first_tokens(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.first_token).collect()
    }

    /// Scalar confidence for a verbalized value: class-range midpoint for
    /// categorical lexicons, `value / 100` or `value / 9` for numeric ones.
    pub fn class_to_confidence(&self, value: usize) -> Result<f64> {
        match self.kind {
            LexiconKind::Categorical => self
                .classes
                .get(value)
                .map(LexiconClass::midpoint)
                .ok_or_else(|| Error::Validation(format!("class index {value} out of range"))),
            LexiconKind::Numeric0To100 => {
                if value > 100 {
                    return Err(Error::Validation(format!(
                        "numeric confidence {value} > 100"
                    )));
                }
                Ok(value as f64 / 100.0)
            }
            LexiconKind::Numeric0To9 => {
                if value > 9 {
                    return Err(Error::Validation(format!("numeric confidence {value} > 9")));
                }
                Ok(value as f64 / 9.0)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// logit metrics
// ---------------------------------------------------------------------------

/// The class-first-token logits extracted from one position, with the index
/// of the read-out target among them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitRow {
    pub logits: Vec<f64>,
    pub target: usize,
}

/// Logit margin of the target class over the rest:
/// `z[target] - mean(z[k], k != target)`.
pub fn logit_difference(class_logits: &[f64], target: usize) -> Result<f64> {
    if class_logits.len() < 2 {
        return Err(Error::Validation(
            "logit_difference needs at least 2 classes".into(),
        ));
    }
    if target >= class_logits.len() {
        return Err(Error::Validation(format!(
            "target {target} out of range for {} classes",
            class_logits.len()
        )));
    }
    let sum: f64 = class_logits.iter().sum();
    let others = (sum - class_logits[target]) / (class_logits.len() - 1) as f64;
    Ok(class_logits[target] - others)
}

/// Fraction of (baseline, intervened) first-token pairs that differ.
pub fn first_token_change_rate(pairs: &[(u32, u32)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("change rate over empty set".into()));
    }
    let changed = pairs.iter().filter(|(a, b)| a != b).count();
    Ok(changed as f64 / pairs.len() as f64)
}

/// Patching recovery of a scalar metric, in percent:
/// `(patched - corrupt) / (clean - corrupt) * 100`.
pub fn recovery(clean: f64, corrupt: f64, patched: f64) -> Result<f64> {
    if clean == corrupt {
        return Err(Error::UndefinedDenominator(
            "recovery undefined: clean metric equals corrupt metric".into(),
        ));
    }
    Ok((patched - corrupt) / (clean - corrupt) * 100.0)
}

/// Token-level recovery, in percent:
/// `(rate_corrupt - rate_patched) / rate_corrupt * 100`.
pub fn recovery_token(rate_corrupt: f64, rate_patched: f64) -> Result<f64> {
    if rate_corrupt == 0.0 {
        return Err(Error::UndefinedDenominator(
            "token recovery undefined: corrupt change rate is zero".into(),
        ));
    }
    Ok((rate_corrupt - rate_patched) / rate_corrupt * 100.0)
}

// ---------------------------------------------------------------------------
// calibration and discrimination
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EceReport {
    pub ece: f64,
    pub n: usize,
    pub bins: Vec<ReliabilityBin>,
}

/// Expected calibration error over `n_bins` equal-width bins. Bins are
/// half-open `[lo, hi)` except the last, which is closed at 1.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<EceReport> {
    if confidences.len() != correct.len() {
        return Err(Error::Validation(format!(
            "ece: {} confidences vs {} labels",
            confidences.len(),
            correct.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::Validation("ece over empty set".into()));
    }
    if n_bins == 0 {
        return Err(Error::Validation("ece needs at least one bin".into()));
    }
    for &c in confidences {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Validation(format!("confidence {c} outside [0, 1]")));
        }
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let mut b = (c * n_bins as f64).floor() as usize;
        if b == n_bins {
            b = n_bins - 1; // c == 1.0 falls into the closed last bin
        }
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let (mean_conf, acc) = if count[b] > 0 {
            (
                conf_sum[b] / count[b] as f64,
                hits[b] as f64 / count[b] as f64,
            )
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            total += count[b] as f64 / n * (acc - mean_conf).abs();
        }
        bins.push(ReliabilityBin {
            lo: b as f64 / n_bins as f64,
            hi: (b + 1) as f64 / n_bins as f64,
            count: count[b],
            mean_confidence: mean_conf,
            accuracy: acc,
        });
    }
    Ok(EceReport {
        ece: total,
        n: confidences.len(),
        bins,
    })
}

/// Area under the ROC curve via the Mann-Whitney statistic; tied scores
/// contribute one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "auroc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "auroc needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::Validation(format!("auroc score {s} not finite")));
        }
    }
    // average ranks with tie handling
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0; // ranks are 1-based
        for k in i..=j {
            rank[idx[k]] = avg;
        }
        i = j + 1;
    }
    let r_pos: f64 = rank
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = r_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

// ---------------------------------------------------------------------------
// numeric (digit) outcomes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DigitMetrics {
    pub baseline_value: Option<u32>,
    pub intervened_value: Option<u32>,
    /// unparseable intervened output counts as changed
    pub first_digit_changed: bool,
    /// intervened output did not parse as an integer in 0..=100; excluded
    /// from confidence aggregates but counted
    pub unparseable: bool,
    pub confidence_change: Option<f64>,
    /// logit of the baseline first digit minus the mean of the other nine
    pub digit_logit_difference: Option<f64>,
}

fn parse_0_100(s: &str) -> Option<u32> {
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let v: u32 = s.parse().ok()?;
    (v <= 100).then_some(v)
}

/// Outcome metrics for numeric (digit-string) confidence. `digit_logits`
/// holds the ten digit-token logits at the first generated position of the
/// intervened run.
pub fn digit_metrics(
    baseline: &str,
    intervened: &str,
    digit_logits: &[f64],
) -> Result<DigitMetrics> {
    if digit_logits.len() != 10 {
        return Err(Error::Validation(format!(
            "digit_metrics needs 10 digit logits, got {}",
            digit_logits.len()
        )));
    }
    let baseline_value = parse_0_100(baseline);
    let intervened_value = parse_0_100(intervened);
    let unparseable = intervened_value.is_none();
    let first_digit_changed = match (baseline.chars().next(), intervened.chars().next()) {
        (Some(a), Some(b)) if !unparseable && baseline_value.is_some() => a != b,
        _ => true,
    };
    let confidence_change = match (baseline_value, intervened_value) {
        (Some(b), Some(i)) => Some(i as f64 / 100.0 - b as f64 / 100.0),
        _ => None,
    };
    let digit_logit_difference = baseline
        .chars()
        .next()
        .and_then(|c| c.to_digit(10))
        .map(|d| {
            let d = d as usize;
            let sum: f64 = digit_logits.iter().sum();
            digit_logits[d] - (sum - digit_logits[d]) / 9.0
        });
    Ok(DigitMetrics {
        baseline_value,
        intervened_value,
        first_digit_changed,
        unparseable,
        confidence_change,
        digit_logit_difference,
    })
}

// ---------------------------------------------------------------------------
// per-cell report
// ---------------------------------------------------------------------------

/// One trial's outcome within an experiment cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial_id: u64,
    pub baseline_token: u32,
    pub intervened_token: u32,
    pub token_changed: bool,
    pub logit_diff_baseline: f64,
    pub logit_diff_intervened: f64,
    pub confidence_baseline: Option<f64>,
    pub confidence_intervened: Option<f64>,
    /// excluded from confidence aggregates (e.g. unparseable numeric output)
    pub excluded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsAggregate {
    pub n: usize,
    pub n_excluded: usize,
    pub first_token_change_rate: f64,
    pub mean_logit_diff_change: f64,
    pub sem_logit_diff_change: f64,
    pub mean_confidence_change: f64,
    pub sem_confidence_change: f64,
}

/// Per-cell metrics: raw per-trial rows plus their aggregate, tagged with
/// the cell coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub layer: Option<usize>,
    pub role: String,
    pub condition: String,
    pub rows: Vec<TrialRow>,
    pub aggregate: MetricsAggregate,
    pub aborted_trials: usize,
    /// more than 1% of trials aborted
    pub invalid: bool,
    /// patching only: fraction of the clean-corrupt logit-difference gap
    /// restored, computed on cell means
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery: Option<f64>,
    /// patching only: token-level recovery from first-token change rates
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery_token: Option<f64>,
    /// one line per aborted trial: (trial, layer, role) and the cause
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample sd / sqrt(n)); 0 for n < 2.
pub fn sem(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

pub fn aggregate_rows(rows: &[TrialRow]) -> Result<MetricsAggregate> {
    if rows.is_empty() {
        return Err(Error::Validation("aggregate over empty cell".into()));
    }
    let pairs: Vec<(u32, u32)> = rows
        .iter()
        .map(|r| (r.baseline_token, r.intervened_token))
        .collect();
    let logit_changes: Vec<f64> = rows
        .iter()
        .filter(|r| !r.excluded)
        .map(|r| r.logit_diff_intervened - r.logit_diff_baseline)
        .collect();
    let conf_changes: Vec<f64> = rows
        .iter()
        .filter(|r| !r.excluded)
        .filter_map(|r| match (r.confidence_baseline, r.confidence_intervened) {
            (Some(b), Some(i)) => Some(i - b),
            _ => None,
        })
        .collect();
    Ok(MetricsAggregate {
        n: rows.len(),
        n_excluded: rows.iter().filter(|r| r.excluded).count(),
        first_token_change_rate: first_token_change_rate(&pairs)?,
        mean_logit_diff_change: mean(&logit_changes),
        sem_logit_diff_change: sem(&logit_changes),
        mean_confidence_change: mean(&conf_changes),
        sem_confidence_change: sem(&conf_changes),
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn categorical_fixture() -> ConfidenceLexicon {
        let labels = [
            "No chance",
            "Really unlikely",
            "Chances are slight",
            "Unlikely",
            "Less than even",
            "Better than even",
            "Likely",
            "Very good chance",
            "Highly likely",
            "Almost certain",
        ];
        ConfidenceLexicon::new(
            LexiconKind::Categorical,
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| LexiconClass {
                    label: l.to_string(),
                    first_token: 100 + i as u32,
                    lo: i as f64 / 10.0,
                    hi: (i + 1) as f64 / 10.0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn categorical_midpoints() {
        let lex = categorical_fixture();
        // "Highly likely" owns [0.8, 0.9) and reads out as 0.85
        assert_eq!(lex.classes[8].label, "Highly likely");
        assert!((lex.class_to_confidence(8).unwrap() - 0.85).abs() < 1e-12);
        assert!((lex.class_to_confidence(0).unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn numeric_lexicons_scale_values() {
        let digits = |kind| {
            ConfidenceLexicon::new(
                kind,
                (0..10)
                    .map(|i| LexiconClass {
                        label: i.to_string(),
                        first_token: i as u32,
                        lo: i as f64 / 10.0,
                        hi: (i + 1) as f64 / 10.0,
                    })
                    .collect(),
            )
            .unwrap()
        };
        let lex = digits(LexiconKind::Numeric0To100);
        assert!((lex.class_to_confidence(95).unwrap() - 0.95).abs() < 1e-12);
        assert!(lex.class_to_confidence(101).is_err());
        let lex = digits(LexiconKind::Numeric0To9);
        assert!((lex.class_to_confidence(7).unwrap() - 7.0 / 9.0).abs() < 1e-12);
        assert!(lex.class_to_confidence(10).is_err());
    }

    #[test]
    fn lexicon_validation_catches_bad_shapes() {
        let mut lex = categorical_fixture();
        lex.classes.pop();
        assert!(lex.validate().is_err());

        let mut lex = categorical_fixture();
        lex.classes[3].first_token = lex.classes[4].first_token;
        assert!(lex.validate().is_err());

        let mut lex = categorical_fixture();
        lex.classes[5].lo = 0.55; // gap after class 4
        assert!(lex.validate().is_err());
    }

    #[test]
    fn logit_difference_reference() {
        let mut z = vec![1.0; 10];
        z[0] = 5.0;
        assert!((logit_difference(&z, 0).unwrap() - 4.0).abs() < 1e-12);
        // shifting every logit leaves the difference unchanged
        let shifted: Vec<f64> = z.iter().map(|v| v + 13.0).collect();
        assert!((logit_difference(&shifted, 0).unwrap() - 4.0).abs() < 1e-12);
        assert!(logit_difference(&z, 10).is_err());
    }

    #[test]
    fn change_rate_counts_differing_pairs() {
        let pairs = [(1, 1), (2, 3), (4, 4), (5, 6)];
        assert!((first_token_change_rate(&pairs).unwrap() - 0.5).abs() < 1e-12);
        assert!(first_token_change_rate(&[]).is_err());
    }

    #[test]
    fn recovery_reference_values() {
        assert!((recovery(2.0, 0.5, 1.25).unwrap() - 50.0).abs() < 1e-12);
        assert!((recovery(2.0, 0.5, 2.0).unwrap() - 100.0).abs() < 1e-12);
        assert!(matches!(
            recovery(1.0, 1.0, 0.5),
            Err(Error::UndefinedDenominator(_))
        ));
        assert!((recovery_token(0.8, 0.2).unwrap() - 75.0).abs() < 1e-12);
        assert!(matches!(
            recovery_token(0.0, 0.0),
            Err(Error::UndefinedDenominator(_))
        ));
    }

    #[test]
    fn ece_reference_case() {
        // two occupied bins: [0.8, 0.9) holds (0.85, 0.85) acc 0.5 -> gap 0.35
        //                    [0.1, 0.2) holds (0.15,) acc 1.0 -> gap 0.85
        let conf = [0.85, 0.85, 0.15];
        let correct = [true, false, true];
        let report = ece(&conf, &correct, 10).unwrap();
        let expect = 2.0 / 3.0 * 0.35 + 1.0 / 3.0 * 0.85;
        assert!((report.ece - expect).abs() < 1e-12);
        assert_eq!(report.bins.len(), 10);
        assert_eq!(report.bins[8].count, 2);
    }

    #[test]
    fn ece_last_bin_is_closed() {
        let report = ece(&[1.0, 0.999], &[true, true], 10).unwrap();
        assert_eq!(report.bins[9].count, 2);
        assert!(ece(&[1.1], &[true], 10).is_err());
    }

    #[test]
    fn auroc_reference_cases() {
        // perfect separation
        let a = auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(a, 1.0);
        // one discordant pair of four -> 0.75
        let a = auroc(&[0.9, 0.15, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        // ties contribute one half
        let a = auroc(&[0.5, 0.5], &[true, false]).unwrap();
        assert!((a - 0.5).abs() < 1e-12);
        assert!(matches!(
            auroc(&[0.5, 0.6], &[true, true]),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn digit_metrics_cases() {
        let mut logits = [0.0; 10];
        logits[9] = 3.0;
        let m = digit_metrics("95", "95", &logits).unwrap();
        assert!(!m.first_digit_changed && !m.unparseable);
        assert_eq!(m.confidence_change, Some(0.0));
        // baseline first digit 9: its logit 3.0 minus the mean (0) of the rest
        assert!((m.digit_logit_difference.unwrap() - 3.0).abs() < 1e-12);

        let m = digit_metrics("95", "20", &logits).unwrap();
        assert!(m.first_digit_changed);
        assert!((m.confidence_change.unwrap() - (0.20 - 0.95)).abs() < 1e-12);

        let m = digit_metrics("95", "9x", &logits).unwrap();
        assert!(m.unparseable && m.first_digit_changed);
        assert_eq!(m.confidence_change, None);

        // out-of-range value is unparseable
        let m = digit_metrics("95", "480", &logits).unwrap();
        assert!(m.unparseable);
    }

    #[test]
    fn aggregate_excludes_flagged_rows_from_means() {
        let row = |id, changed: bool, excl: bool, dl: f64, dc: f64| TrialRow {
            trial_id: id,
            baseline_token: 1,
            intervened_token: if changed { 2 } else { 1 },
            token_changed: changed,
            logit_diff_baseline: 1.0,
            logit_diff_intervened: 1.0 + dl,
            confidence_baseline: Some(0.5),
            confidence_intervened: Some(0.5 + dc),
            excluded: excl,
        };
        let rows = vec![
            row(0, false, false, 0.2, 0.1),
            row(1, true, false, 0.4, 0.3),
            row(2, true, true, 99.0, 99.0),
        ];
        let agg = aggregate_rows(&rows).unwrap();
        assert_eq!(agg.n, 3);
        assert_eq!(agg.n_excluded, 1);
        assert!((agg.first_token_change_rate - 2.0 / 3.0).abs() < 1e-12);
        assert!((agg.mean_logit_diff_change - 0.3).abs() < 1e-12);
        assert!((agg.mean_confidence_change - 0.2).abs() < 1e-12);
    }
}
