//! Linear probes over captured residual activations.
//!
//! Ridge regression (closed form via Cholesky) and L2-regularized logistic
//! regression (iteratively reweighted least squares), evaluated with seeded
//! k-fold cross-validation. Features are z-scored with train-fold statistics
//! applied to the held-out fold; regression quality is R^2 against the
//! held-out fold's own mean, classification quality is AUROC of the decision
//! scores. Variance partitioning compares nested feature sets fold by fold.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine;
use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::metrics::auroc;
use crate::model::ModelBundle;

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

/// Feature matrix plus regression targets and optional binary labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Vec<f64>,
    pub labels: Option<Vec<bool>>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Vec<f64>) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} feature rows vs {} targets",
                features.rows(),
                targets.len()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::Validation("empty dataset".into()));
        }
        Ok(Dataset {
            features,
            targets,
            labels: None,
        })
    }

    pub fn with_labels(features: Matrix, labels: Vec<bool>) -> Result<Self> {
        let targets = labels.iter().map(|&l| l as u8 as f64).collect();
        let mut data = Dataset::new(features, targets)?;
        data.labels = Some(labels);
        Ok(data)
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    fn select(&self, idx: &[usize]) -> (Matrix, Vec<f64>) {
        let d = self.features.cols();
        let mut m = Matrix::zeros(idx.len(), d);
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..d {
                m.set(r, c, self.features.get(i, c));
            }
            y.push(self.targets[i]);
        }
        (m, y)
    }
}

// ---------------------------------------------------------------------------
// z-scoring
// ---------------------------------------------------------------------------

/// Per-column standardization statistics fit on a training fold.
#[derive(Debug, Clone)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// columns with zero train-fold variance; they transform to 0
    pub constant: Vec<usize>,
}

impl ZScore {
    pub fn fit(x: &Matrix) -> Result<ZScore> {
        if x.rows() < 2 {
            return Err(Error::Validation("z-score needs at least 2 rows".into()));
        }
        let n = x.rows() as f64;
        let mut mean = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                mean[c] += x.get(r, c);
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut sd = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let d = x.get(r, c) - mean[c];
                sd[c] += d * d;
            }
        }
        let mut constant = Vec::new();
        for (c, s) in sd.iter_mut().enumerate() {
            *s = (*s / (n - 1.0)).sqrt();
            if *s == 0.0 {
                constant.push(c);
            }
        }
        Ok(ZScore { mean, sd, constant })
    }

    /// Apply train-fold statistics; constant columns map to exactly 0.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "z-score fit on {} columns, applied to {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let v = if self.sd[c] == 0.0 {
                    0.0
                } else {
                    (x.get(r, c) - self.mean[c]) / self.sd[c]
                };
                out.set(r, c, v);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// linear algebra: Cholesky solve
// ---------------------------------------------------------------------------

/// Solve the symmetric positive-definite system `a x = b` by Cholesky
/// factorization. A non-positive pivot reports the system as singular.
fn cholesky_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let d = a.rows();
    if a.cols() != d || b.len() != d {
        return Err(Error::Shape(format!(
            "cholesky: {}x{} matrix with rhs of {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if !(diag.is_finite() && diag > 1e-12) {
            return Err(Error::Singularity(format!(
                "normal equations are singular at pivot {j}; add ridge regularization (lambda > 0)"
            )));
        }
        let pivot = diag.sqrt();
        l[j * d + j] = pivot;
        for i in (j + 1)..d {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = v / pivot;
        }
    }
    // forward substitution: L z = b
    let mut z = vec![0.0; d];
    for i in 0..d {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * d + k] * z[k];
        }
        z[i] = v / l[i * d + i];
    }
    // back substitution: L^T x = z
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut v = z[i];
        for k in (i + 1)..d {
            v -= l[k * d + i] * x[k];
        }
        x[i] = v / l[i * d + i];
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// ridge regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.weights.len() {
            return Err(Error::Shape(format!(
                "ridge model has {} weights, input has {} columns",
                self.weights.len(),
                x.cols()
            )));
        }
        Ok((0..x.rows())
            .map(|r| {
                self.intercept
                    + x.row(r)
                        .iter()
                        .zip(&self.weights)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect())
    }
}

/// Ridge regression with an unpenalized intercept: features and target are
/// centered, `(Xc^T Xc + lambda I) w = Xc^T yc` is solved by Cholesky, and
/// the intercept restores the means.
pub fn ridge_fit(x: &Matrix, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    if x.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} rows vs {} targets",
            x.rows(),
            y.len()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::Validation("ridge needs at least 2 rows".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Validation(format!("negative ridge lambda {lambda}")));
    }
    let n = x.rows();
    let d = x.cols();
    let x_mean: Vec<f64> = (0..d)
        .map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64)
        .collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;

    let mut gram = Matrix::zeros(d, d);
    let mut rhs = vec![0.0; d];
    for r in 0..n {
        let yc = y[r] - y_mean;
        for i in 0..d {
            let xi = x.get(r, i) - x_mean[i];
            rhs[i] += xi * yc;
            for j in i..d {
                let xj = x.get(r, j) - x_mean[j];
                let v = gram.get(i, j) + xi * xj;
                gram.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram.set(i, j, gram.get(j, i));
        }
        let v = gram.get(i, i) + lambda;
        gram.set(i, i, v);
    }
    let weights = cholesky_solve(&gram, &rhs)?;
    let intercept = y_mean - x_mean.iter().zip(&weights).map(|(m, w)| m * w).sum::<f64>();
    Ok(RidgeModel {
        weights,
        intercept,
        lambda,
    })
}

// ---------------------------------------------------------------------------
// logistic regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl LogisticModel {
    pub fn decision_scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.weights.len() {
            return Err(Error::Shape(format!(
                "logistic model has {} weights, input has {} columns",
                self.weights.len(),
                x.cols()
            )));
        }
        Ok((0..x.rows())
            .map(|r| {
                self.intercept
                    + x.row(r)
                        .iter()
                        .zip(&self.weights)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect())
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.decision_scores(x)?.into_iter().map(sigmoid).collect())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// L2-regularized logistic regression fit by iteratively reweighted least
/// squares. The intercept is never penalized. Convergence is declared when
/// the infinity norm of the penalized gradient drops below `tol`; exceeding
/// `max_iter` reports the final gradient norm instead of a model.
pub fn logistic_fit(
    x: &Matrix,
    y: &[bool],
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LogisticModel> {
    if x.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} rows vs {} labels",
            x.rows(),
            y.len()
        )));
    }
    let n_pos = y.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(Error::DegenerateLabels(format!(
            "logistic fit needs both classes ({n_pos} of {} positive)",
            y.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::Validation(format!(
            "negative logistic lambda {lambda}"
        )));
    }
    let n = x.rows();
    let d = x.cols();
    let da = d + 1; // augmented with intercept, kept last
    let mut w = vec![0.0; da];
    let mut grad_norm = f64::INFINITY;
    for iter in 0..max_iter {
        // scores, probabilities, gradient
        let mut p = vec![0.0; n];
        for r in 0..n {
            let mut z = w[d];
            for c in 0..d {
                z += x.get(r, c) * w[c];
            }
            p[r] = sigmoid(z);
        }
        let mut grad = vec![0.0; da];
        for r in 0..n {
            let e = p[r] - (y[r] as u8 as f64);
            for c in 0..d {
                grad[c] += x.get(r, c) * e;
            }
            grad[d] += e;
        }
        for c in 0..d {
            grad[c] += lambda * w[c];
        }
        grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm <= tol {
            return Ok(LogisticModel {
                weights: w[..d].to_vec(),
                intercept: w[d],
                lambda,
                iterations: iter,
                gradient_norm: grad_norm,
            });
        }
        // Newton step: (X^T W X + lambda I') delta = grad
        let mut hess = Matrix::zeros(da, da);
        for r in 0..n {
            let wr = (p[r] * (1.0 - p[r])).max(1e-12);
            for i in 0..da {
                let xi = if i < d { x.get(r, i) } else { 1.0 };
                for j in i..da {
                    let xj = if j < d { x.get(r, j) } else { 1.0 };
                    let v = hess.get(i, j) + wr * xi * xj;
                    hess.set(i, j, v);
                }
            }
        }
        for i in 0..da {
            for j in 0..i {
                hess.set(i, j, hess.get(j, i));
            }
        }
        for c in 0..d {
            let v = hess.get(c, c) + lambda;
            hess.set(c, c, v);
        }
        let delta = cholesky_solve(&hess, &grad)?;
        for (wi, di) in w.iter_mut().zip(&delta) {
            *wi -= di;
        }
    }
    Err(Error::Convergence {
        grad_norm,
        iters: max_iter,
    })
}

// ---------------------------------------------------------------------------
// cross-validation
// ---------------------------------------------------------------------------

/// Shuffle `0..n` with a seeded generator and split into `k` nearly equal
/// folds (the first `n % k` folds take one extra item).
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Validation(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::Validation(format!("{n} rows cannot fill {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let len = base + (f < extra) as usize;
        folds.push(idx[at..at + len].to_vec());
        at += len;
    }
    Ok(folds)
}

/// Stratified k-fold: each class is shuffled and chunked separately so every
/// fold keeps both classes. A class with fewer members than folds cannot be
/// stratified and is reported as such.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Validation(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.len() < k || neg.len() < k {
        return Err(Error::Stratification(format!(
            "cannot stratify {} positives and {} negatives into {k} folds",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for class in [&pos, &neg] {
        let base = class.len() / k;
        let extra = class.len() % k;
        let mut at = 0;
        for (f, fold) in folds.iter_mut().enumerate() {
            let len = base + (f < extra) as usize;
            fold.extend_from_slice(&class[at..at + len]);
            at += len;
        }
    }
    Ok(folds)
}

/// R^2 of predictions against the held-out fold's own mean. Negative values
/// are kept: they certify the probe predicts worse than the fold mean.
pub fn r2_score(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::Validation(format!(
            "r2: {} truths vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let m = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - m) * (y - m)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateLabels(
            "held-out fold has a constant target; R^2 undefined".into(),
        ));
    }
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Cross-validated probe quality: per-fold scores plus their mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub fold_scores: Vec<f64>,
    pub mean_score: f64,
    /// feature columns that were constant in at least one training fold
    pub constant_features: Vec<usize>,
}

fn finish(fold_scores: Vec<f64>, mut constant: Vec<usize>) -> ProbeResult {
    constant.sort_unstable();
    constant.dedup();
    let mean_score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
    ProbeResult {
        fold_scores,
        mean_score,
        constant_features: constant,
    }
}

/// Ridge probe under k-fold CV; score is held-out R^2 per fold, averaged.
pub fn cv_r2(data: &Dataset, k: usize, lambda: f64, seed: u64) -> Result<ProbeResult> {
    let folds = kfold(data.n(), k, seed)?;
    let mut scores = Vec::with_capacity(k);
    let mut constant = Vec::new();
    for f in 0..k {
        let test_idx = &folds[f];
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        let (x_train, y_train) = data.select(&train_idx);
        let (x_test, y_test) = data.select(test_idx);
        let stats = ZScore::fit(&x_train)?;
        constant.extend_from_slice(&stats.constant);
        let model = ridge_fit(&stats.apply(&x_train)?, &y_train, lambda)?;
        let pred = model.predict(&stats.apply(&x_test)?)?;
        scores.push(r2_score(&y_test, &pred)?);
    }
    Ok(finish(scores, constant))
}

/// Logistic probe under stratified k-fold CV; score is held-out AUROC of the
/// decision scores per fold, averaged.
pub fn cv_auroc(
    data: &Dataset,
    k: usize,
    lambda: f64,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<ProbeResult> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::Validation("classification probe needs labels".into()))?;
    let folds = stratified_kfold(labels, k, seed)?;
    let mut scores = Vec::with_capacity(k);
    let mut constant = Vec::new();
    for f in 0..k {
        let test_idx = &folds[f];
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        let (x_train, _) = data.select(&train_idx);
        let (x_test, _) = data.select(test_idx);
        let y_train: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
        let y_test: Vec<bool> = test_idx.iter().map(|&i| labels[i]).collect();
        let stats = ZScore::fit(&x_train)?;
        constant.extend_from_slice(&stats.constant);
        let model = logistic_fit(&stats.apply(&x_train)?, &y_train, lambda, max_iter, tol)?;
        let pred = model.decision_scores(&stats.apply(&x_test)?)?;
        scores.push(auroc(&pred, &y_test)?);
    }
    Ok(finish(scores, constant))
}

// ---------------------------------------------------------------------------
// variance partitioning
// ---------------------------------------------------------------------------

/// Unique variance explained by the added features of a combined probe over
/// a baseline probe, per fold and on average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariancePartition {
    pub r2_baseline: f64,
    pub r2_combined: f64,
    pub unique_r2: f64,
    pub fold_unique: Vec<f64>,
}

pub fn variance_partition(
    baseline: &ProbeResult,
    combined: &ProbeResult,
) -> Result<VariancePartition> {
    if baseline.fold_scores.len() != combined.fold_scores.len() {
        return Err(Error::Alignment(format!(
            "variance partition needs matching folds: {} baseline vs {} combined",
            baseline.fold_scores.len(),
            combined.fold_scores.len()
        )));
    }
    let fold_unique: Vec<f64> = combined
        .fold_scores
        .iter()
        .zip(&baseline.fold_scores)
        .map(|(c, b)| c - b)
        .collect();
    Ok(VariancePartition {
        r2_baseline: baseline.mean_score,
        r2_combined: combined.mean_score,
        unique_r2: combined.mean_score - baseline.mean_score,
        fold_unique,
    })
}

// ---------------------------------------------------------------------------
// model-derived probe targets
// ---------------------------------------------------------------------------

/// Mean log-probability the model assigns to the answer tokens, conditioning
/// each on all earlier tokens. The span is half-open over token positions
/// and must start after position 0.
pub fn mean_answer_logprob(
    model: &ModelBundle,
    tokens: &[u32],
    answer_span: Range<usize>,
) -> Result<f64> {
    if answer_span.is_empty() {
        return Err(Error::Validation("empty answer span".into()));
    }
    if answer_span.start == 0 {
        return Err(Error::Validation(
            "answer span starts at position 0; no context to condition on".into(),
        ));
    }
    if answer_span.end > tokens.len() {
        return Err(Error::Validation(format!(
            "answer span {}..{} exceeds {} tokens",
            answer_span.start,
            answer_span.end,
            tokens.len()
        )));
    }
    let logprobs = engine::token_logprobs(model, tokens)?;
    let vals: Vec<f64> = answer_span.map(|p| logprobs[p - 1]).collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

// ---------------------------------------------------------------------------
