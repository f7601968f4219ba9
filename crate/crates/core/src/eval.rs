//! TSTR utility, classification/regression metrics, manifold fidelity and
//! diversity, privacy proxies, and cross-dataset statistical aggregation.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedMatrix, Target, Task};
use crate::error::{BcrError, Result};
use crate::representation::standard_normal;
use crate::samplers::{compute_hyperspheres, manifold_distance};

const PATIENCE: usize = 20;
const MAX_EPOCHS: usize = 500;
const LEARNING_RATE: f64 = 0.2;
const RIDGE_PENALTY: f64 = 1e-3;

/// Downstream learner of the TSTR protocol: multinomial logistic regression
/// (hard or soft targets) for classification, ridge regression for
/// regression. Early stopping consults the validation split only.
#[derive(Debug, Clone)]
pub enum DownstreamLearner {
    Logistic {
        /// C x (D + 1); last column is the bias.
        weights: Array2<f64>,
    },
    Ridge {
        /// D + 1; last entry is the bias.
        weights: Array1<f64>,
    },
}

impl DownstreamLearner {
    /// Class-probability rows; error for the ridge variant.
    pub fn predict_proba(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        match self {
            DownstreamLearner::Logistic { weights } => {
                let d = weights.ncols() - 1;
                if features.ncols() != d {
                    return Err(BcrError::DimMismatch { expected: d, got: features.ncols() });
                }
                let c = weights.nrows();
                let mut out = Array2::zeros((features.nrows(), c));
                for i in 0..features.nrows() {
                    let mut logits: Vec<f64> = (0..c)
                        .map(|k| {
                            let mut z = weights[[k, d]];
                            for j in 0..d {
                                z += weights[[k, j]] * features[[i, j]];
                            }
                            z
                        })
                        .collect();
                    softmax(&mut logits);
                    for (k, &p) in logits.iter().enumerate() {
                        out[[i, k]] = p;
                    }
                }
                Ok(out)
            }
            DownstreamLearner::Ridge { .. } => {
                Err(BcrError::config("ridge learner has no class probabilities"))
            }
        }
    }

    /// Point predictions; error for the logistic variant.
    pub fn predict_values(&self, features: &Array2<f64>) -> Result<Array1<f64>> {
        match self {
            DownstreamLearner::Ridge { weights } => {
                let d = weights.len() - 1;
                if features.ncols() != d {
                    return Err(BcrError::DimMismatch { expected: d, got: features.ncols() });
                }
                Ok(Array1::from_shape_fn(features.nrows(), |i| {
                    let mut v = weights[d];
                    for j in 0..d {
                        v += weights[j] * features[[i, j]];
                    }
                    v
                }))
            }
            DownstreamLearner::Logistic { .. } => {
                Err(BcrError::config("logistic learner has no point predictions"))
            }
        }
    }
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Soft-target matrix view of a classification target.
fn soft_targets(target: &Target, n_classes: usize) -> Result<Array2<f64>> {
    match target {
        Target::Classes(labels) => {
            let mut m = Array2::zeros((labels.len(), n_classes));
            for (i, &c) in labels.iter().enumerate() {
                if c >= n_classes {
                    return Err(BcrError::config(format!("label {c} outside {n_classes} classes")));
                }
                m[[i, c]] = 1.0;
            }
            Ok(m)
        }
        Target::Soft(m) => {
            if m.ncols() != n_classes {
                return Err(BcrError::DimMismatch { expected: n_classes, got: m.ncols() });
            }
            Ok(m.clone())
        }
        Target::Values(_) => Err(BcrError::config("classification learner given value targets")),
    }
}

/// Train the task-appropriate learner on `train`, early-stopping on the
/// cross-entropy / squared-error loss of `val` with patience 20.
pub fn train_downstream(
    train: &EncodedMatrix,
    val: &EncodedMatrix,
    task: Task,
    seed: u64,
) -> Result<DownstreamLearner> {
    if train.n_rows() == 0 || val.n_rows() == 0 {
        return Err(BcrError::Empty("downstream training needs non-empty train and val".into()));
    }
    if train.dim() != val.dim() {
        return Err(BcrError::DimMismatch { expected: train.dim(), got: val.dim() });
    }
    match task {
        Task::Binary | Task::Multiclass(_) => {
            let n_classes = match task {
                Task::Binary => 2,
                Task::Multiclass(k) => k,
                Task::Regression => unreachable!(),
            };
            let t_train = soft_targets(&train.target, n_classes)?;
            let t_val = soft_targets(&val.target, n_classes)?;
            Ok(DownstreamLearner::Logistic {
                weights: fit_logistic(&train.values, &t_train, &val.values, &t_val, seed)?,
            })
        }
        Task::Regression => {
            let y_train = values_of(&train.target)?;
            let y_val = values_of(&val.target)?;
            Ok(DownstreamLearner::Ridge {
                weights: fit_ridge(&train.values, &y_train, &val.values, &y_val)?,
            })
        }
    }
}

fn values_of(target: &Target) -> Result<Array1<f64>> {
    match target {
        Target::Values(v) => Ok(Array1::from_vec(v.clone())),
        _ => Err(BcrError::config("regression learner given class targets")),
    }
}

fn logistic_loss(w: &Array2<f64>, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let c = w.nrows();
    let d = w.ncols() - 1;
    let mut loss = 0.0;
    for i in 0..x.nrows() {
        let mut logits: Vec<f64> = (0..c)
            .map(|k| {
                let mut z = w[[k, d]];
                for j in 0..d {
                    z += w[[k, j]] * x[[i, j]];
                }
                z
            })
            .collect();
        softmax(&mut logits);
        for k in 0..c {
            if t[[i, k]] > 0.0 {
                loss -= t[[i, k]] * logits[k].max(1e-300).ln();
            }
        }
    }
    loss / x.nrows() as f64
}

fn fit_logistic(
    x: &Array2<f64>,
    t: &Array2<f64>,
    xv: &Array2<f64>,
    tv: &Array2<f64>,
    seed: u64,
) -> Result<Array2<f64>> {
    let n = x.nrows();
    let d = x.ncols();
    let c = t.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::from_shape_fn((c, d + 1), |_| 0.01 * standard_normal(&mut rng));
    let mut best_w = w.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..MAX_EPOCHS {
        let mut grad = Array2::<f64>::zeros((c, d + 1));
        for i in 0..n {
            let mut logits: Vec<f64> = (0..c)
                .map(|k| {
                    let mut z = w[[k, d]];
                    for j in 0..d {
                        z += w[[k, j]] * x[[i, j]];
                    }
                    z
                })
                .collect();
            softmax(&mut logits);
            for k in 0..c {
                let delta = logits[k] - t[[i, k]];
                for j in 0..d {
                    grad[[k, j]] += delta * x[[i, j]];
                }
                grad[[k, d]] += delta;
            }
        }
        let inv_n = 1.0 / n as f64;
        for v in w.iter_mut().zip(grad.iter()) {
            *v.0 -= LEARNING_RATE * v.1 * inv_n;
        }
        let val_loss = logistic_loss(&w, xv, tv);
        if val_loss < best_val - 1e-12 {
            best_val = val_loss;
            best_w = w.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= PATIENCE {
                break;
            }
        }
    }
    Ok(best_w)
}

fn ridge_loss(w: &Array1<f64>, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    let d = w.len() - 1;
    let mut loss = 0.0;
    for i in 0..x.nrows() {
        let mut p = w[d];
        for j in 0..d {
            p += w[j] * x[[i, j]];
        }
        let e = p - y[i];
        loss += e * e;
    }
    loss / x.nrows() as f64
}

fn fit_ridge(
    x: &Array2<f64>,
    y: &Array1<f64>,
    xv: &Array2<f64>,
    yv: &Array1<f64>,
) -> Result<Array1<f64>> {
    let n = x.nrows();
    let d = x.ncols();
    let mut w = Array1::zeros(d + 1);
    let mut best_w = w.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..MAX_EPOCHS {
        let mut grad = Array1::<f64>::zeros(d + 1);
        for i in 0..n {
            let mut p = w[d];
            for j in 0..d {
                p += w[j] * x[[i, j]];
            }
            let e = p - y[i];
            for j in 0..d {
                grad[j] += 2.0 * e * x[[i, j]];
            }
            grad[d] += 2.0 * e;
        }
        let inv_n = 1.0 / n as f64;
        for j in 0..=d {
            let reg = if j < d { 2.0 * RIDGE_PENALTY * w[j] } else { 0.0 };
            w[j] -= LEARNING_RATE * (grad[j] * inv_n + reg);
        }
        let val_loss = ridge_loss(&w, xv, yv);
        if val_loss < best_val - 1e-12 {
            best_val = val_loss;
            best_w = w.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= PATIENCE {
                break;
            }
        }
    }
    Ok(best_w)
}

/// Rank-statistic AUROC with midrank tie handling.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(BcrError::config("auroc needs aligned non-empty inputs"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(BcrError::config("auroc needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Support-weighted one-vs-rest mean AUROC over class-probability columns.
pub fn weighted_auroc(probabilities: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if probabilities.nrows() != labels.len() || labels.is_empty() {
        return Err(BcrError::config("weighted_auroc needs aligned non-empty inputs"));
    }
    let c = probabilities.ncols();
    let mut total = 0.0;
    let mut weight = 0.0;
    for k in 0..c {
        let support = labels.iter().filter(|&&l| l == k).count();
        if support == 0 || support == labels.len() {
            continue;
        }
        let scores: Vec<f64> = probabilities.column(k).to_vec();
        let ovr: Vec<usize> = labels.iter().map(|&l| usize::from(l == k)).collect();
        total += support as f64 * auroc(&scores, &ovr)?;
        weight += support as f64;
    }
    if weight == 0.0 {
        return Err(BcrError::config("weighted_auroc needs at least two classes present"));
    }
    Ok(total / weight)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(BcrError::config("rmse needs aligned non-empty inputs"));
    }
    let mse: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(mse.sqrt())
}

/// F1 of the positive class (label 1).
pub fn f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    f1_of_class(preds, labels, 1)
}

fn f1_of_class(preds: &[usize], labels: &[usize], class: usize) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(BcrError::config("f1 needs aligned non-empty inputs"));
    }
    let tp = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == class && l == class)
        .count() as f64;
    let fp = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == class && l != class)
        .count() as f64;
    let fn_ = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p != class && l == class)
        .count() as f64;
    let denom = 2.0 * tp + fp + fn_;
    Ok(if denom == 0.0 { 0.0 } else { 2.0 * tp / denom })
}

/// Unweighted mean of per-class F1 over classes present in the labels.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(BcrError::config("macro_f1 needs aligned non-empty inputs"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..n_classes {
        if labels.iter().any(|&l| l == c) {
            total += f1_of_class(preds, labels, c)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Headline TSTR utility: train on `syn`, early-stop on real `val`, score on
/// real `test`. Binary: AUROC; multiclass: weighted AUROC; regression: RMSE.
pub fn tstr(
    syn: &EncodedMatrix,
    val: &EncodedMatrix,
    test: &EncodedMatrix,
    task: Task,
    seed: u64,
) -> Result<f64> {
    let learner = train_downstream(syn, val, task, seed)?;
    score_learner(&learner, test, task)
}

/// The task-appropriate psi of a trained learner on a labeled set.
pub fn score_learner(
    learner: &DownstreamLearner,
    test: &EncodedMatrix,
    task: Task,
) -> Result<f64> {
    match task {
        Task::Binary => {
            let proba = learner.predict_proba(&test.values)?;
            let scores: Vec<f64> = proba.column(1).to_vec();
            let labels = hard_labels(&test.target)?;
            auroc(&scores, &labels)
        }
        Task::Multiclass(_) => {
            let proba = learner.predict_proba(&test.values)?;
            let labels = hard_labels(&test.target)?;
            weighted_auroc(&proba, &labels)
        }
        Task::Regression => {
            let preds = learner.predict_values(&test.values)?;
            let targets = values_of(&test.target)?;
            rmse(preds.as_slice().unwrap(), targets.as_slice().unwrap())
        }
    }
}

fn hard_labels(target: &Target) -> Result<Vec<usize>> {
    match target {
        Target::Classes(l) => Ok(l.clone()),
        Target::Soft(m) => Ok((0..m.nrows())
            .map(|i| crate::data::argmax_row(&m.row(i).to_vec()))
            .collect()),
        Target::Values(_) => Err(BcrError::config("classification metric given value targets")),
    }
}

/// Sign-corrected relative change in percent; positive = better.
pub fn delta_percent(m: f64, r: f64, task: Task) -> Result<f64> {
    if r == 0.0 {
        return Err(BcrError::config("baseline psi is zero"));
    }
    Ok(match task {
        Task::Regression => 100.0 * (r - m) / r,
        _ => 100.0 * (m - r) / r,
    })
}

/// Manifold fidelity (precision) and diversity (recall) via k-NN
/// hyperspheres: precision = share of syn points inside some real sphere,
/// recall = share of real points inside some syn sphere.
pub fn manifold_precision_recall(
    syn: &Array2<f64>,
    real: &Array2<f64>,
    k: usize,
) -> Result<(f64, f64)> {
    if real.nrows() <= k || syn.nrows() <= k {
        return Err(BcrError::config(format!(
            "k = {k} must be below both set sizes ({}, {})",
            syn.nrows(),
            real.nrows()
        )));
    }
    let real_radii = compute_hyperspheres(real, k)?;
    let precision = (0..syn.nrows())
        .filter(|&i| manifold_distance(syn.row(i), real, &real_radii) == 0.0)
        .count() as f64
        / syn.nrows() as f64;
    let syn_radii = compute_hyperspheres(syn, k)?;
    let recall = (0..real.nrows())
        .filter(|&i| manifold_distance(real.row(i), syn, &syn_radii) == 0.0)
        .count() as f64
        / real.nrows() as f64;
    Ok((precision, recall))
}

fn row_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Share of syn rows whose closest record lies in `train` rather than
/// `holdout` (ties count toward holdout). The larger side is subsampled to
/// match the smaller, seeded.
pub fn dcr1_share(
    syn: &Array2<f64>,
    train: &Array2<f64>,
    holdout: &Array2<f64>,
    seed: u64,
) -> Result<f64> {
    if syn.nrows() == 0 || train.nrows() == 0 || holdout.nrows() == 0 {
        return Err(BcrError::Empty("dcr1_share needs non-empty inputs".into()));
    }
    let m = train.nrows().min(holdout.nrows());
    let sub = |set: &Array2<f64>| -> Array2<f64> {
        if set.nrows() == m {
            return set.clone();
        }
        let mut idx: Vec<usize> = (0..set.nrows()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xdc21));
        idx.truncate(m);
        idx.sort_unstable();
        let mut out = Array2::zeros((m, set.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).assign(&set.row(i));
        }
        out
    };
    let train = sub(train);
    let holdout = sub(holdout);
    let mut wins = 0usize;
    for row in syn.rows() {
        let d_train = (0..m)
            .map(|i| row_distance(row, train.row(i)))
            .fold(f64::INFINITY, f64::min);
        let d_holdout = (0..m)
            .map(|i| row_distance(row, holdout.row(i)))
            .fold(f64::INFINITY, f64::min);
        if d_train < d_holdout {
            wins += 1;
        }
    }
    Ok(wins as f64 / syn.nrows() as f64)
}

/// Mean over syn of (distance to 1st nearest real) / (distance to 2nd
/// nearest real); in [0, 1], higher = more novel.
pub fn nndr(syn: &Array2<f64>, real: &Array2<f64>) -> Result<f64> {
    if syn.nrows() == 0 {
        return Err(BcrError::Empty("nndr needs non-empty syn".into()));
    }
    if real.nrows() < 2 {
        return Err(BcrError::config("nndr needs at least two real rows"));
    }
    let mut total = 0.0;
    for row in syn.rows() {
        let mut d1 = f64::INFINITY;
        let mut d2 = f64::INFINITY;
        for r in real.rows() {
            let d = row_distance(row, r);
            if d < d1 {
                d2 = d1;
                d1 = d;
            } else if d < d2 {
                d2 = d;
            }
        }
        total += if d2 == 0.0 { 0.0 } else { d1 / d2 };
    }
    Ok(total / syn.nrows() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub psi: f64,
    pub f1: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub dcr1_share: f64,
    pub nndr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaReport {
    pub median: f64,
    pub mean: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub wilcoxon_p: f64,
    pub wins: usize,
    pub n: usize,
}

fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// One-sided (greater) Wilcoxon signed-rank p-value. Exact enumeration over
/// sign assignments for n <= 25 via rank-sum counting; normal approximation
/// with midrank tie correction above. Zero differences are dropped; an
/// all-zero vector yields p = 1 by convention.
pub fn wilcoxon_signed_rank(deltas: &[f64]) -> f64 {
    let nonzero: Vec<f64> = deltas.iter().cloned().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return 1.0;
    }
    // Midranks of |d|, doubled so they are integers even with ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| nonzero[a].abs().partial_cmp(&nonzero[b].abs()).unwrap());
    let mut double_ranks = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nonzero[order[j + 1]].abs() == nonzero[order[i]].abs() {
            j += 1;
        }
        let dr = (i + j) as u64 + 2; // 2 * midrank
        for &k in &order[i..=j] {
            double_ranks[k] = dr;
        }
        i = j + 1;
    }
    let w_plus: u64 = (0..n)
        .filter(|&k| nonzero[k] > 0.0)
        .map(|k| double_ranks[k])
        .sum();

    if n <= 25 {
        // Count sign assignments by achievable doubled rank-sum.
        let max_sum: usize = double_ranks.iter().sum::<u64>() as usize;
        let mut counts = vec![0f64; max_sum + 1];
        counts[0] = 1.0;
        for &dr in &double_ranks {
            let dr = dr as usize;
            for s in (dr..=max_sum).rev() {
                counts[s] += counts[s - dr];
            }
        }
        let total: f64 = 2f64.powi(n as i32);
        let ge: f64 = counts[w_plus as usize..].iter().sum();
        ge / total
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // Variance with tie correction: ranks here are doubled, so convert.
        let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
        let mut i = 0;
        let mut sorted_dr = double_ranks.clone();
        sorted_dr.sort_unstable();
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted_dr[j + 1] == sorted_dr[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            var -= (t * t * t - t) / 48.0;
            i = j + 1;
        }
        let w = w_plus as f64 / 2.0;
        let z = (w - mean - 0.5) / var.sqrt();
        1.0 - normal_cdf(z)
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Abramowitz-Stegun 7.1.26, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Aggregate per-dataset deltas: median and mean, percentile bootstrap 95%
/// CI of the median, one-sided exact Wilcoxon signed-rank p, win count.
pub fn aggregate(deltas: &[f64], n_boot: usize, seed: u64) -> Result<DeltaReport> {
    if deltas.is_empty() {
        return Err(BcrError::Empty("aggregate needs at least one delta".into()));
    }
    let mut sorted = deltas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = median_of(&sorted);
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boot_medians = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut sample: Vec<f64> = (0..deltas.len())
            .map(|_| deltas[rng.gen_range(0..deltas.len())])
            .collect();
        sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
        boot_medians.push(median_of(&sample));
    }
    boot_medians.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| -> f64 {
        let pos = q * (boot_medians.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        boot_medians[lo] * (1.0 - frac) + boot_medians[hi] * frac
    };
    let (ci_lower, ci_upper) = if n_boot == 0 {
        (median, median)
    } else {
        (pct(0.025), pct(0.975))
    };

    Ok(DeltaReport {
        median,
        mean,
        ci_lower,
        ci_upper,
        wilcoxon_p: wilcoxon_signed_rank(deltas),
        wins: deltas.iter().filter(|&&d| d > 0.0).count(),
        n: deltas.len(),
    })
}
