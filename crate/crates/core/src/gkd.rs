//! Generative Knowledge Distillation: relabel candidate targets with a
//! teacher's soft class distributions. Classification only; features are
//! never touched.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{EncodedMatrix, Target};
use crate::error::{BcrError, Result};
use crate::representation::standard_normal;
use crate::samplers::CandidatePool;

const L2_PENALTY: f64 = 1e-4;

/// Multinomial logistic teacher mapping encoded features to the probability
/// simplex over classes.
#[derive(Debug, Clone)]
pub struct Teacher {
    /// C x (D + 1) weights; the last column is the bias.
    pub weights: Array2<f64>,
    pub n_classes: usize,
    pub final_loss: f64,
}

impl Teacher {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols() - 1
    }

    /// Soft-label rows for a feature matrix.
    pub fn predict_proba(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.input_dim() {
            return Err(BcrError::DimMismatch {
                expected: self.input_dim(),
                got: features.ncols(),
            });
        }
        let n = features.nrows();
        let mut out = Array2::zeros((n, self.n_classes));
        for i in 0..n {
            let mut logits = Array1::zeros(self.n_classes);
            for c in 0..self.n_classes {
                let mut z = self.weights[[c, self.input_dim()]];
                for j in 0..self.input_dim() {
                    z += self.weights[[c, j]] * features[[i, j]];
                }
                logits[c] = z;
            }
            softmax_inplace(&mut logits);
            out.row_mut(i).assign(&logits);
        }
        Ok(out)
    }
}

fn softmax_inplace(logits: &mut Array1<f64>) {
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

/// L2-regularized multinomial logistic regression by full-batch gradient
/// descent. Deterministic per seed.
pub fn train_teacher(real: &EncodedMatrix, seed: u64, lr: f64, epochs: usize) -> Result<Teacher> {
    let labels = match &real.target {
        Target::Classes(l) => l.clone(),
        Target::Soft(_) => return Err(BcrError::config("teacher training needs hard labels")),
        Target::Values(_) => {
            return Err(BcrError::config(
                "distillation is undefined for continuous regression targets",
            ))
        }
    };
    let n = real.values.nrows();
    if n == 0 {
        return Err(BcrError::Empty("teacher training set is empty".into()));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let distinct = {
        let mut seen = vec![false; n_classes];
        for &c in &labels {
            seen[c] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(BcrError::config("teacher training needs at least two classes"));
    }
    let d = real.values.ncols();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::from_shape_fn((n_classes, d + 1), |_| 0.01 * standard_normal(&mut rng));
    let mut final_loss = f64::INFINITY;
    for _ in 0..epochs {
        // Forward pass: probabilities and mean cross-entropy.
        let mut grad = Array2::<f64>::zeros((n_classes, d + 1));
        let mut loss = 0.0;
        for i in 0..n {
            let mut logits = Array1::zeros(n_classes);
            for c in 0..n_classes {
                let mut z = w[[c, d]];
                for j in 0..d {
                    z += w[[c, j]] * real.values[[i, j]];
                }
                logits[c] = z;
            }
            softmax_inplace(&mut logits);
            loss -= logits[labels[i]].max(1e-300).ln();
            for c in 0..n_classes {
                let delta = logits[c] - f64::from(u8::from(c == labels[i]));
                for j in 0..d {
                    grad[[c, j]] += delta * real.values[[i, j]];
                }
                grad[[c, d]] += delta;
            }
        }
        let inv_n = 1.0 / n as f64;
        loss *= inv_n;
        for c in 0..n_classes {
            for j in 0..=d {
                let g = grad[[c, j]] * inv_n + 2.0 * L2_PENALTY * w[[c, j]];
                w[[c, j]] -= lr * g;
            }
        }
        loss += L2_PENALTY * w.iter().map(|v| v * v).sum::<f64>();
        final_loss = loss;
    }
    Ok(Teacher { weights: w, n_classes, final_loss })
}

/// Replace pool targets with the teacher's soft labels; features unchanged.
pub fn relabel(pool: &CandidatePool, teacher: &Teacher) -> Result<CandidatePool> {
    let soft = teacher.predict_proba(&pool.features)?;
    Ok(CandidatePool {
        features: pool.features.clone(),
        target: Target::Soft(soft),
        embeddings: pool.embeddings.clone(),
        seed: pool.seed,
        guided: pool.guided,
    })
}
