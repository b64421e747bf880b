//! Multinomial logistic regression on whitened features, used to score how much
//! class structure a set of latents carries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{permutation, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Fraction of samples used for fitting in [`class_structure_score`].
    pub train_frac: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            iterations: 400,
            learning_rate: 1.0,
            l2: 1e-4,
            train_frac: 0.7,
        }
    }
}

/// Softmax classifier over `L⁻¹(x − μ)`, with `L` the Cholesky factor of the
/// training covariance. Whitening makes the fit equivariant under invertible affine
/// maps of the inputs.
#[derive(Clone, Debug)]
pub struct SoftmaxClassifier {
    mean: DVector<f64>,
    whiten: DMatrix<f64>,
    /// `[d + 1, classes]`, last row is the bias.
    weights: DMatrix<f64>,
}

impl SoftmaxClassifier {
    pub fn fit(x: &Tensor, labels: &[usize], n_classes: usize, config: &LogisticConfig) -> Result<Self> {
        let (n, d) = x.as_matrix("fit_softmax")?;
        if labels.len() != n {
            return Err(Error::invalid(format!("{n} samples but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        let xm = DMatrix::from_row_slice(n, d, x.data());
        let mean = DVector::from_iterator(d, xm.column_iter().map(|c| c.mean()));
        let centered = DMatrix::from_fn(n, d, |i, j| xm[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / n as f64;
        let scale = (0..d).map(|j| cov[(j, j)]).fold(0.0, f64::max).max(1e-300);
        for j in 0..d {
            cov[(j, j)] += 1e-10 * scale;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::invalid("classifier: feature covariance is not positive definite"))?;
        let whiten = chol
            .l()
            .try_inverse()
            .ok_or_else(|| Error::invalid("classifier: whitening matrix is singular"))?;

        let feats = design(&centered, &whiten);
        let mut onehot = DMatrix::zeros(n, n_classes);
        for (i, &l) in labels.iter().enumerate() {
            onehot[(i, l)] = 1.0;
        }
        let mut weights = DMatrix::zeros(d + 1, n_classes);
        for _ in 0..config.iterations {
            let probs = softmax_rows(&(&feats * &weights));
            let mut grad = feats.transpose() * (probs - &onehot) / n as f64;
            for r in 0..d {
                for c in 0..n_classes {
                    grad[(r, c)] += config.l2 * weights[(r, c)];
                }
            }
            weights -= grad * config.learning_rate;
        }
        Ok(SoftmaxClassifier { mean, whiten, weights })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (n, d) = x.as_matrix("predict_softmax")?;
        if d != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "predict_softmax",
                lhs: x.shape().to_vec(),
                rhs: vec![n, self.mean.len()],
            });
        }
        let centered = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - self.mean[j]);
        let logits = design(&centered, &self.whiten) * &self.weights;
        Ok(logits.row_iter().map(|r| r.transpose().argmax().0).collect())
    }
}

fn design(centered: &DMatrix<f64>, whiten: &DMatrix<f64>) -> DMatrix<f64> {
    let w = centered * whiten.transpose();
    let (n, d) = w.shape();
    let mut out = DMatrix::from_element(n, d + 1, 1.0);
    out.view_mut((0, 0), (n, d)).copy_from(&w);
    out
}

fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Held-out accuracy of a linear classifier predicting `labels` from `latents`.
pub fn class_structure_score(latents: &Tensor, labels: &[usize], config: &LogisticConfig, rng: &mut Rng) -> Result<f64> {
    let n = latents.rows();
    if labels.len() != n {
        return Err(Error::invalid(format!("{n} latents but {} labels", labels.len())));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; n_classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::invalid("class structure score needs at least two classes"));
    }
    let perm = permutation(n, rng);
    let n_train = ((n as f64) * config.train_frac).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid("class structure score: split leaves an empty side"));
    }
    let (train, test) = perm.split_at(n_train);
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let clf = SoftmaxClassifier::fit(&latents.select_rows(train)?, &ytr, n_classes, config)?;
    Ok(accuracy(&clf.predict(&latents.select_rows(test)?)?, &yte))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded};

    fn clusters(n: usize, spread: f64, rng: &mut Rng) -> (Tensor, Vec<usize>) {
        let centers = [[4.0, 4.0], [-4.0, 4.0], [-4.0, -4.0], [4.0, -4.0]];
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 4;
            data.push(centers[c][0] + spread * normal(rng));
            data.push(centers[c][1] + spread * normal(rng));
            labels.push(c);
        }
        (Tensor::matrix(n, 2, data).unwrap(), labels)
    }

    #[test]
    fn separable_clusters_score_high() {
        let mut rng = seeded(1);
        let (x, y) = clusters(800, 0.5, &mut rng);
        let acc = class_structure_score(&x, &y, &LogisticConfig::default(), &mut rng).unwrap();
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let mut rng = seeded(2);
        let (x, mut y) = clusters(2000, 0.5, &mut rng);
        let perm = permutation(y.len(), &mut rng);
        y = perm.iter().map(|&i| y[i]).collect();
        let acc = class_structure_score(&x, &y, &LogisticConfig::default(), &mut rng).unwrap();
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Tensor::zeros(&[10, 2]);
        assert!(class_structure_score(&x, &[0; 10], &LogisticConfig::default(), &mut seeded(0)).is_err());
    }

    #[test]
    fn invariant_under_affine_maps() {
        let mut rng = seeded(3);
        let (x, y) = clusters(1200, 2.5, &mut rng);
        let base = class_structure_score(&x, &y, &LogisticConfig::default(), &mut seeded(4)).unwrap();
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let mapped: Vec<f64> = (0..x.rows())
            .flat_map(|i| {
                let (a, b) = (x.get(i, 0), x.get(i, 1));
                [3.0 * (c * a - s * b) + 10.0, 0.2 * (s * a + c * b) - 4.0]
            })
            .collect();
        let xm = Tensor::matrix(x.rows(), 2, mapped).unwrap();
        let moved = class_structure_score(&xm, &y, &LogisticConfig::default(), &mut seeded(4)).unwrap();
        assert!((base - moved).abs() <= 0.02, "{base} vs {moved}");
    }
}
