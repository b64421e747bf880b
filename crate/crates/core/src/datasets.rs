//! Synthetic datasets with known ground-truth factors.
//!
//! * A four-component isotropic Gaussian mixture in R².
//! * A linear-generative "factor" dataset: a class (one of ten) plus an RGB style
//!   triple, mixed into a higher-dimensional observation
//!   `x = A·onehot(class) + B·(r, g, b) + σ·η`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{index, normal, normal_tensor, seeded, uniform, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_MEANS: [[f64; 2]; 4] = [[3.0, 3.0], [-3.0, 3.0], [-3.0, -3.0], [3.0, -3.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub means: Vec<[f64; 2]>,
    /// Σ = cov_scale · I for every component.
    pub cov_scale: f64,
    pub n_samples: usize,
}

impl Default for GaussianMixtureSpec {
    fn default() -> Self {
        GaussianMixtureSpec {
            means: DEFAULT_MEANS.to_vec(),
            cov_scale: 0.5,
            n_samples: 8192,
        }
    }
}

impl GaussianMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be positive"));
        }
        if self.means.len() < 2 {
            return Err(Error::config("means", "need at least two components"));
        }
        if !(self.cov_scale >= 0.0) {
            return Err(Error::config("cov_scale", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSample {
    pub x: [f64; 2],
    pub class: usize,
    /// Distance from `x` to the mean of its component.
    pub d: f64,
}

pub fn sample_gaussian_mixture(spec: &GaussianMixtureSpec, rng: &mut Rng) -> Result<Vec<GaussianSample>> {
    spec.validate()?;
    let std = spec.cov_scale.sqrt();
    Ok((0..spec.n_samples)
        .map(|_| {
            let class = index(spec.means.len(), rng);
            let m = spec.means[class];
            let dx = [std * normal(rng), std * normal(rng)];
            let x = [m[0] + dx[0], m[1] + dx[1]];
            let d = ((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2)).sqrt();
            GaussianSample { x, class, d }
        })
        .collect())
}

pub fn write_gaussian_csv<W: Write>(out: W, samples: &[GaussianSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x0", "x1", "class", "d"])?;
    for s in samples {
        w.write_record([
            s.x[0].to_string(),
            s.x[1].to_string(),
            s.class.to_string(),
            s.d.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorDatasetSpec {
    pub n_samples: usize,
    pub n_classes: usize,
    pub rgb_low: f64,
    pub rgb_high: f64,
    pub observation_dim: usize,
    pub mixing_seed: u64,
    pub noise: f64,
}

impl Default for FactorDatasetSpec {
    fn default() -> Self {
        FactorDatasetSpec {
            n_samples: 10_000,
            n_classes: 10,
            rgb_low: 0.05,
            rgb_high: 0.95,
            observation_dim: 32,
            mixing_seed: 7,
            noise: 0.05,
        }
    }
}

impl FactorDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least two classes"));
        }
        if self.observation_dim < self.n_classes + 3 {
            return Err(Error::config(
                "observation_dim",
                format!(
                    "{} is too small: the mixing matrix needs {} independent columns",
                    self.observation_dim,
                    self.n_classes + 3
                ),
            ));
        }
        if !(self.rgb_low < self.rgb_high) {
            return Err(Error::config("rgb_low", "must be below rgb_high"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise", "must be non-negative"));
        }
        Ok(())
    }
}

/// Fixed mixing matrices `A: [obs, n_classes]` and `B: [obs, 3]`, unit-norm columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMixing {
    pub class_mix: Tensor,
    pub style_mix: Tensor,
}

impl FactorMixing {
    pub fn from_spec(spec: &FactorDatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(spec.mixing_seed);
        let class_mix = column_normalized(normal_tensor(&[spec.observation_dim, spec.n_classes], &mut rng));
        let style_mix = column_normalized(normal_tensor(&[spec.observation_dim, 3], &mut rng));
        Ok(FactorMixing { class_mix, style_mix })
    }

    pub fn observation_dim(&self) -> usize {
        self.class_mix.rows()
    }

    /// Noise-free observation for the given factors.
    pub fn mix(&self, class: usize, rgb: [f64; 3]) -> Vec<f64> {
        let dim = self.observation_dim();
        (0..dim)
            .map(|i| {
                self.class_mix.get(i, class)
                    + (0..3).map(|c| self.style_mix.get(i, c) * rgb[c]).sum::<f64>()
            })
            .collect()
    }

    /// Column `class` of `A`.
    pub fn class_column(&self, class: usize) -> Vec<f64> {
        (0..self.observation_dim()).map(|i| self.class_mix.get(i, class)).collect()
    }
}

fn column_normalized(mut m: Tensor) -> Tensor {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        let norm = (0..rows).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt();
        for i in 0..rows {
            m.data_mut()[i * cols + j] /= norm;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorSample {
    pub x: Vec<f64>,
    pub class: usize,
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl FactorSample {
    pub fn rgb(&self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }
}

pub fn sample_factor_dataset(spec: &FactorDatasetSpec, rng: &mut Rng) -> Result<Vec<FactorSample>> {
    let mixing = FactorMixing::from_spec(spec)?;
    Ok(sample_factors_with(&mixing, spec, spec.n_samples, spec.noise, rng))
}

/// Draws `n` samples through an existing mixing with an explicit noise level.
pub fn sample_factors_with(
    mixing: &FactorMixing,
    spec: &FactorDatasetSpec,
    n: usize,
    noise: f64,
    rng: &mut Rng,
) -> Vec<FactorSample> {
    (0..n)
        .map(|_| {
            let class = index(spec.n_classes, rng);
            let r = uniform(spec.rgb_low, spec.rgb_high, rng);
            let g = uniform(spec.rgb_low, spec.rgb_high, rng);
            let b = uniform(spec.rgb_low, spec.rgb_high, rng);
            let mut x = mixing.mix(class, [r, g, b]);
            if noise > 0.0 {
                for v in &mut x {
                    *v += noise * normal(rng);
                }
            }
            FactorSample { x, class, r, g, b }
        })
        .collect()
}

pub fn write_factor_csv<W: Write>(out: W, samples: &[FactorSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.extend(["class", "r", "g", "b"].map(String::from));
    w.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = s.x.iter().map(f64::to_string).collect();
        rec.push(s.class.to_string());
        rec.extend([s.r, s.g, s.b].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Observations of `samples` as a `[n, dim]` matrix.
pub fn factor_matrix(samples: &[FactorSample]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
    Tensor::from_rows(&rows)
}

/// Shuffled split of `0..n` into (train, test) with `train_frac` going to train.
pub fn split_indices(n: usize, train_frac: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let perm = crate::rng::permutation(n, rng);
    let n_train = ((n as f64) * train_frac).round() as usize;
    let (a, b) = perm.split_at(n_train.min(n));
    (a.to_vec(), b.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn class_stats(samples: &[GaussianSample], class: usize) -> ([f64; 2], [[f64; 2]; 2], usize) {
        let pts: Vec<[f64; 2]> = samples.iter().filter(|s| s.class == class).map(|s| s.x).collect();
        let n = pts.len() as f64;
        let mean = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
        let mut cov = [[0.0; 2]; 2];
        for p in &pts {
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        (mean, cov, pts.len())
    }

    #[test]
    fn gaussian_mixture_moments() {
        let spec = GaussianMixtureSpec {
            n_samples: 4000,
            ..Default::default()
        };
        let samples = sample_gaussian_mixture(&spec, &mut seeded(1)).unwrap();
        for (c, expected) in DEFAULT_MEANS.iter().enumerate() {
            let (mean, cov, n_c) = class_stats(&samples, c);
            let tol = 3.0 * (0.5 / n_c as f64).sqrt();
            for k in 0..2 {
                assert!((mean[k] - expected[k]).abs() < 0.1, "class {c} mean {mean:?}");
                assert!((mean[k] - expected[k]).abs() < tol);
            }
            // Sample-covariance oracle: within 15% of 0.5·I, entrywise.
            for i in 0..2 {
                for j in 0..2 {
                    let target = if i == j { 0.5 } else { 0.0 };
                    assert!((cov[i][j] - target).abs() <= 0.15 * 0.5, "class {c} cov {cov:?}");
                }
            }
        }
    }

    #[test]
    fn distances_are_exact() {
        let samples = sample_gaussian_mixture(&GaussianMixtureSpec::default(), &mut seeded(2)).unwrap();
        for s in samples.iter().take(100) {
            let m = DEFAULT_MEANS[s.class];
            assert_eq!(s.d, ((s.x[0] - m[0]).powi(2) + (s.x[1] - m[1]).powi(2)).sqrt());
        }
    }

    #[test]
    fn zero_covariance_collapses_to_means() {
        let spec = GaussianMixtureSpec {
            cov_scale: 0.0,
            n_samples: 50,
            ..Default::default()
        };
        for s in sample_gaussian_mixture(&spec, &mut seeded(3)).unwrap() {
            assert_eq!(s.x, DEFAULT_MEANS[s.class]);
            assert_eq!(s.d, 0.0);
        }
    }

    #[test]
    fn factor_dataset_rejects_small_observation_dim() {
        let spec = FactorDatasetSpec {
            observation_dim: 12,
            ..Default::default()
        };
        assert!(sample_factor_dataset(&spec, &mut seeded(0)).is_err());
    }

    #[test]
    fn noise_free_factors_are_linearly_recoverable() {
        let spec = FactorDatasetSpec {
            n_samples: 200,
            noise: 0.0,
            ..Default::default()
        };
        let mixing = FactorMixing::from_spec(&spec).unwrap();
        let samples = sample_factor_dataset(&spec, &mut seeded(4)).unwrap();
        let d = spec.observation_dim;
        let k = spec.n_classes + 3;
        let mut m = DMatrix::<f64>::zeros(d, k);
        for i in 0..d {
            for j in 0..spec.n_classes {
                m[(i, j)] = mixing.class_mix.get(i, j);
            }
            for j in 0..3 {
                m[(i, spec.n_classes + j)] = mixing.style_mix.get(i, j);
            }
        }
        let svd = m.clone().svd(true, true);
        for s in &samples {
            let x = DVector::from_column_slice(&s.x);
            let f = svd.solve(&x, 1e-12).unwrap();
            for j in 0..spec.n_classes {
                let expect = if j == s.class { 1.0 } else { 0.0 };
                assert!((f[j] - expect).abs() < 1e-8);
            }
            for (j, v) in s.rgb().iter().enumerate() {
                assert!((f[spec.n_classes + j] - v).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn factor_marginals_and_independence() {
        let spec = FactorDatasetSpec::default();
        let samples = sample_factor_dataset(&spec, &mut seeded(5)).unwrap();
        let n = samples.len() as f64;
        let mean_r = samples.iter().map(|s| s.r).sum::<f64>() / n;
        assert!((mean_r - 0.5).abs() < 0.02, "mean r = {mean_r}");
        assert!(samples.iter().all(|s| s.rgb().iter().all(|&v| (0.05..=0.95).contains(&v))));

        let class: Vec<f64> = samples.iter().map(|s| s.class as f64).collect();
        for pick in [|s: &FactorSample| s.r, |s: &FactorSample| s.g, |s: &FactorSample| s.b] {
            let v: Vec<f64> = samples.iter().map(pick).collect();
            assert!(correlation(&v, &class).abs() < 0.05);
        }
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = FactorDatasetSpec {
            n_samples: 64,
            ..Default::default()
        };
        let a = sample_factor_dataset(&spec, &mut seeded(9)).unwrap();
        let b = sample_factor_dataset(&spec, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_headers() {
        let g = sample_gaussian_mixture(
            &GaussianMixtureSpec {
                n_samples: 2,
                ..Default::default()
            },
            &mut seeded(0),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_gaussian_csv(&mut buf, &g).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("x0,x1,class,d\n"));

        let spec = FactorDatasetSpec {
            n_samples: 2,
            observation_dim: 13,
            ..Default::default()
        };
        let f = sample_factor_dataset(&spec, &mut seeded(0)).unwrap();
        let mut buf = Vec::new();
        write_factor_csv(&mut buf, &f).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x0,x1,x2,x3,x4,x5,x6,x7,x8,x9,x10,x11,x12,class,r,g,b\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
