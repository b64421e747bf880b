//! Closed-form ridge probes and R² along a flow trajectory.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::Trajectory;
use crate::rng::{permutation, Rng};
use crate::tensor::Tensor;

/// Which inputs the linear model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMap {
    /// The latent coordinates.
    Linear,
    /// Coordinates plus every product `z_i · z_j` with `i ≤ j`.
    Quadratic,
}

impl FeatureMap {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            FeatureMap::Linear => x.clone(),
            FeatureMap::Quadratic => {
                let (n, d) = (x.rows(), x.cols());
                let width = d + d * (d + 1) / 2;
                let mut out = Vec::with_capacity(n * width);
                for i in 0..n {
                    let r = x.row(i);
                    out.extend_from_slice(r);
                    for a in 0..d {
                        for b in a..d {
                            out.push(r[a] * r[b]);
                        }
                    }
                }
                Tensor::matrix(n, width, out).unwrap()
            }
        }
    }
}

/// `y ≈ (x − x̄)·w + ȳ`, fitted with an unpenalized intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
}

impl RidgeModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.y_mean
            + x.iter()
                .zip(&self.x_mean)
                .zip(&self.weights)
                .map(|((v, m), w)| (v - m) * w)
                .sum::<f64>()
    }

    pub fn predict(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

/// Solves `(XᶜᵀXᶜ/n + λI) w = Xᶜᵀyᶜ/n` on centered data.
pub fn fit_ridge(x: &Tensor, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    let (n, d) = x.as_matrix("fit_ridge")?;
    if y.len() != n {
        return Err(Error::invalid(format!("fit_ridge: {n} rows but {} targets", y.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("fit_ridge: λ must be non-negative"));
    }
    let nf = n as f64;
    let x_mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / nf).collect();
    let y_mean = y.iter().sum::<f64>() / nf;
    let xc = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - x_mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut gram = xc.transpose() * &xc / nf;
    for j in 0..d {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc / nf;
    let chol = gram.cholesky().ok_or_else(|| {
        Error::invalid("degenerate design matrix: the normal equations are singular, use a nonzero ridge λ")
    })?;
    let w = chol.solve(&rhs);
    if lambda == 0.0 {
        // Cholesky can succeed on numerically rank-deficient Gram matrices.
        let diag_max = (0..d).map(|j| chol.l()[(j, j)]).fold(0.0, f64::max);
        let diag_min = (0..d).map(|j| chol.l()[(j, j)]).fold(f64::INFINITY, f64::min);
        if diag_min <= 1e-8 * diag_max {
            return Err(Error::invalid(
                "degenerate design matrix: features are collinear, use a nonzero ridge λ",
            ));
        }
    }
    Ok(RidgeModel {
        weights: w.iter().copied().collect(),
        x_mean,
        y_mean,
    })
}

/// Coefficient of determination against the mean of `y_true`.
pub fn r2_score(y_true: &[f64], y_pred: &[f64]) -> f64 {
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Conditional,
    Unconditional,
}

impl FlowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowKind::Conditional => "conditional",
            FlowKind::Unconditional => "unconditional",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub n_train: usize,
    pub n_repeats: usize,
    pub lambda: f64,
    pub features: FeatureMap,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_train: 512,
            n_repeats: 5,
            lambda: 1e-6,
            features: FeatureMap::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTarget {
    pub name: String,
    pub values: Vec<f64>,
}

impl ProbeTarget {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        ProbeTarget {
            name: name.into(),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub target: String,
    pub r2_mean: Vec<f64>,
    pub r2_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub flow_kind: FlowKind,
    pub times: Vec<f64>,
    pub curves: Vec<ProbeCurve>,
}

impl ProbeReport {
    pub fn curve(&self, target: &str) -> Option<&ProbeCurve> {
        self.curves.iter().find(|c| c.target == target)
    }

    /// Mean R² of `target` at grid time `t`.
    pub fn r2_at(&self, target: &str, t: f64) -> Option<f64> {
        let i = self.times.iter().position(|&ti| (ti - t).abs() < 1e-9)?;
        self.curve(target).map(|c| c.r2_mean[i])
    }

    /// `t,target,r2_mean,r2_std,flow_kind`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "target", "r2_mean", "r2_std", "flow_kind"])?;
        for curve in &self.curves {
            for (i, t) in self.times.iter().enumerate() {
                w.write_record([
                    t.to_string(),
                    curve.target.clone(),
                    curve.r2_mean[i].to_string(),
                    curve.r2_std[i].to_string(),
                    self.flow_kind.as_str().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Probes stored states: one `[n, d]` matrix per grid time.
pub fn probe_states(
    states: &[(f64, &Tensor)],
    targets: &[ProbeTarget],
    config: &ProbeConfig,
    flow_kind: FlowKind,
    rng: &mut Rng,
) -> Result<ProbeReport> {
    let Some((_, first)) = states.first() else {
        return Err(Error::invalid("probe: empty grid"));
    };
    let n = first.rows();
    if config.n_train == 0 || config.n_train >= n {
        return Err(Error::invalid(format!(
            "probe: n_train = {} but only {n} samples are available (need a non-empty test set)",
            config.n_train
        )));
    }
    if config.n_repeats == 0 {
        return Err(Error::invalid("probe: n_repeats must be positive"));
    }
    for t in targets {
        if t.values.len() != n {
            return Err(Error::invalid(format!(
                "probe target `{}` has {} values for {n} samples",
                t.name,
                t.values.len()
            )));
        }
    }
    for (_, s) in states {
        if s.rows() != n {
            return Err(Error::invalid("probe: grid states disagree in sample count"));
        }
    }

    let features: Vec<Tensor> = states.iter().map(|(_, s)| config.features.apply(s)).collect();
    let mut scores = vec![vec![Vec::with_capacity(config.n_repeats); states.len()]; targets.len()];
    for _ in 0..config.n_repeats {
        let perm = permutation(n, rng);
        let (train, test) = perm.split_at(config.n_train);
        for (ti, feats) in features.iter().enumerate() {
            let xtr = feats.select_rows(train)?;
            let xte = feats.select_rows(test)?;
            for (k, target) in targets.iter().enumerate() {
                let ytr: Vec<f64> = train.iter().map(|&i| target.values[i]).collect();
                let yte: Vec<f64> = test.iter().map(|&i| target.values[i]).collect();
                let model = fit_ridge(&xtr, &ytr, config.lambda)?;
                scores[k][ti].push(r2_score(&yte, &model.predict(&xte)));
            }
        }
    }

    let curves = targets
        .iter()
        .zip(scores)
        .map(|(target, per_time)| {
            let (mean, std): (Vec<f64>, Vec<f64>) = per_time.iter().map(|s| mean_std(s)).unzip();
            ProbeCurve {
                target: target.name.clone(),
                r2_mean: mean,
                r2_std: std,
            }
        })
        .collect();
    Ok(ProbeReport {
        flow_kind,
        times: states.iter().map(|(t, _)| *t).collect(),
        curves,
    })
}

/// Fits a fresh probe per grid time of `traj` and reports held-out R² for each target.
pub fn linear_probe_r2(
    traj: &Trajectory,
    targets: &[ProbeTarget],
    grid: &[f64],
    config: &ProbeConfig,
    flow_kind: FlowKind,
    rng: &mut Rng,
) -> Result<ProbeReport> {
    let states: Vec<(f64, &Tensor)> = grid
        .iter()
        .map(|&t| {
            traj.state_at(t)
                .map(|s| (t, s))
                .ok_or_else(|| Error::invalid(format!("probe time {t} is not on the trajectory grid")))
        })
        .collect::<Result<_>>()?;
    probe_states(&states, targets, config, flow_kind, rng)
}

/// `n + 1` evenly spaced times in `[0, 1]`.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
