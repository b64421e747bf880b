//! Conditional velocity field `u_t(z | y)` trained by flow matching on the
//! Gaussian CondOT path with classifier-free label dropout.
//!
//! Training pairs a latent `z` with noise `ε ~ N(0, I)` and a time `t ~ U[0, 1]`,
//! forms `z_t = t·z + (1 − t)·ε` and regresses the field onto `z − ε`. With
//! probability `p` the condition is replaced by the null token, so one network
//! learns both the conditional and the unconditional field.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Linear, ParamId, ParamSet};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{bernoulli, index, seeded, uniform, Rng};
use crate::tensor::Tensor;
use crate::LossLog;

/// A class label with optional continuous factors, or the null token ∅.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    Null,
    Label { class: usize, continuous: Vec<f64> },
}

impl Conditioning {
    pub fn class(class: usize) -> Self {
        Conditioning::Label {
            class,
            continuous: Vec::new(),
        }
    }

    pub fn with_continuous(class: usize, continuous: Vec<f64>) -> Self {
        Conditioning::Label { class, continuous }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Conditioning::Null)
    }

    pub fn class_id(&self) -> Option<usize> {
        match self {
            Conditioning::Null => None,
            Conditioning::Label { class, .. } => Some(*class),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditioningScheme {
    /// Class index (∅ encoded as `null_value`) and continuous factors appended to the input.
    RawAppend { null_value: f64 },
    /// Class embedding (with a learned ∅ row) plus continuous factors, projected to a
    /// per-hidden-layer scale and shift: `h ← h ⊙ (1 + γ) + β`.
    Film { embed_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeEmbedding {
    /// `t` itself as one input feature.
    Raw,
    /// `t` plus `sin(2πkt)`, `cos(2πkt)` for `k = 1..=frequencies`.
    Fourier { frequencies: usize },
}

impl TimeEmbedding {
    fn width(&self) -> usize {
        match self {
            TimeEmbedding::Raw => 1,
            TimeEmbedding::Fourier { frequencies } => 1 + 2 * frequencies,
        }
    }

    fn features(&self, t: f64, out: &mut Vec<f64>) {
        out.push(t);
        if let TimeEmbedding::Fourier { frequencies } = self {
            for k in 1..=*frequencies {
                let a = 2.0 * std::f64::consts::PI * k as f64 * t;
                out.push(a.sin());
                out.push(a.cos());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowArch {
    pub latent_dim: usize,
    pub n_classes: usize,
    /// Number of continuous factors carried by every non-null condition.
    pub n_continuous: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub scheme: ConditioningScheme,
    pub time: TimeEmbedding,
}

impl FlowArch {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("flow.latent_dim", "must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("flow.hidden", "need at least one positive hidden width"));
        }
        if self.n_classes == 0 {
            return Err(Error::config("flow.n_classes", "must be positive"));
        }
        if let ConditioningScheme::Film { embed_dim } = self.scheme {
            if embed_dim == 0 {
                return Err(Error::config("flow.scheme.embed_dim", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct FilmHead {
    embedding: ParamId,
    projection: Linear,
}

/// Parameters of the velocity field plus the layout needed to run it.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub arch: FlowArch,
    pub params: ParamSet,
    layers: Vec<Linear>,
    film: Option<FilmHead>,
}

impl FlowModel {
    pub fn new(arch: FlowArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let cond_width = match arch.scheme {
            ConditioningScheme::RawAppend { .. } => 1 + arch.n_continuous,
            ConditioningScheme::Film { .. } => 0,
        };
        let mut sizes = vec![arch.latent_dim + arch.time.width() + cond_width];
        sizes.extend(&arch.hidden);
        sizes.push(arch.latent_dim);
        let layers: Vec<Linear> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut params, &format!("field.{i}"), w[0], w[1], rng))
            .collect();

        let film = match arch.scheme {
            ConditioningScheme::Film { embed_dim } => {
                let table = crate::rng::normal_tensor(&[arch.n_classes + 1, embed_dim], rng);
                let embedding = params.insert("film.embedding", table);
                let modulated: usize = arch.hidden.iter().sum();
                let projection = Linear::new(
                    &mut params,
                    "film.projection",
                    embed_dim + arch.n_continuous,
                    2 * modulated,
                    rng,
                );
                Some(FilmHead { embedding, projection })
            }
            ConditioningScheme::RawAppend { .. } => None,
        };
        Ok(FlowModel {
            arch,
            params,
            layers,
            film,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Zeroes the last trunk layer, making the field identically zero.
    pub fn zero_output_layer(&mut self) {
        self.layers.last().unwrap().zero(&mut self.params);
    }

    /// Zeroes the FiLM projection so every condition maps to γ = β = 0.
    pub fn zero_film_projection(&mut self) {
        if let Some(film) = &self.film {
            film.projection.zero(&mut self.params);
        }
    }

    fn check_cond(&self, cond: &Conditioning) -> Result<()> {
        if let Conditioning::Label { class, continuous } = cond {
            if *class >= self.arch.n_classes {
                return Err(Error::invalid(format!(
                    "unknown class id {class} (model has {} classes)",
                    self.arch.n_classes
                )));
            }
            if continuous.len() != self.arch.n_continuous {
                return Err(Error::invalid(format!(
                    "condition carries {} continuous factors, model expects {}",
                    continuous.len(),
                    self.arch.n_continuous
                )));
            }
        }
        Ok(())
    }

    /// Records the field on `tape` for a batch: `z_t: [n, d]`, one time and condition per row.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z_t: &Tensor, t: &[f64], conds: &[Conditioning]) -> Result<Var> {
        let (n, d) = z_t.as_matrix("velocity")?;
        if d != self.arch.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "velocity",
                lhs: z_t.shape().to_vec(),
                rhs: vec![n, self.arch.latent_dim],
            });
        }
        if t.len() != n || conds.len() != n {
            return Err(Error::invalid(format!(
                "velocity: {n} states but {} times and {} conditions",
                t.len(),
                conds.len()
            )));
        }
        for c in conds {
            self.check_cond(c)?;
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("time {bad} outside [0, 1]")));
        }

        let tw = self.arch.time.width();
        let mut time = Vec::with_capacity(n * tw);
        for &ti in t {
            self.arch.time.features(ti, &mut time);
        }
        let zv = tape.constant(z_t.clone());
        let tv = tape.constant(Tensor::matrix(n, tw, time)?);

        match (&self.arch.scheme, &self.film) {
            (ConditioningScheme::RawAppend { null_value }, _) => {
                let k = 1 + self.arch.n_continuous;
                let mut feats = Vec::with_capacity(n * k);
                for c in conds {
                    match c {
                        Conditioning::Null => {
                            feats.push(*null_value);
                            feats.extend(std::iter::repeat_n(0.0, self.arch.n_continuous));
                        }
                        Conditioning::Label { class, continuous } => {
                            feats.push(*class as f64);
                            feats.extend(continuous);
                        }
                    }
                }
                let cv = tape.constant(Tensor::matrix(n, k, feats)?);
                let input = tape.concat_cols(&[zv, tv, cv])?;
                self.trunk(tape, bound, input, None)
            }
            (ConditioningScheme::Film { .. }, Some(film)) => {
                let index: Vec<usize> = conds
                    .iter()
                    .map(|c| c.class_id().unwrap_or(self.arch.n_classes))
                    .collect();
                let emb = tape.gather_rows(bound.var(film.embedding), &index)?;
                let cond_vec = if self.arch.n_continuous > 0 {
                    let mut cont = Vec::with_capacity(n * self.arch.n_continuous);
                    for c in conds {
                        match c {
                            Conditioning::Null => cont.extend(std::iter::repeat_n(0.0, self.arch.n_continuous)),
                            Conditioning::Label { continuous, .. } => cont.extend(continuous),
                        }
                    }
                    let cv = tape.constant(Tensor::matrix(n, self.arch.n_continuous, cont)?);
                    tape.concat_cols(&[emb, cv])?
                } else {
                    emb
                };
                let modulation = film.projection.forward(tape, bound, cond_vec)?;
                let input = tape.concat_cols(&[zv, tv])?;
                self.trunk(tape, bound, input, Some(modulation))
            }
            (ConditioningScheme::Film { .. }, None) => unreachable!("FiLM model without FiLM head"),
        }
    }

    fn trunk(&self, tape: &mut Tape, bound: &Bound, input: Var, modulation: Option<Var>) -> Result<Var> {
        let mut h = input;
        let mut offset = 0;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i == last {
                break;
            }
            if let Some(m) = modulation {
                let w = layer.out_dim;
                let total = self.arch.hidden.iter().sum::<usize>();
                let gamma = tape.slice_cols(m, offset, w)?;
                let beta = tape.slice_cols(m, total + offset, w)?;
                let scaled = tape.mul(h, gamma)?;
                let h2 = tape.add(h, scaled)?;
                h = tape.add(h2, beta)?;
                offset += w;
            }
            h = self.arch.activation.apply(tape, h);
        }
        Ok(h)
    }

    /// Field values for a batch sharing one time `t`.
    pub fn velocity_batch(&self, z_t: &Tensor, t: f64, conds: &[Conditioning]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let times = vec![t; z_t.rows()];
        let out = self.forward(&mut tape, &bound, z_t, &times, conds)?;
        Ok(tape.value(out).clone())
    }

    pub fn velocity(&self, z_t: &[f64], t: f64, cond: &Conditioning) -> Result<Vec<f64>> {
        let z = Tensor::matrix(1, z_t.len(), z_t.to_vec())?;
        Ok(self.velocity_batch(&z, t, std::slice::from_ref(cond))?.into_data())
    }

    /// `u_∅ + w · (u_cond − u_∅)` for a batch.
    pub fn guided_velocity_batch(&self, z_t: &Tensor, t: f64, conds: &[Conditioning], w: f64) -> Result<Tensor> {
        if conds.iter().any(Conditioning::is_null) {
            return Err(Error::invalid("guided velocity needs a non-null condition"));
        }
        let nulls = vec![Conditioning::Null; conds.len()];
        let u_null = self.velocity_batch(z_t, t, &nulls)?;
        let u_cond = self.velocity_batch(z_t, t, conds)?;
        u_cond.zip_map(&u_null, "guided_velocity", |c, u| u + w * (c - u))
    }

    pub fn guided_velocity(&self, z_t: &[f64], t: f64, cond: &Conditioning, w: f64) -> Result<Vec<f64>> {
        let z = Tensor::matrix(1, z_t.len(), z_t.to_vec())?;
        Ok(self
            .guided_velocity_batch(&z, t, std::slice::from_ref(cond), w)?
            .into_data())
    }
}

/// `t·z + (1 − t)·ε`
pub fn condot_interpolate(z: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    if z.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            op: "condot_interpolate",
            lhs: vec![z.len()],
            rhs: vec![eps.len()],
        });
    }
    Ok(z.iter().zip(eps).map(|(&zi, &ei)| t * zi + (1.0 - t) * ei).collect())
}

/// `z − ε`, the CondOT regression target (independent of `t`).
pub fn target_velocity(z: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if z.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            op: "target_velocity",
            lhs: vec![z.len()],
            rhs: vec![eps.len()],
        });
    }
    Ok(z.iter().zip(eps).map(|(a, b)| a - b).collect())
}

/// Per-sample randomness of one CFM loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct CfmDraws {
    pub t: Vec<f64>,
    pub eps: Tensor,
    pub dropped: Vec<bool>,
}

impl CfmDraws {
    /// For each sample in order: `t ~ U[0,1]`, `ε ~ N(0, I_d)`, then a drop decision with probability `dropout_p`.
    pub fn sample(n: usize, dim: usize, dropout_p: f64, rng: &mut Rng) -> Self {
        let mut t = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n * dim);
        let mut dropped = Vec::with_capacity(n);
        for _ in 0..n {
            t.push(uniform(0.0, 1.0, rng));
            eps.extend(crate::rng::normal_vec(dim, rng));
            dropped.push(bernoulli(dropout_p, rng));
        }
        CfmDraws {
            t,
            eps: Tensor::matrix(n, dim, eps).expect("CfmDraws: empty batch"),
            dropped,
        }
    }

    /// Reorders every per-sample draw by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(CfmDraws {
            t: perm.iter().map(|&i| self.t[i]).collect(),
            eps: self.eps.select_rows(perm)?,
            dropped: perm.iter().map(|&i| self.dropped[i]).collect(),
        })
    }
}

/// Conditions after label dropout.
pub fn apply_dropout(conds: &[Conditioning], dropped: &[bool]) -> Vec<Conditioning> {
    conds
        .iter()
        .zip(dropped)
        .map(|(c, &d)| if d { Conditioning::Null } else { c.clone() })
        .collect()
}

/// Batch-mean of `‖u_t(z_t | y) − (z − ε)‖²`, recorded on `tape`.
pub fn cfm_loss_on_tape(
    model: &FlowModel,
    tape: &mut Tape,
    bound: &Bound,
    z: &Tensor,
    conds: &[Conditioning],
    draws: &CfmDraws,
) -> Result<Var> {
    let (n, d) = z.as_matrix("cfm_loss")?;
    z.expect_same_shape(&draws.eps, "cfm_loss")?;
    if conds.len() != n || draws.t.len() != n {
        return Err(Error::invalid("cfm_loss: batch, conditions and draws disagree in length"));
    }
    let mut z_t = z.clone();
    let mut target = z.clone();
    for i in 0..n {
        let t = draws.t[i];
        let eps = draws.eps.row(i);
        for ((zt, tg), &e) in z_t.row_mut(i).iter_mut().zip(target.row_mut(i).iter_mut()).zip(eps) {
            let zi = *zt;
            *zt = t * zi + (1.0 - t) * e;
            *tg = zi - e;
        }
    }
    let effective = apply_dropout(conds, &draws.dropped);
    let u = model.forward(tape, bound, &z_t, &draws.t, &effective)?;
    let target = tape.constant(target);
    let mse = tape.mse(u, target)?;
    Ok(tape.scale(mse, d as f64))
}

/// Draws fresh randomness from `rng` and evaluates the CFM loss.
pub fn cfm_loss(model: &FlowModel, z: &Tensor, conds: &[Conditioning], dropout_p: f64, rng: &mut Rng) -> Result<f64> {
    let draws = CfmDraws::sample(z.rows(), z.cols(), dropout_p, rng);
    cfm_loss_with_draws(model, z, conds, &draws)
}

pub fn cfm_loss_with_draws(model: &FlowModel, z: &Tensor, conds: &[Conditioning], draws: &CfmDraws) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let loss = cfm_loss_on_tape(model, &mut tape, &bound, z, conds, draws)?;
    tape.value(loss).item()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub dropout_p: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    /// Cosine decay of the learning rate down to `lr · min_lr_ratio` at the last step.
    pub min_lr_ratio: f64,
    /// Steps averaged into one loss-log entry.
    pub log_every: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            dropout_p: 0.2,
            batch_size: 256,
            steps: 6000,
            adam: AdamConfig::default(),
            min_lr_ratio: 0.05,
            log_every: 100,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::config("flow.train.dropout_p", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("flow.train.batch_size", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("flow.train.log_every", "must be positive"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("flow.train.adam.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::config("flow.train.min_lr_ratio", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.adam.lr;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.adam.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

/// Trains a fresh field on precomputed latents `[n, d]` with one condition per row.
pub fn train_flow(
    latents: &Tensor,
    conds: &[Conditioning],
    arch: FlowArch,
    config: &FlowTrainConfig,
    rng: &mut Rng,
) -> Result<(FlowModel, LossLog)> {
    config.validate()?;
    let (n, d) = latents.as_matrix("train_flow")?;
    if d != arch.latent_dim {
        return Err(Error::config(
            "flow.latent_dim",
            format!("latents have dimension {d}, architecture expects {}", arch.latent_dim),
        ));
    }
    if conds.len() != n {
        return Err(Error::invalid(format!("{n} latents but {} conditions", conds.len())));
    }
    let mut init_rng = seeded(rand::RngCore::next_u64(rng));
    let mut model = FlowModel::new(arch, &mut init_rng)?;
    for c in conds {
        model.check_cond(c)?;
    }
    let mut adam = AdamState::new(config.adam, model.params.tensors());
    let mut log = LossLog::default();
    let batch = config.batch_size.min(n);
    let mut window = 0.0;
    let mut in_window = 0usize;

    for step in 0..config.steps {
        let idx: Vec<usize> = (0..batch).map(|_| index(n, rng)).collect();
        let z = latents.select_rows(&idx)?;
        let bconds: Vec<Conditioning> = idx.iter().map(|&i| conds[i].clone()).collect();
        let draws = CfmDraws::sample(batch, d, config.dropout_p, rng);

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let loss = cfm_loss_on_tape(&model, &mut tape, &bound, &z, &bconds, &draws)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::non_finite(format!("flow-matching loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound
            .vars()
            .iter()
            .zip(model.params.tensors())
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect();
        adam.step_with_lr(model.params.tensors_mut(), &g, config.lr_at(step))?;

        window += value;
        in_window += 1;
        if in_window == config.log_every || step + 1 == config.steps {
            log.push(window / in_window as f64);
            window = 0.0;
            in_window = 0;
        }
    }
    Ok((model, log))
}
