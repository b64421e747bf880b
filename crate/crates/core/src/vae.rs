//! MLP β-VAE whose Gaussian posterior q(z|x) provides the latent space the flow learns.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ParamSet};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{normal_tensor, permutation, seeded, Rng};
use crate::tensor::Tensor;
use crate::LossLog;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 8,
            hidden: vec![128, 128],
            beta: 1e-6,
            epochs: 50,
            batch_size: 128,
            adam: AdamConfig::default(),
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("vae.latent_dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("vae.hidden", "layer widths must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("vae.beta", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("vae.batch_size", "must be positive"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("vae.adam.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Shape information needed to rebuild a [`VaeModel`] around loaded parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub arch: VaeArch,
    pub params: ParamSet,
    encoder: Mlp,
    decoder: Mlp,
}

/// Posterior parameters for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeResult {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Batched posterior parameters, each `[n, latent_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl VaeModel {
    pub fn new(arch: VaeArch, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let mut enc_sizes = vec![arch.input_dim];
        enc_sizes.extend(&arch.hidden);
        enc_sizes.push(2 * arch.latent_dim);
        let encoder = Mlp::new(&mut params, "encoder", &enc_sizes, Activation::Relu, rng);

        let mut dec_sizes = vec![arch.latent_dim];
        dec_sizes.extend(&arch.hidden);
        dec_sizes.push(arch.input_dim);
        let decoder = Mlp::new(&mut params, "decoder", &dec_sizes, Activation::Relu, rng);
        VaeModel {
            arch,
            params,
            encoder,
            decoder,
        }
    }

    pub fn from_config(input_dim: usize, config: &VaeConfig, rng: &mut Rng) -> Self {
        VaeModel::new(
            VaeArch {
                input_dim,
                latent_dim: config.latent_dim,
                hidden: config.hidden.clone(),
                beta: config.beta,
            },
            rng,
        )
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    /// Zeroes the encoder head so that μ = 0 and logvar = 0 for every input.
    pub fn zero_encoder_output(&mut self) {
        self.encoder.zero_output_layer(&mut self.params);
    }

    fn check_width(&self, t: &Tensor, want: usize, what: &'static str) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != want {
            return Err(Error::ShapeMismatch {
                op: what,
                lhs: t.shape().to_vec(),
                rhs: vec![t.rows(), want],
            });
        }
        Ok(())
    }

    fn encode_vars(&self, tape: &mut Tape, bound: &crate::nn::Bound, x: Var) -> Result<(Var, Var)> {
        let h = self.encoder.forward(tape, bound, x)?;
        let l = self.arch.latent_dim;
        let mu = tape.slice_cols(h, 0, l)?;
        let logvar = tape.slice_cols(h, l, l)?;
        Ok((mu, logvar))
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<EncodedBatch> {
        self.check_width(x, self.arch.input_dim, "encode")?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode_vars(&mut tape, &bound, xv)?;
        Ok(EncodedBatch {
            mu: tape.value(mu).clone(),
            logvar: tape.value(logvar).clone(),
        })
    }

    pub fn encode(&self, x: &[f64]) -> Result<EncodeResult> {
        let batch = self.encode_batch(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        Ok(EncodeResult {
            mu: batch.mu.into_data(),
            logvar: batch.logvar.into_data(),
        })
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width(z, self.arch.latent_dim, "decode")?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let out = self.decoder.forward(&mut tape, &bound, zv)?;
        Ok(tape.value(out).clone())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&Tensor::matrix(1, z.len(), z.to_vec())?)?.into_data())
    }

    /// Draws `z ~ q(z|x)` for every row of `x`.
    pub fn sample_latents(&self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let enc = self.encode_batch(x)?;
        let noise = normal_tensor(enc.mu.shape(), rng);
        reparameterize_batch(&enc.mu, &enc.logvar, &noise)
    }

    /// ELBO-style loss on a batch with explicit reparameterization noise, recorded on `tape`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        bound: &crate::nn::Bound,
        x: &Tensor,
        noise: &Tensor,
    ) -> Result<Var> {
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode_vars(tape, bound, xv)?;
        let nv = tape.constant(noise.clone());
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let eps = tape.mul(std, nv)?;
        let z = tape.add(mu, eps)?;
        let xhat = self.decoder.forward(tape, bound, z)?;
        elbo_on_tape(tape, xv, xhat, mu, logvar, self.arch.beta)
    }
}

/// `z = μ + exp(0.5·logvar) · noise`
pub fn reparameterize(enc: &EncodeResult, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != enc.mu.len() || enc.logvar.len() != enc.mu.len() {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            lhs: vec![enc.mu.len()],
            rhs: vec![noise.len()],
        });
    }
    Ok(enc
        .mu
        .iter()
        .zip(&enc.logvar)
        .zip(noise)
        .map(|((m, lv), n)| m + (0.5 * lv).exp() * n)
        .collect())
}

pub fn reparameterize_batch(mu: &Tensor, logvar: &Tensor, noise: &Tensor) -> Result<Tensor> {
    mu.expect_same_shape(logvar, "reparameterize")?;
    mu.expect_same_shape(noise, "reparameterize")?;
    let mut out = mu.clone();
    for ((o, lv), n) in out.data_mut().iter_mut().zip(logvar.data()).zip(noise.data()) {
        *o += (0.5 * lv).exp() * n;
    }
    Ok(out)
}

/// Reconstruction MSE plus β-weighted Gaussian KL, on the tape.
///
/// KL per sample is `0.5 · Σ (exp(logvar) + μ² − 1 − logvar)`, averaged over the batch.
/// With β = 0 the KL branch is not recorded at all.
pub fn elbo_on_tape(tape: &mut Tape, x: Var, xhat: Var, mu: Var, logvar: Var, beta: f64) -> Result<Var> {
    let recon = tape.mse(xhat, x)?;
    if beta == 0.0 {
        return Ok(recon);
    }
    let kl = kl_on_tape(tape, mu, logvar)?;
    let weighted = tape.scale(kl, beta);
    tape.add(recon, weighted)
}

fn kl_on_tape(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let n = tape.value(mu).rows() as f64;
    let var = tape.exp(logvar);
    let mu2 = tape.mul(mu, mu)?;
    let s = tape.add(var, mu2)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0);
    let total = tape.sum(s);
    Ok(tape.scale(total, 0.5 / n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn elbo_loss(x: &Tensor, xhat: &Tensor, mu: &Tensor, logvar: &Tensor, beta: f64) -> Result<ElboTerms> {
    x.expect_same_shape(xhat, "elbo_loss")?;
    mu.expect_same_shape(logvar, "elbo_loss")?;
    let mut tape = Tape::new();
    let (xv, xh) = (tape.constant(x.clone()), tape.constant(xhat.clone()));
    let (m, lv) = (tape.constant(mu.clone()), tape.constant(logvar.clone()));
    let recon = tape.mse(xh, xv)?;
    let kl = kl_on_tape(&mut tape, m, lv)?;
    let (reconstruction, kl) = (tape.value(recon).item()?, tape.value(kl).item()?);
    Ok(ElboTerms {
        reconstruction,
        kl,
        total: reconstruction + beta * kl,
    })
}

/// Minibatch Adam on the ELBO. Returns the model and its per-epoch mean loss.
pub fn train_vae(data: &Tensor, config: &VaeConfig, rng: &mut Rng) -> Result<(VaeModel, LossLog)> {
    config.validate()?;
    let (n, dim) = data.as_matrix("train_vae")?;
    let mut model = VaeModel::from_config(dim, config, &mut seeded(rng_seed(rng)));
    let mut adam = AdamState::new(config.adam, model.params.tensors());
    let mut log = LossLog::default();
    let batch = config.batch_size.min(n);

    for epoch in 0..config.epochs {
        let order = permutation(n, rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let x = data.select_rows(chunk)?;
            let noise = normal_tensor(&[chunk.len(), config.latent_dim], rng);
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let loss = model.loss_on_tape(&mut tape, &bound, &x, &noise)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::non_finite(format!("VAE loss at epoch {epoch}, batch {batches}")));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = bound
                .vars()
                .iter()
                .zip(model.params.tensors())
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            adam.step(model.params.tensors_mut(), &g)?;
            total += value;
            batches += 1;
        }
        log.push(total / batches as f64);
    }
    Ok((model, log))
}

fn rng_seed(rng: &mut Rng) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}
