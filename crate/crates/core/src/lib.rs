//! Latent flow matching with classifier-free guidance on top of a β-VAE.
//!
//! The crate carries its own small reverse-mode autodiff, so every model here is a
//! plain MLP over `f64` tensors. A typical run trains a VAE, fits a conditional
//! velocity field to its latents, then pulls latents back to the base distribution
//! with or without conditioning and measures which factors survive.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod flow;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

/// Per-step (or per-epoch) training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    values: Vec<f64>,
}

impl LossLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, loss: f64) {
        self.values.push(loss);
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first(&self) -> Option<f64> {
        self.values.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }

    /// Mean of the first (or last) `window` entries, clipped to the log length.
    pub fn head_mean(&self, window: usize) -> Option<f64> {
        mean(&self.values[..window.min(self.values.len())])
    }

    pub fn tail_mean(&self, window: usize) -> Option<f64> {
        let n = self.values.len();
        mean(&self.values[n - window.min(n)..])
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
