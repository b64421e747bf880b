//! Style transfer and feature isolation by composing inversions and generations.
//!
//! Both operations accept an optional VAE. Without one the flow lives directly in
//! observation space and encode/decode are the identity.

use std::io::Write;

use crate::error::{Error, Result};
use crate::flow::{Conditioning, FlowModel};
use crate::ode::{generate, invert_to_base, IntegratorConfig};
use crate::tensor::Tensor;
use crate::vae::VaeModel;

fn encode_mean(vae: Option<&VaeModel>, x: &Tensor) -> Result<Tensor> {
    match vae {
        Some(v) => Ok(v.encode_batch(x)?.mu),
        None => Ok(x.clone()),
    }
}

fn decode(vae: Option<&VaeModel>, z: &Tensor) -> Result<Tensor> {
    match vae {
        Some(v) => v.decode_batch(z),
        None => Ok(z.clone()),
    }
}

/// Encodes, inverts under `cond_src`, regenerates under `cond_tgt`, decodes.
pub fn style_transfer(
    vae: Option<&VaeModel>,
    flow: &FlowModel,
    x: &Tensor,
    cond_src: &[Conditioning],
    cond_tgt: &[Conditioning],
    config: &IntegratorConfig,
) -> Result<Tensor> {
    if let Some(i) = cond_src.iter().position(Conditioning::is_null) {
        return Err(Error::invalid(format!(
            "style transfer needs a source condition, sample {i} has the null token"
        )));
    }
    let z1 = encode_mean(vae, x)?;
    let z0 = invert_to_base(flow, &z1, cond_src, config)?.into_end();
    let z1_new = generate(flow, &z0, cond_tgt, config)?.into_end();
    decode(vae, &z1_new)
}

#[derive(Clone, Debug)]
pub struct ResidualReport {
    /// Decoded original latent, `x̂`.
    pub reconstruction: Tensor,
    /// Decoded conditional regeneration, `x̂_ref`.
    pub regenerated: Tensor,
    /// `x̂ − x̂_ref`.
    pub residual: Tensor,
    pub reconstruction_norms: Vec<f64>,
    pub regenerated_norms: Vec<f64>,
    pub residual_norms: Vec<f64>,
}

impl ResidualReport {
    pub fn from_pair(reconstruction: Tensor, regenerated: Tensor) -> Result<Self> {
        let residual = reconstruction.sub(&regenerated)?;
        let norms = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        Ok(ResidualReport {
            reconstruction_norms: norms(&reconstruction),
            regenerated_norms: norms(&regenerated),
            residual_norms: norms(&residual),
            reconstruction,
            regenerated,
            residual,
        })
    }

    pub fn len(&self) -> usize {
        self.residual.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `sample_id,recon_norm,regen_norm,residual_norm,res_0..res_{D-1}`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.residual.cols();
        let mut header: Vec<String> = ["sample_id", "recon_norm", "regen_norm", "residual_norm"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..d).map(|j| format!("res_{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![
                i.to_string(),
                self.reconstruction_norms[i].to_string(),
                self.regenerated_norms[i].to_string(),
                self.residual_norms[i].to_string(),
            ];
            rec.extend(self.residual.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Encodes, inverts with the null condition, regenerates under `cond_reference`
/// and returns both decodings with their difference.
pub fn feature_isolation_residual(
    vae: Option<&VaeModel>,
    flow: &FlowModel,
    x: &Tensor,
    cond_reference: &[Conditioning],
    config: &IntegratorConfig,
) -> Result<ResidualReport> {
    let z1 = encode_mean(vae, x)?;
    let null = vec![Conditioning::Null; z1.rows()];
    let z0 = invert_to_base(flow, &z1, &null, config)?.into_end();
    let z_ref = generate(flow, &z0, cond_reference, config)?.into_end();
    ResidualReport::from_pair(decode(vae, &z1)?, decode(vae, &z_ref)?)
}

/// Cosine similarity of two equal-length vectors; zero if either is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
