//! Binary checkpoints for trained models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "LFLOWCKP"
//! version  u32
//! kind     u8       1 = vae, 2 = flow
//! seed     u64
//! config   u32 length + UTF-8 JSON of the model architecture
//! count    u32
//! entries  count × { u32 name length, name, u32 ndim, ndim × u64 dims, f64 data }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{FlowArch, FlowModel};
use crate::nn::ParamSet;
use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::vae::{VaeArch, VaeModel};

pub const MAGIC: [u8; 8] = *b"LFLOWCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Vae,
    Flow,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Vae => 1,
            ModelKind::Flow => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(ModelKind::Vae),
            2 => Ok(ModelKind::Flow),
            other => Err(Error::Checkpoint(format!("unknown model kind tag {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub seed: u64,
    /// JSON echo of the architecture.
    pub config: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {VERSION})"
            )));
        }
        let kind = ModelKind::from_tag(r.take(1)?[0])?;
        let seed = r.u64()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` has an overflowing shape")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?;
            entries.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            kind,
            seed,
            config,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn param_set(self) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, t) in self.entries {
            set.insert(name, t);
        }
        set
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }
}

fn entries(params: &ParamSet) -> Vec<(String, Tensor)> {
    params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

pub fn vae_checkpoint(model: &VaeModel, seed: u64) -> Checkpoint {
    Checkpoint {
        kind: ModelKind::Vae,
        seed,
        config: serde_json::to_string(&model.arch).expect("architecture serializes"),
        entries: entries(&model.params),
    }
}

pub fn flow_checkpoint(model: &FlowModel, seed: u64) -> Checkpoint {
    Checkpoint {
        kind: ModelKind::Flow,
        seed,
        config: serde_json::to_string(&model.arch).expect("architecture serializes"),
        entries: entries(&model.params),
    }
}

pub fn save_vae(model: &VaeModel, seed: u64, path: &Path) -> Result<()> {
    vae_checkpoint(model, seed).save(path)
}

pub fn save_flow(model: &FlowModel, seed: u64, path: &Path) -> Result<()> {
    flow_checkpoint(model, seed).save(path)
}

/// Rebuilds a VAE; returns it with the seed recorded at save time.
pub fn vae_from_checkpoint(ckpt: Checkpoint) -> Result<(VaeModel, u64)> {
    ckpt.expect_kind(ModelKind::Vae)?;
    let arch: VaeArch = serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("architecture echo does not parse: {e}")))?;
    let seed = ckpt.seed;
    let mut model = VaeModel::new(arch, &mut seeded(0));
    model.params.assign(ckpt.param_set())?;
    Ok((model, seed))
}

pub fn flow_from_checkpoint(ckpt: Checkpoint) -> Result<(FlowModel, u64)> {
    ckpt.expect_kind(ModelKind::Flow)?;
    let arch: FlowArch = serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("architecture echo does not parse: {e}")))?;
    let seed = ckpt.seed;
    let mut model = FlowModel::new(arch, &mut seeded(0)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    model.params.assign(ckpt.param_set())?;
    Ok((model, seed))
}

pub fn load_vae(path: &Path) -> Result<(VaeModel, u64)> {
    vae_from_checkpoint(Checkpoint::load(path)?)
}

pub fn load_flow(path: &Path) -> Result<(FlowModel, u64)> {
    flow_from_checkpoint(Checkpoint::load(path)?)
}
