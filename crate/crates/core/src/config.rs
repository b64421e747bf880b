//! Experiment configuration, read from TOML.
//!
//! Every field has an experiment-specific default, so a file only needs
//! `experiment = "gaussians2d"` or `experiment = "factors"` plus whatever it wants to
//! change. User tables are merged key by key over the defaults; a table that sets
//! `kind` (the conditioning scheme or time embedding) replaces the default wholesale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{FeatureMap, LogisticConfig, ProbeConfig};
use crate::datasets::{FactorDatasetSpec, GaussianMixtureSpec};
use crate::error::{Error, Result};
use crate::flow::{ConditioningScheme, FlowTrainConfig, TimeEmbedding};
use crate::nn::Activation;
use crate::ode::{IntegratorConfig, Method};
use crate::vae::VaeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Gaussians2d,
    Factors,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Gaussians2d => "gaussians2d",
            ExperimentKind::Factors => "factors",
        }
    }
}

/// Velocity-field architecture minus the sizes fixed by the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub scheme: ConditioningScheme,
    pub time: TimeEmbedding,
    pub train: FlowTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundTripConfig {
    pub n_samples: usize,
    pub method: Method,
    /// Step counts of the convergence study, each at least double the previous.
    pub steps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Held-out samples pushed through inversion and probed.
    pub n_eval: usize,
    /// Number of probe times, evenly spaced over [0, 1] including both ends.
    pub grid_points: usize,
    pub probe: ProbeConfig,
    pub classifier: LogisticConfig,
    /// Features for the regression of the radial distance `d` (gaussians2d only).
    pub distance_features: FeatureMap,
    /// Conditional samples generated per class (gaussians2d only).
    pub n_generate: usize,
    pub n_transfer: usize,
    pub n_isolation: usize,
    pub isolation_source_class: usize,
    pub isolation_reference_class: usize,
    pub pca_components: usize,
    pub roundtrip: RoundTripConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    /// Default output directory; the CLI's `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Fraction of the dataset used for training; the rest is held out.
    pub train_frac: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussians: Option<GaussianMixtureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<FactorDatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vae: Option<VaeConfig>,
    pub flow: FlowSection,
    pub integrator: IntegratorConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn default_for(kind: ExperimentKind) -> Self {
        let roundtrip = RoundTripConfig {
            n_samples: 256,
            method: Method::Rk4,
            steps: vec![50, 100, 200],
        };
        match kind {
            ExperimentKind::Gaussians2d => ExperimentConfig {
                experiment: kind,
                seed: 0,
                out_dir: None,
                train_frac: 0.8,
                gaussians: Some(GaussianMixtureSpec::default()),
                factors: None,
                vae: None,
                flow: FlowSection {
                    hidden: vec![64, 64, 64],
                    activation: Activation::Elu,
                    scheme: ConditioningScheme::RawAppend { null_value: -1.0 },
                    time: TimeEmbedding::Raw,
                    train: FlowTrainConfig::default(),
                },
                integrator: IntegratorConfig::default(),
                analysis: AnalysisConfig {
                    n_eval: 1600,
                    grid_points: 11,
                    probe: ProbeConfig::default(),
                    classifier: LogisticConfig::default(),
                    distance_features: FeatureMap::Quadratic,
                    n_generate: 1000,
                    n_transfer: 100,
                    n_isolation: 100,
                    isolation_source_class: 0,
                    isolation_reference_class: 2,
                    pca_components: 2,
                    roundtrip,
                },
            },
            ExperimentKind::Factors => ExperimentConfig {
                experiment: kind,
                seed: 0,
                out_dir: None,
                train_frac: 0.8,
                gaussians: None,
                factors: Some(FactorDatasetSpec::default()),
                vae: Some(VaeConfig::default()),
                flow: FlowSection {
                    hidden: vec![128; 4],
                    activation: Activation::Gelu,
                    scheme: ConditioningScheme::Film { embed_dim: 16 },
                    time: TimeEmbedding::Raw,
                    train: FlowTrainConfig {
                        dropout_p: 0.1,
                        ..FlowTrainConfig::default()
                    },
                },
                integrator: IntegratorConfig::default(),
                analysis: AnalysisConfig {
                    n_eval: 2000,
                    grid_points: 11,
                    probe: ProbeConfig::default(),
                    classifier: LogisticConfig::default(),
                    distance_features: FeatureMap::Quadratic,
                    n_generate: 0,
                    n_transfer: 100,
                    n_isolation: 100,
                    isolation_source_class: 5,
                    isolation_reference_class: 0,
                    pca_components: 2,
                    roundtrip,
                },
            },
        }
    }

    /// Parses TOML, filling unspecified fields from the experiment's defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(error_field(&e), e.message().to_string()))?;
        let kind = match user.get("experiment") {
            Some(toml::Value::String(s)) if s == "gaussians2d" => ExperimentKind::Gaussians2d,
            Some(toml::Value::String(s)) if s == "factors" => ExperimentKind::Factors,
            Some(other) => {
                return Err(Error::config(
                    "experiment",
                    format!("expected \"gaussians2d\" or \"factors\", found {other}"),
                ))
            }
            None => return Err(Error::config("experiment", "missing; set \"gaussians2d\" or \"factors\"")),
        };
        let mut merged = toml::Table::try_from(Self::default_for(kind)).expect("defaults serialize");
        merge(&mut merged, user);
        let config: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(error_field(&e), e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Full TOML rendering; parsing it back yields an equal config.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", format!("must be at most {}", i64::MAX)));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::config("train_frac", "must lie strictly between 0 and 1"));
        }
        match self.experiment {
            ExperimentKind::Gaussians2d => {
                let spec = self
                    .gaussians
                    .as_ref()
                    .ok_or_else(|| Error::config("gaussians", "required for the gaussians2d experiment"))?;
                prefixed("gaussians", spec.validate())?;
                if self.factors.is_some() {
                    return Err(Error::config("factors", "not used by the gaussians2d experiment"));
                }
                if self.vae.is_some() {
                    return Err(Error::config("vae", "the gaussians2d experiment runs without a VAE"));
                }
            }
            ExperimentKind::Factors => {
                let spec = self
                    .factors
                    .as_ref()
                    .ok_or_else(|| Error::config("factors", "required for the factors experiment"))?;
                prefixed("factors", spec.validate())?;
                if self.gaussians.is_some() {
                    return Err(Error::config("gaussians", "not used by the factors experiment"));
                }
                self.vae
                    .as_ref()
                    .ok_or_else(|| Error::config("vae", "required for the factors experiment"))?
                    .validate()?;
                let a = &self.analysis;
                if a.isolation_source_class >= spec.n_classes {
                    return Err(Error::config("analysis.isolation_source_class", "exceeds the class count"));
                }
                if a.isolation_reference_class >= spec.n_classes {
                    return Err(Error::config("analysis.isolation_reference_class", "exceeds the class count"));
                }
            }
        }
        self.flow.train.validate()?;
        if self.flow.hidden.is_empty() || self.flow.hidden.contains(&0) {
            return Err(Error::config("flow.hidden", "need at least one positive hidden width"));
        }
        if let ConditioningScheme::Film { embed_dim: 0 } = self.flow.scheme {
            return Err(Error::config("flow.scheme.embed_dim", "must be positive"));
        }
        prefixed("integrator", self.integrator.validate())?;
        let a = &self.analysis;
        if a.grid_points < 2 {
            return Err(Error::config("analysis.grid_points", "need at least the two endpoints"));
        }
        if !self.integrator.n_steps.is_multiple_of(a.grid_points - 1) {
            return Err(Error::config(
                "integrator.n_steps",
                format!(
                    "must be a multiple of {} so every probe time lands on a solver step",
                    a.grid_points - 1
                ),
            ));
        }
        if a.probe.n_train == 0 || a.probe.n_train >= a.n_eval {
            return Err(Error::config(
                "analysis.probe.n_train",
                format!("must be positive and below analysis.n_eval = {}", a.n_eval),
            ));
        }
        if a.probe.n_repeats == 0 {
            return Err(Error::config("analysis.probe.n_repeats", "must be positive"));
        }
        if !(a.probe.lambda >= 0.0) {
            return Err(Error::config("analysis.probe.lambda", "must be non-negative"));
        }
        if !(a.classifier.train_frac > 0.0 && a.classifier.train_frac < 1.0) {
            return Err(Error::config("analysis.classifier.train_frac", "must lie strictly between 0 and 1"));
        }
        if a.pca_components == 0 {
            return Err(Error::config("analysis.pca_components", "must be positive"));
        }
        let rt = &a.roundtrip;
        if rt.n_samples == 0 || rt.steps.is_empty() || rt.steps.contains(&0) {
            return Err(Error::config("analysis.roundtrip", "need samples and positive step counts"));
        }
        if self.n_held_out() < a.n_eval.max(rt.n_samples) {
            return Err(Error::config(
                "analysis.n_eval",
                "the held-out split is smaller than the requested evaluation set",
            ));
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        match self.experiment {
            ExperimentKind::Gaussians2d => self.gaussians.as_ref().map_or(0, |g| g.n_samples),
            ExperimentKind::Factors => self.factors.as_ref().map_or(0, |f| f.n_samples),
        }
    }

    /// Size of the held-out split, rounded the same way as the split itself.
    pub fn n_held_out(&self) -> usize {
        let n = self.n_total();
        n - ((n as f64 * self.train_frac).round() as usize).min(n)
    }

    /// Tiny budgets that exercise every stage in seconds.
    pub fn smoke(&self) -> Self {
        let mut c = self.clone();
        if let Some(g) = &mut c.gaussians {
            g.n_samples = 600;
        }
        if let Some(f) = &mut c.factors {
            f.n_samples = 600;
        }
        if let Some(v) = &mut c.vae {
            v.epochs = 2;
            v.hidden = vec![32, 32];
        }
        c.flow.hidden = c.flow.hidden.iter().map(|&h| h.min(32)).collect();
        c.flow.train.steps = 40;
        c.flow.train.batch_size = c.flow.train.batch_size.min(64);
        c.flow.train.log_every = 10;
        c.integrator.n_steps = c.analysis.grid_points - 1;
        let a = &mut c.analysis;
        a.n_eval = 100;
        a.probe.n_train = 40;
        a.probe.n_repeats = 2;
        a.classifier.iterations = 50;
        a.n_generate = a.n_generate.min(50);
        a.n_transfer = a.n_transfer.min(10);
        a.n_isolation = a.n_isolation.min(10);
        a.roundtrip.n_samples = 32;
        a.roundtrip.steps = vec![10, 20];
        c
    }
}

fn prefixed(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { field, message } if !field.starts_with(prefix) => Error::Config {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    })
}

fn error_field(e: &toml::de::Error) -> String {
    // toml reports the offending key inside the message; keep the whole message and
    // point at the document when no better location exists.
    let msg = e.message();
    msg.split('`').nth(1).map_or_else(|| "config".to_string(), str::to_string)
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !u.contains_key("kind") => merge(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
