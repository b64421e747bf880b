//! Experiment driver: data, training, inversion and every analysis, with artifacts
//! written under one output directory.
//!
//! ```text
//! config.toml                  resolved configuration
//! checkpoints/{vae,flow}.ckpt
//! logs/{vae,flow}_loss.csv
//! trajectories/{conditional,unconditional}.csv
//! probes/{conditional,unconditional}.csv
//! pca/{data,conditional_t0,unconditional_t0}.csv
//! generation.csv               gaussians2d only
//! roundtrip.csv
//! transfer.csv
//! isolation.csv
//! summary.json
//! ```
//!
//! Each CSV opens with a `#` comment line carrying the seed and the SHA-256 of
//! `config.toml`. Every stage draws from its own RNG stream derived from the seed and
//! the stage name, so granular commands reproduce what a full run computes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    class_structure_score, cosine_similarity, feature_isolation_residual, fit_ridge, pca_project, probe_states,
    style_transfer, write_pca_csv, FlowKind, ProbeConfig, ProbeReport, ProbeTarget, SoftmaxClassifier,
};
use crate::checkpoint::{load_flow, load_vae, save_flow, save_vae};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::datasets::{
    factor_matrix, sample_factor_dataset, sample_factors_with, sample_gaussian_mixture, split_indices, FactorMixing,
};
use crate::error::{Error, Result};
use crate::flow::{train_flow, Conditioning, FlowArch, FlowModel};
use crate::ode::{generate, integrate, invert_to_base, write_trajectory_csv, IntegratorConfig, Trajectory};
use crate::rng::{index, normal_tensor, seeded, Rng};
use crate::tensor::Tensor;
use crate::vae::{train_vae, VaeModel};
use crate::LossLog;

/// Independent RNG stream for one pipeline stage.
pub fn stage_rng(seed: u64, stage: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    seeded(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

/// Observations with their labels and the train / held-out split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub conds: Vec<Conditioning>,
    /// `(r, g, b)` per sample (factors only).
    pub rgb: Option<Vec<[f64; 3]>>,
    /// Distance to the class mean (gaussians2d only).
    pub distance: Option<Vec<f64>>,
    pub mixing: Option<FactorMixing>,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl PreparedData {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let mut rng = stage_rng(config.seed, "data");
        let mut prepared = match config.experiment {
            ExperimentKind::Gaussians2d => {
                let spec = config.gaussians.as_ref().expect("validated");
                let samples = sample_gaussian_mixture(spec, &mut rng)?;
                let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x.to_vec()).collect();
                PreparedData {
                    x: Tensor::from_rows(&rows)?,
                    labels: samples.iter().map(|s| s.class).collect(),
                    conds: samples.iter().map(|s| Conditioning::class(s.class)).collect(),
                    rgb: None,
                    distance: Some(samples.iter().map(|s| s.d).collect()),
                    mixing: None,
                    train: Vec::new(),
                    held_out: Vec::new(),
                }
            }
            ExperimentKind::Factors => {
                let spec = config.factors.as_ref().expect("validated");
                let samples = sample_factor_dataset(spec, &mut rng)?;
                PreparedData {
                    x: factor_matrix(&samples)?,
                    labels: samples.iter().map(|s| s.class).collect(),
                    conds: samples.iter().map(factor_condition).collect(),
                    rgb: Some(samples.iter().map(|s| s.rgb()).collect()),
                    distance: None,
                    mixing: Some(FactorMixing::from_spec(spec)?),
                    train: Vec::new(),
                    held_out: Vec::new(),
                }
            }
        };
        let (train, held_out) = split_indices(prepared.labels.len(), config.train_frac, &mut stage_rng(config.seed, "split"));
        prepared.train = train;
        prepared.held_out = held_out;
        Ok(prepared)
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    fn conds_of(&self, idx: &[usize]) -> Vec<Conditioning> {
        idx.iter().map(|&i| self.conds[i].clone()).collect()
    }

    fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// The conditioning used for factor data: class plus the red and green channels.
/// Blue is deliberately withheld.
pub fn factor_condition(s: &crate::datasets::FactorSample) -> Conditioning {
    Conditioning::with_continuous(s.class, vec![s.r, s.g])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub vae_loss_first: Option<f64>,
    pub vae_loss_last: Option<f64>,
    pub flow_loss_first: Option<f64>,
    pub flow_loss_last: Option<f64>,
    pub flow_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMoments {
    pub class: usize,
    pub target_mean: Vec<f64>,
    pub mean: Vec<f64>,
    /// Row-major sample covariance.
    pub cov: Vec<f64>,
    pub mean_error: f64,
    /// Largest entrywise deviation from the target covariance.
    pub cov_max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    /// Class accuracy on the observations (or VAE means) themselves.
    pub data: f64,
    pub unconditional_t0: f64,
    pub conditional_t0: f64,
    /// Held-out R² of the distance regression on conditional t = 0 latents.
    pub distance_r2_conditional_t0: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub conditional: ProbeReport,
    pub unconditional: ProbeReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTripSummary {
    pub n_samples: usize,
    pub steps: Vec<usize>,
    pub median_relative_error: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub n: usize,
    pub class_accuracy: f64,
    /// Mean |b̂(x') − b(x)| with b̂ a ridge probe on VAE means (factors only).
    pub b_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationSummary {
    pub n: usize,
    pub source_class: usize,
    pub reference_class: usize,
    pub median_cosine: f64,
    pub min_cosine: f64,
}

/// Machine-readable record of one experiment. Contains no timestamps or paths, so
/// identical configs and seeds give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub config_sha256: String,
    pub training: TrainingSummary,
    pub generation: Option<Vec<ClassMoments>>,
    pub structure: StructureSummary,
    pub probes: ProbeSummary,
    pub roundtrip: RoundTripSummary,
    pub transfer: TransferSummary,
    pub isolation: IsolationSummary,
}

impl Summary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

/// Trajectories of the held-out evaluation set under both fields.
pub struct Inversions {
    pub eval_idx: Vec<usize>,
    /// Points the flow was inverted from (VAE means for factors).
    pub z1: Tensor,
    pub conditional: Trajectory,
    pub unconditional: Trajectory,
}

pub struct Pipeline {
    config: ExperimentConfig,
    out: PathBuf,
    config_hash: String,
}

impl Pipeline {
    /// Prepares `out` and writes the resolved config into it.
    pub fn new(config: ExperimentConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        for sub in ["checkpoints", "logs", "trajectories", "probes", "pca"] {
            fs::create_dir_all(out.join(sub))?;
        }
        let text = config.to_toml_string();
        let config_hash = hex(&Sha256::digest(text.as_bytes()));
        fs::write(out.join("config.toml"), &text)?;
        Ok(Pipeline {
            config,
            out: out.to_path_buf(),
            config_hash,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn vae_path(&self) -> PathBuf {
        self.path("checkpoints/vae.ckpt")
    }

    fn flow_path(&self) -> PathBuf {
        self.path("checkpoints/flow.ckpt")
    }

    fn rng(&self, stage: &str) -> Rng {
        stage_rng(self.config.seed, stage)
    }

    /// Opens an artifact and writes its `#` provenance line.
    fn artifact(&self, rel: &str) -> Result<BufWriter<File>> {
        let mut w = BufWriter::new(File::create(self.path(rel))?);
        writeln!(
            w,
            "# latent-flow experiment={} seed={} config_sha256={}",
            self.config.experiment.as_str(),
            self.config.seed,
            self.config_hash
        )?;
        Ok(w)
    }

    /// Data, training, every analysis and the summary.
    pub fn run(&self) -> Result<Summary> {
        let data = PreparedData::build(&self.config)?;
        let vae = self.train_vae_on(&data)?;
        self.train_flow_on(&data, vae.as_ref())?;
        self.report()
    }

    /// Trains and saves the VAE. The gaussians2d experiment has none and returns `None`.
    pub fn train_vae(&self) -> Result<Option<VaeModel>> {
        self.train_vae_on(&PreparedData::build(&self.config)?)
    }

    fn train_vae_on(&self, data: &PreparedData) -> Result<Option<VaeModel>> {
        let Some(vcfg) = &self.config.vae else {
            return Ok(None);
        };
        let xtr = data.x.select_rows(&data.train)?;
        let (vae, log) = train_vae(&xtr, vcfg, &mut self.rng("vae"))?;
        save_vae(&vae, self.config.seed, &self.vae_path())?;
        self.write_loss_log("logs/vae_loss.csv", "epoch", &log)?;
        Ok(Some(vae))
    }

    /// Trains and saves the flow, loading the VAE checkpoint when the experiment has one.
    pub fn train_flow(&self) -> Result<FlowModel> {
        let data = PreparedData::build(&self.config)?;
        let vae = self.load_vae()?;
        self.train_flow_on(&data, vae.as_ref())
    }

    fn train_flow_on(&self, data: &PreparedData, vae: Option<&VaeModel>) -> Result<FlowModel> {
        let xtr = data.x.select_rows(&data.train)?;
        let latents = match vae {
            Some(v) => v.sample_latents(&xtr, &mut self.rng("latents"))?,
            None => xtr,
        };
        let f = &self.config.flow;
        let arch = FlowArch {
            latent_dim: latents.cols(),
            n_classes: data.n_classes(),
            n_continuous: if data.rgb.is_some() { 2 } else { 0 },
            hidden: f.hidden.clone(),
            activation: f.activation,
            scheme: f.scheme.clone(),
            time: f.time.clone(),
        };
        let (flow, log) = train_flow(&latents, &data.conds_of(&data.train), arch, &f.train, &mut self.rng("flow"))?;
        save_flow(&flow, self.config.seed, &self.flow_path())?;
        self.write_loss_log("logs/flow_loss.csv", "step", &log)?;
        Ok(flow)
    }

    fn load_vae(&self) -> Result<Option<VaeModel>> {
        if self.config.vae.is_none() {
            return Ok(None);
        }
        let path = self.vae_path();
        if !path.exists() {
            return Err(Error::invalid(format!(
                "{} not found; run `train-vae` first",
                path.display()
            )));
        }
        Ok(Some(load_vae(&path)?.0))
    }

    fn load_flow(&self) -> Result<FlowModel> {
        let path = self.flow_path();
        if !path.exists() {
            return Err(Error::invalid(format!(
                "{} not found; run `train-flow` first",
                path.display()
            )));
        }
        Ok(load_flow(&path)?.0)
    }

    fn load_all(&self) -> Result<(PreparedData, Option<VaeModel>, FlowModel)> {
        Ok((PreparedData::build(&self.config)?, self.load_vae()?, self.load_flow()?))
    }

    fn write_loss_log(&self, rel: &str, unit: &str, log: &LossLog) -> Result<()> {
        let mut w = csv::Writer::from_writer(self.artifact(rel)?);
        w.write_record([unit, "loss"])?;
        for (i, v) in log.values().iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    fn read_loss_log(&self, rel: &str) -> Result<LossLog> {
        let mut log = LossLog::new();
        let path = self.path(rel);
        if !path.exists() {
            return Ok(log);
        }
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        for rec in r.records() {
            let rec = rec?;
            let v: f64 = rec[1]
                .parse()
                .map_err(|_| Error::invalid(format!("{rel}: bad loss value `{}`", &rec[1])))?;
            log.push(v);
        }
        Ok(log)
    }

    fn encode(vae: Option<&VaeModel>, x: &Tensor) -> Result<Tensor> {
        match vae {
            Some(v) => Ok(v.encode_batch(x)?.mu),
            None => Ok(x.clone()),
        }
    }

    /// Inverts the held-out evaluation set with and without conditioning and writes
    /// the trajectories at the probe times plus PCA views of the t = 0 latents.
    pub fn invert(&self) -> Result<Inversions> {
        let (data, vae, flow) = self.load_all()?;
        self.invert_with(&data, vae.as_ref(), &flow)
    }

    fn grid(&self) -> Vec<f64> {
        crate::analysis::uniform_grid(self.config.analysis.grid_points - 1)
    }

    fn invert_with(&self, data: &PreparedData, vae: Option<&VaeModel>, flow: &FlowModel) -> Result<Inversions> {
        let eval_idx: Vec<usize> = data.held_out[..self.config.analysis.n_eval].to_vec();
        let z1 = Self::encode(vae, &data.x.select_rows(&eval_idx)?)?;
        let conds = data.conds_of(&eval_idx);
        let conditional = invert_to_base(flow, &z1, &conds, &self.config.integrator)?;
        let unconditional = invert_to_base(flow, &z1, &vec![Conditioning::Null; z1.rows()], &self.config.integrator)?;
        let grid = self.grid();
        write_trajectory_csv(self.artifact("trajectories/conditional.csv")?, &conditional, Some(&grid))?;
        write_trajectory_csv(self.artifact("trajectories/unconditional.csv")?, &unconditional, Some(&grid))?;

        let labels = data.labels_of(&eval_idx);
        let k = self.config.analysis.pca_components.min(z1.cols());
        for (name, z) in [
            ("pca/data.csv", &z1),
            ("pca/conditional_t0.csv", conditional.end()),
            ("pca/unconditional_t0.csv", unconditional.end()),
        ] {
            write_pca_csv(self.artifact(name)?, &pca_project(z, k)?, &labels)?;
        }
        Ok(Inversions {
            eval_idx,
            z1,
            conditional,
            unconditional,
        })
    }

    /// Probe reports and class-structure scores over the inversions.
    pub fn probe(&self) -> Result<(ProbeSummary, StructureSummary)> {
        let (data, vae, flow) = self.load_all()?;
        let inv = self.invert_with(&data, vae.as_ref(), &flow)?;
        self.probe_with(&data, &inv)
    }

    fn probe_with(&self, data: &PreparedData, inv: &Inversions) -> Result<(ProbeSummary, StructureSummary)> {
        let a = &self.config.analysis;
        let idx = &inv.eval_idx;
        let (targets, probe_cfg) = match (&data.rgb, &data.distance) {
            (Some(rgb), _) => (
                ["r", "g", "b"]
                    .iter()
                    .enumerate()
                    .map(|(c, name)| ProbeTarget::new(*name, idx.iter().map(|&i| rgb[i][c]).collect()))
                    .collect::<Vec<_>>(),
                a.probe.clone(),
            ),
            (None, Some(d)) => (
                vec![ProbeTarget::new("d", idx.iter().map(|&i| d[i]).collect())],
                ProbeConfig {
                    features: a.distance_features,
                    ..a.probe.clone()
                },
            ),
            (None, None) => unreachable!("every experiment has probe targets"),
        };
        let grid = self.grid();
        let mut reports = Vec::new();
        for (traj, kind, rel) in [
            (&inv.conditional, FlowKind::Conditional, "probes/conditional.csv"),
            (&inv.unconditional, FlowKind::Unconditional, "probes/unconditional.csv"),
        ] {
            let states: Vec<(f64, &Tensor)> = grid
                .iter()
                .map(|&t| traj.state_at(t).map(|s| (t, s)).ok_or_else(|| Error::invalid(format!("no state at t = {t}"))))
                .collect::<Result<_>>()?;
            let report = probe_states(&states, &targets, &probe_cfg, kind, &mut self.rng(&format!("probe/{}", kind.as_str())))?;
            report.write_csv(self.artifact(rel)?)?;
            reports.push(report);
        }
        let unconditional = reports.pop().unwrap();
        let conditional = reports.pop().unwrap();

        let labels = data.labels_of(idx);
        let score = |z: &Tensor, stage: &str| class_structure_score(z, &labels, &a.classifier, &mut self.rng(stage));
        let structure = StructureSummary {
            data: score(&inv.z1, "structure/data")?,
            unconditional_t0: score(inv.unconditional.end(), "structure/unconditional")?,
            conditional_t0: score(inv.conditional.end(), "structure/conditional")?,
            distance_r2_conditional_t0: data.distance.as_ref().and_then(|_| conditional.r2_at("d", 0.0)),
        };
        Ok((
            ProbeSummary {
                conditional,
                unconditional,
            },
            structure,
        ))
    }

    /// Conditional samples per class and their moments (gaussians2d).
    fn generation_with(&self, data: &PreparedData, flow: &FlowModel) -> Result<Option<Vec<ClassMoments>>> {
        let Some(spec) = &self.config.gaussians else {
            return Ok(None);
        };
        let n = self.config.analysis.n_generate;
        if n < 2 {
            return Ok(None);
        }
        let mut rng = self.rng("generate");
        let mut w = csv::Writer::from_writer(self.artifact("generation.csv")?);
        w.write_record(["sample_id", "class", "x0", "x1"])?;
        let mut moments = Vec::new();
        for class in 0..data.n_classes() {
            let z0 = normal_tensor(&[n, 2], &mut rng);
            let out = generate(flow, &z0, &vec![Conditioning::class(class); n], &self.config.integrator)?.into_end();
            for i in 0..n {
                w.write_record([(class * n + i).to_string(), class.to_string(), out.get(i, 0).to_string(), out.get(i, 1).to_string()])?;
            }
            let (mean, cov) = moments_2d(&out);
            let target = spec.means[class].to_vec();
            let mean_error = ((mean[0] - target[0]).powi(2) + (mean[1] - target[1]).powi(2)).sqrt();
            let target_cov = [spec.cov_scale, 0.0, 0.0, spec.cov_scale];
            let cov_max_abs_error = cov.iter().zip(target_cov).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            moments.push(ClassMoments {
                class,
                target_mean: target,
                mean: mean.to_vec(),
                cov: cov.to_vec(),
                mean_error,
                cov_max_abs_error,
            });
        }
        w.flush()?;
        Ok(Some(moments))
    }

    fn roundtrip_with(&self, data: &PreparedData, vae: Option<&VaeModel>, flow: &FlowModel) -> Result<RoundTripSummary> {
        let rt = &self.config.analysis.roundtrip;
        let idx = &data.held_out[..rt.n_samples];
        let z1 = Self::encode(vae, &data.x.select_rows(idx)?)?;
        let conds = data.conds_of(idx);
        let mut w = csv::Writer::from_writer(self.artifact("roundtrip.csv")?);
        w.write_record(["n_steps", "median_relative_error"])?;
        let mut errors = Vec::new();
        for &n_steps in &rt.steps {
            let cfg = IntegratorConfig {
                method: rt.method,
                n_steps,
            };
            let err = roundtrip_errors(flow, &z1, &conds, &cfg)?;
            let med = median(err);
            w.write_record([n_steps.to_string(), med.to_string()])?;
            errors.push(med);
        }
        w.flush()?;
        Ok(RoundTripSummary {
            n_samples: rt.n_samples,
            steps: rt.steps.clone(),
            median_relative_error: errors,
        })
    }

    /// Class-changing style transfers on held-out samples.
    pub fn transfer(&self) -> Result<TransferSummary> {
        let (data, vae, flow) = self.load_all()?;
        self.transfer_with(&data, vae.as_ref(), &flow)
    }

    fn transfer_with(&self, data: &PreparedData, vae: Option<&VaeModel>, flow: &FlowModel) -> Result<TransferSummary> {
        let a = &self.config.analysis;
        let n_classes = data.n_classes();
        let mut rng = self.rng("transfer");
        // Probes are fitted on (up to 4000) training points in the flow's space.
        let fit_idx: Vec<usize> = data.train.iter().copied().take(4000).collect();
        let z_fit = Self::encode(vae, &data.x.select_rows(&fit_idx)?)?;
        let clf = SoftmaxClassifier::fit(&z_fit, &data.labels_of(&fit_idx), n_classes, &a.classifier)?;
        let b_probe = match &data.rgb {
            Some(rgb) => Some(fit_ridge(&z_fit, &fit_idx.iter().map(|&i| rgb[i][2]).collect::<Vec<_>>(), a.probe.lambda)?),
            None => None,
        };

        let src: Vec<usize> = data.held_out[..a.n_transfer.min(data.held_out.len())].to_vec();
        let targets: Vec<usize> = src
            .iter()
            .map(|&i| (data.labels[i] + 1 + index(n_classes - 1, &mut rng)) % n_classes)
            .collect();
        let cond_src = data.conds_of(&src);
        let cond_tgt: Vec<Conditioning> = cond_src
            .iter()
            .zip(&targets)
            .map(|(c, &t)| match c {
                Conditioning::Label { continuous, .. } => Conditioning::with_continuous(t, continuous.clone()),
                Conditioning::Null => unreachable!("data conditions are never null"),
            })
            .collect();
        let x_src = data.x.select_rows(&src)?;
        let x_new = style_transfer(vae, flow, &x_src, &cond_src, &cond_tgt, &self.config.integrator)?;
        let z_new = Self::encode(vae, &x_new)?;
        let predicted = clf.predict(&z_new)?;
        let b_hat = b_probe.as_ref().map(|p| p.predict(&z_new));

        let mut w = csv::Writer::from_writer(self.artifact("transfer.csv")?);
        w.write_record(["sample_id", "source_class", "target_class", "predicted_class", "b_source", "b_probe"])?;
        for (k, &i) in src.iter().enumerate() {
            let b_src = data.rgb.as_ref().map_or(String::new(), |rgb| rgb[i][2].to_string());
            let b_new = b_hat.as_ref().map_or(String::new(), |b| b[k].to_string());
            w.write_record([
                k.to_string(),
                data.labels[i].to_string(),
                targets[k].to_string(),
                predicted[k].to_string(),
                b_src,
                b_new,
            ])?;
        }
        w.flush()?;

        let b_mae = match (&data.rgb, &b_hat) {
            (Some(rgb), Some(b)) => Some(src.iter().zip(b).map(|(&i, bh)| (bh - rgb[i][2]).abs()).sum::<f64>() / src.len() as f64),
            _ => None,
        };
        Ok(TransferSummary {
            n: src.len(),
            class_accuracy: crate::analysis::accuracy(&predicted, &targets),
            b_mae,
        })
    }

    /// Feature-isolation residuals for source-class samples regenerated under the
    /// reference class. Factor data is drawn noise-free through the training mixing.
    pub fn isolate(&self) -> Result<IsolationSummary> {
        let (data, vae, flow) = self.load_all()?;
        self.isolate_with(&data, vae.as_ref(), &flow)
    }

    fn isolate_with(&self, data: &PreparedData, vae: Option<&VaeModel>, flow: &FlowModel) -> Result<IsolationSummary> {
        let a = &self.config.analysis;
        let (src, refc) = (a.isolation_source_class, a.isolation_reference_class);
        let (x, cond_ref, direction) = match (&data.mixing, &self.config.factors, &self.config.gaussians) {
            (Some(mixing), Some(spec), _) => {
                let mut rng = self.rng("isolate");
                let mut pool = Vec::new();
                while pool.len() < a.n_isolation {
                    let batch = sample_factors_with(mixing, spec, 10 * spec.n_classes, 0.0, &mut rng);
                    pool.extend(batch.into_iter().filter(|s| s.class == src));
                }
                pool.truncate(a.n_isolation);
                let conds = pool.iter().map(|s| Conditioning::with_continuous(refc, vec![s.r, s.g])).collect();
                let dir: Vec<f64> = mixing
                    .class_column(src)
                    .iter()
                    .zip(mixing.class_column(refc))
                    .map(|(p, q)| p - q)
                    .collect();
                (factor_matrix(&pool)?, conds, dir)
            }
            (_, _, Some(spec)) => {
                let idx: Vec<usize> = data.held_out.iter().copied().filter(|&i| data.labels[i] == src).take(a.n_isolation).collect();
                let dir = vec![spec.means[src][0] - spec.means[refc][0], spec.means[src][1] - spec.means[refc][1]];
                (data.x.select_rows(&idx)?, vec![Conditioning::class(refc); idx.len()], dir)
            }
            _ => unreachable!("validated config has one dataset"),
        };
        let report = feature_isolation_residual(vae, flow, &x, &cond_ref, &self.config.integrator)?;
        report.write_csv(self.artifact("isolation.csv")?)?;
        let cos: Vec<f64> = (0..report.len()).map(|i| cosine_similarity(report.residual.row(i), &direction)).collect();
        Ok(IsolationSummary {
            n: cos.len(),
            source_class: src,
            reference_class: refc,
            min_cosine: cos.iter().copied().fold(f64::INFINITY, f64::min),
            median_cosine: median(cos),
        })
    }

    /// Every analysis from saved checkpoints; writes and returns the summary.
    pub fn report(&self) -> Result<Summary> {
        let (data, vae, flow) = self.load_all()?;
        let vae_log = self.read_loss_log("logs/vae_loss.csv")?;
        let flow_log = self.read_loss_log("logs/flow_loss.csv")?;
        let training = TrainingSummary {
            vae_loss_first: vae_log.first(),
            vae_loss_last: vae_log.last(),
            flow_loss_first: flow_log.first(),
            flow_loss_last: flow_log.last(),
            flow_params: flow.param_count(),
        };
        let generation = self.generation_with(&data, &flow)?;
        let inv = self.invert_with(&data, vae.as_ref(), &flow)?;
        let (probes, structure) = self.probe_with(&data, &inv)?;
        drop(inv);
        let roundtrip = self.roundtrip_with(&data, vae.as_ref(), &flow)?;
        let transfer = self.transfer_with(&data, vae.as_ref(), &flow)?;
        let isolation = self.isolate_with(&data, vae.as_ref(), &flow)?;
        let summary = Summary {
            experiment: self.config.experiment,
            seed: self.config.seed,
            config_sha256: self.config_hash.clone(),
            training,
            generation,
            structure,
            probes,
            roundtrip,
            transfer,
            isolation,
        };
        fs::write(self.path("summary.json"), summary.to_json())?;
        Ok(summary)
    }
}

/// `‖z − G(F(z))‖ / ‖z‖` per row, with `F` the inversion and `G` the generation under
/// the same conditions and solver.
pub fn roundtrip_errors(flow: &FlowModel, z1: &Tensor, conds: &[Conditioning], cfg: &IntegratorConfig) -> Result<Vec<f64>> {
    let z0 = invert_to_base(flow, z1, conds, cfg)?.into_end();
    let back = generate(flow, &z0, conds, cfg)?.into_end();
    let diff = back.sub(z1)?;
    Ok((0..z1.rows())
        .map(|i| {
            let num = diff.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let den = z1.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            num / den.max(f64::MIN_POSITIVE)
        })
        .collect())
}

/// Same as [`roundtrip_errors`] for an arbitrary field closure.
pub fn roundtrip_errors_field<F>(mut field: F, z1: &Tensor, cfg: &IntegratorConfig) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let z0 = integrate(&mut field, z1, 1.0, 0.0, cfg)?.into_end();
    let back = integrate(&mut field, &z0, 0.0, 1.0, cfg)?.into_end();
    let diff = back.sub(z1)?;
    Ok((0..z1.rows())
        .map(|i| {
            let num = diff.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let den = z1.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            num / den.max(f64::MIN_POSITIVE)
        })
        .collect())
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn moments_2d(x: &Tensor) -> ([f64; 2], [f64; 4]) {
    let n = x.rows() as f64;
    let m0 = (0..x.rows()).map(|i| x.get(i, 0)).sum::<f64>() / n;
    let m1 = (0..x.rows()).map(|i| x.get(i, 1)).sum::<f64>() / n;
    let mut c = [0.0; 4];
    for i in 0..x.rows() {
        let (a, b) = (x.get(i, 0) - m0, x.get(i, 1) - m1);
        c[0] += a * a;
        c[1] += a * b;
        c[3] += b * b;
    }
    c[2] = c[1];
    ([m0, m1], c.map(|v| v / (n - 1.0)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(Vec::new()).is_nan());
    }

    #[test]
    fn stage_streams_differ_and_repeat() {
        use rand::RngCore;
        let a = stage_rng(1, "vae").next_u64();
        assert_eq!(a, stage_rng(1, "vae").next_u64());
        assert_ne!(a, stage_rng(1, "flow").next_u64());
        assert_ne!(a, stage_rng(2, "vae").next_u64());
    }

    #[test]
    fn moments_of_known_points() {
        let x = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]]).unwrap();
        let (m, c) = moments_2d(&x);
        assert_eq!(m, [0.0, 0.0]);
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-15 && (c[3] - 8.0 / 3.0).abs() < 1e-15 && c[1] == 0.0);
    }
}
