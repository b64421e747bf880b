//! Evaluation tools: ridge probes along trajectories, linear class separability,
//! PCA, style transfer and feature isolation.

mod classify;
mod pca;
mod probe;
mod transfer;

pub use classify::{accuracy, class_structure_score, LogisticConfig, SoftmaxClassifier};
pub use pca::{pca_project, write_pca_csv, PcaProjection};
pub use probe::{
    fit_ridge, linear_probe_r2, probe_states, r2_score, uniform_grid, FeatureMap, FlowKind, ProbeConfig, ProbeCurve,
    ProbeReport, ProbeTarget, RidgeModel,
};
pub use transfer::{cosine_similarity, feature_isolation_residual, style_transfer, ResidualReport};
