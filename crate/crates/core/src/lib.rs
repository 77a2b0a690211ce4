//! Explanation-guided fair federated learning for per-slice RAN traffic-drop prediction.
//!
//! Each (base station, slice) pair is a federated client holding a small tabular dataset of
//! PRB allocation, latency and channel quality, labelled with traffic-drop events. Local training
//! couples three signals:
//!
//! - binary cross-entropy on the drop labels,
//! - a divergence between the predictions on the original inputs and on inputs whose
//!   least-attributed feature (by integrated gradients) is zero-padded,
//! - a recall floor enforced through a proxy-Lagrangian two-player game.
//!
//! Local models are merged per slice with dataset-size-weighted averaging.
//!
//! Module map:
//!
//! - [`model`]: feedforward classifier, analytic gradients, gradient-descent oracle.
//! - [`explain`]: integrated-gradients attributions.
//! - [`egl`]: feature masking, divergences, comprehensiveness.
//! - [`fairness`]: recall, its surrogate, the multiplier game and the local training loop.
//! - [`federation`]: rounds, aggregation, experiment variants and run artifacts.
//! - [`datagen`]: synthetic non-IID slice datasets.
//! - [`theory`]: convergence-probability bound and its empirical inputs.
//! - [`report`]: tabular figure data derived from a completed run.

pub mod datagen;
pub mod egl;
pub mod error;
pub mod explain;
pub mod fairness;
pub mod federation;
pub mod model;
pub mod report;
pub mod theory;

pub use datagen::{DatasetGrid, SliceKind, SliceProfile, Standardization};
pub use egl::{DivergenceKind, MaskPlan, MaskSize};
pub use error::{Error, Result};
pub use explain::AttributionMatrix;
pub use fairness::{GameState, TrainConfig, TrainLog};
pub use federation::{ExperimentConfig, RoundReport, Variant};
pub use model::{Gradient, LocalDataset, Matrix, Model, Objective};
pub use theory::BoundInputs;

/// Lower/upper clamp applied to probabilities before logs are taken.
pub const PROB_EPS: f64 = 1e-7;

/// Feature names in column order.
pub const FEATURE_NAMES: [&str; 3] = ["prb", "latency_ms", "channel_quality_db"];

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}
