//! Federated rounds: broadcast, parallel local training, per-slice weighted averaging.
//!
//! Each slice is an independent FedAvg stream over the K base stations. Within a round all
//! `K x N` clients train concurrently; aggregation is a barrier and the orchestrator is the only
//! writer of global models and reports, so results do not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, DatasetGrid};
use crate::egl::{self, DivergenceKind, MaskSize, SweepPoint};
use crate::error::{Error, Result};
use crate::explain::{self, AttributionMatrix};
use crate::fairness::{self, ClientData, EpochRecord, TrainConfig};
use crate::model::{self, Matrix, Model};
use crate::FEATURE_NAMES;

const SPLIT_TAG: u64 = 0x5350_4c49;
const INIT_TAG: u64 = 0x494e_4954;

/// Experiment arms. Unconstrained arms run with multiplier radius zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "EGFL-JS")]
    EgflJs,
    #[serde(rename = "EGFL-KL")]
    EgflKl,
    #[serde(rename = "EGFL-unconstrained")]
    EgflUnconstrained,
    #[serde(rename = "FL-constrained")]
    FlConstrained,
    #[serde(rename = "FL-vanilla")]
    FlVanilla,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::EgflJs,
        Variant::EgflKl,
        Variant::EgflUnconstrained,
        Variant::FlConstrained,
        Variant::FlVanilla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EgflJs => "EGFL-JS",
            Variant::EgflKl => "EGFL-KL",
            Variant::EgflUnconstrained => "EGFL-unconstrained",
            Variant::FlConstrained => "FL-constrained",
            Variant::FlVanilla => "FL-vanilla",
        }
    }

    /// Directory name of the variant's artifacts.
    pub fn dir_name(self) -> String {
        self.name().to_ascii_lowercase()
    }

    pub fn divergence(self) -> DivergenceKind {
        match self {
            Variant::EgflJs | Variant::EgflUnconstrained => DivergenceKind::JensenShannon,
            Variant::EgflKl => DivergenceKind::KullbackLeibler,
            Variant::FlConstrained | Variant::FlVanilla => DivergenceKind::None,
        }
    }

    pub fn constrained(self) -> bool {
        matches!(self, Variant::EgflJs | Variant::EgflKl | Variant::FlConstrained)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config {
                key: "variants".into(),
                reason: format!("unknown variant `{s}`"),
            })
    }
}

/// Experiment settings. The text form is flat `key = value` lines with `#` comments; list
/// values are comma-separated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub t: usize,
    pub l: usize,
    /// Informational total user count; not used by training.
    pub users: Option<u64>,
    pub r_lambda: f64,
    pub eta_lambda: f64,
    pub gamma: Vec<f64>,
    pub seed: u64,
    pub variants: Vec<Variant>,
    pub oracle_steps: usize,
    pub oracle_lr: f64,
    pub ig_steps: usize,
    pub divergence_weight: f64,
    pub mu: f64,
    pub hidden: Vec<usize>,
    pub threshold: f64,
    pub test_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 3,
            k: 50,
            d: 1500,
            t: 40,
            l: 40,
            users: Some(15_000),
            r_lambda: 1e-5,
            eta_lambda: 0.12,
            gamma: vec![0.82, 0.85, 0.84],
            seed: 1,
            variants: Variant::ALL.to_vec(),
            oracle_steps: 5,
            oracle_lr: 0.12,
            ig_steps: explain::TRAINING_STEPS,
            divergence_weight: 1.0,
            mu: 1.0,
            hidden: vec![16, 8],
            threshold: 0.5,
            test_fraction: 0.2,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        key: key.into(),
        reason: format!("cannot parse `{value}`"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                reason: format!("line {} is not `key = value`", i + 1),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), i).is_some() {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "given more than once".into(),
                });
            }
            match key {
                "N" => cfg.n = parse_value(key, value)?,
                "K" => cfg.k = parse_value(key, value)?,
                "D_kn" => cfg.d = parse_value(key, value)?,
                "T" => cfg.t = parse_value(key, value)?,
                "L" => cfg.l = parse_value(key, value)?,
                "U" => cfg.users = Some(parse_value(key, value)?),
                "R_lambda" => cfg.r_lambda = parse_value(key, value)?,
                "eta_lambda" => cfg.eta_lambda = parse_value(key, value)?,
                "gamma" => cfg.gamma = parse_list(key, value)?,
                "seed" => cfg.seed = parse_value(key, value)?,
                "variants" => cfg.variants = parse_list(key, value)?,
                "oracle_steps" => cfg.oracle_steps = parse_value(key, value)?,
                "oracle_lr" => cfg.oracle_lr = parse_value(key, value)?,
                "ig_steps" => cfg.ig_steps = parse_value(key, value)?,
                "divergence_weight" => cfg.divergence_weight = parse_value(key, value)?,
                "mu" => cfg.mu = parse_value(key, value)?,
                "hidden" => cfg.hidden = parse_list(key, value)?,
                "threshold" => cfg.threshold = parse_value(key, value)?,
                "test_fraction" => cfg.test_fraction = parse_value(key, value)?,
                other => {
                    return Err(Error::Config {
                        key: other.into(),
                        reason: "unknown key".into(),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("N", self.n.to_string());
        put("K", self.k.to_string());
        put("D_kn", self.d.to_string());
        put("T", self.t.to_string());
        put("L", self.l.to_string());
        if let Some(u) = self.users {
            put("U", u.to_string());
        }
        put("R_lambda", self.r_lambda.to_string());
        put("eta_lambda", self.eta_lambda.to_string());
        put("gamma", join(&self.gamma));
        put("seed", self.seed.to_string());
        put("variants", self.variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(","));
        put("oracle_steps", self.oracle_steps.to_string());
        put("oracle_lr", self.oracle_lr.to_string());
        put("ig_steps", self.ig_steps.to_string());
        put("divergence_weight", self.divergence_weight.to_string());
        put("mu", self.mu.to_string());
        put("hidden", join(&self.hidden));
        put("threshold", self.threshold.to_string());
        put("test_fraction", self.test_fraction.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
        for (key, v) in [("N", self.n), ("K", self.k), ("D_kn", self.d), ("T", self.t), ("L", self.l)] {
            if v == 0 {
                return bad(key, "must be >= 1".into());
            }
        }
        if self.gamma.len() != self.n {
            return bad("gamma", format!("{} values for N = {}", self.gamma.len(), self.n));
        }
        if let Some(g) = self.gamma.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return bad("gamma", format!("{g} outside (0,1)"));
        }
        if !(self.r_lambda.is_finite() && self.r_lambda >= 0.0) {
            return bad("R_lambda", format!("{} must be >= 0", self.r_lambda));
        }
        if !(self.eta_lambda.is_finite() && self.eta_lambda > 0.0) {
            return bad("eta_lambda", format!("{} must be > 0", self.eta_lambda));
        }
        if self.variants.is_empty() {
            return bad("variants", "at least one variant required".into());
        }
        if self.oracle_steps == 0 {
            return bad("oracle_steps", "must be >= 1".into());
        }
        if !(self.oracle_lr.is_finite() && self.oracle_lr > 0.0) {
            return bad("oracle_lr", format!("{} must be > 0", self.oracle_lr));
        }
        if self.ig_steps == 0 {
            return bad("ig_steps", "must be >= 1".into());
        }
        if !(self.divergence_weight.is_finite() && self.divergence_weight >= 0.0) {
            return bad("divergence_weight", "must be >= 0".into());
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return bad("mu", "must be > 0".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be >= 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", format!("{} outside (0,1)", self.threshold));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction", format!("{} outside (0,1)", self.test_fraction));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(FEATURE_NAMES.len())
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect()
    }

    pub fn train_config(&self, variant: Variant, slice: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.l,
            gamma: self.gamma[slice],
            eta_lambda: self.eta_lambda,
            radius: if variant.constrained() { self.r_lambda } else { 0.0 },
            divergence: variant.divergence(),
            divergence_weight: if variant.divergence() == DivergenceKind::None {
                0.0
            } else {
                self.divergence_weight
            },
            oracle_steps: self.oracle_steps,
            oracle_lr: self.oracle_lr,
            ig_steps: self.ig_steps,
            threshold: self.threshold,
        }
    }

    /// Error unless the dataset grid has this config's K, N and D.
    pub fn check_grid(&self, grid: &DatasetGrid) -> Result<()> {
        for (key, want, got) in [("K", self.k, grid.k), ("N", self.n, grid.n), ("D_kn", self.d, grid.d)] {
            if want != got {
                return Err(Error::Config {
                    key: key.into(),
                    reason: format!("config says {want} but the dataset has {got}"),
                });
            }
        }
        Ok(())
    }
}

/// Splits every standardized client dataset; `clients[n][k]`.
pub fn build_clients(grid: &DatasetGrid, cfg: &ExperimentConfig) -> Result<Vec<Vec<ClientData>>> {
    cfg.check_grid(grid)?;
    (0..grid.n)
        .map(|n| {
            (0..grid.k)
                .map(|k| {
                    let data = grid.standardized(k, n);
                    let seed = derive_seed(cfg.seed, &[SPLIT_TAG, k as u64, n as u64]);
                    let (train, test) = data.split(cfg.test_fraction, seed)?;
                    Ok(ClientData {
                        size: data.len(),
                        train,
                        test,
                    })
                })
                .collect()
        })
        .collect()
}

/// Seeded initial global model per slice, shared by every variant.
pub fn initial_models(cfg: &ExperimentConfig) -> Result<Vec<Model>> {
    (0..cfg.n)
        .map(|n| Model::seeded(&cfg.layer_dims(), cfg.mu, derive_seed(cfg.seed, &[INIT_TAG, n as u64])))
        .collect()
}

/// `D_k / sum(D)` for every client.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument("aggregation needs positive sizes".into()));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

/// Parameter-wise mean of `models` weighted by `D_k / sum(D)`.
pub fn aggregate(models: &[Model], sizes: &[usize]) -> Result<Model> {
    if models.len() != sizes.len() {
        return Err(Error::Dimension(format!("{} models vs {} sizes", models.len(), sizes.len())));
    }
    let weights = aggregation_weights(sizes)?;
    let first = &models[0];
    if let Some(bad) = models.iter().position(|m| !first.is_congruent(m)) {
        return Err(Error::ArchitectureMismatch(format!(
            "model {bad} has layers {:?}, expected {:?}",
            models[bad].layer_dims(),
            first.layer_dims()
        )));
    }
    let mut out = first.clone();
    out.parameters_mut().for_each(|p| *p = 0.0);
    for (m, w) in models.iter().zip(&weights) {
        for (acc, p) in out.parameters_mut().zip(m.parameters()) {
            *acc += w * p;
        }
    }
    Ok(out)
}

/// One client's local training log of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientLog {
    pub round: usize,
    pub bs: usize,
    pub slice: usize,
    pub size: usize,
    pub records: Vec<EpochRecord>,
}

impl ClientLog {
    pub fn mean_loss(&self) -> f64 {
        self.records.iter().map(|r| r.loss).sum::<f64>() / self.records.len() as f64
    }
}

/// Evaluation of a global model on one slice's clients; size-weighted means over clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub recall_train: f64,
    pub recall_test: f64,
    /// Jensen-Shannon divergence between test predictions and predictions with the
    /// least-attributed feature masked.
    pub js: f64,
    pub comprehensiveness: f64,
    pub total_variation: f64,
}

/// Per-slice part of a round report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRound {
    pub slice: usize,
    /// Size-weighted mean of the clients' mean local training loss.
    pub loss: f64,
    /// `loss` divided by the largest client loss of round 0.
    pub normalized_loss: f64,
    /// Size-weighted mean over clients of the last-epoch recall violation.
    pub violation: f64,
    pub metrics: SliceMetrics,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub slices: Vec<SliceRound>,
}

/// Result of one round.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub globals: Vec<Model>,
    pub report: RoundReport,
    pub logs: Vec<ClientLog>,
    /// Per-slice normalisation reference (largest client loss of round 0).
    pub reference: Vec<f64>,
}

/// Everything needed to reproduce the masked-prediction pass on one client.
#[derive(Clone, Debug)]
pub struct ClientEvaluation {
    pub p_train: Vec<f64>,
    pub p_test: Vec<f64>,
    pub p_masked: Vec<f64>,
    pub attributions: AttributionMatrix,
}

pub fn evaluate_client(model: &Model, client: &ClientData, ig_steps: usize) -> Result<ClientEvaluation> {
    let test = &client.test.features;
    let attributions = explain::attribution_matrix(model, test, &vec![0.0; test.cols()], ig_steps)?;
    let plan = egl::select_mask(&attributions, MaskSize::Count(1))?;
    let masked = egl::apply_mask(test, &plan)?;
    Ok(ClientEvaluation {
        p_train: model.predict(&client.train.features)?,
        p_test: model.predict(test)?,
        p_masked: egl::masked_predictions(model, &masked)?,
        attributions,
    })
}

fn slice_metrics(clients: &[ClientData], evals: &[ClientEvaluation], threshold: f64) -> Result<SliceMetrics> {
    let weights = aggregation_weights(&clients.iter().map(|c| c.size).collect::<Vec<_>>())?;
    let mut m = SliceMetrics {
        recall_train: 0.0,
        recall_test: 0.0,
        js: 0.0,
        comprehensiveness: 0.0,
        total_variation: 0.0,
    };
    for ((c, e), w) in clients.iter().zip(evals).zip(&weights) {
        m.recall_train += w * fairness::recall(&c.train.labels, &e.p_train, threshold)?;
        m.recall_test += w * fairness::recall(&c.test.labels, &e.p_test, threshold)?;
        m.js += w * egl::js_divergence(&e.p_test, &e.p_masked)?;
        m.comprehensiveness += w * egl::comprehensiveness(&e.p_test, &e.p_masked)?;
        m.total_variation += w * egl::mean_total_variation(&e.p_test, &e.p_masked)?;
    }
    Ok(m)
}

fn tag(bs: usize, slice: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Client {
        bs,
        slice,
        source: Box::new(e),
    }
}

/// Evaluates each slice's global model on every client of that slice.
pub fn evaluate_globals(
    globals: &[Model],
    clients: &[Vec<ClientData>],
    ig_steps: usize,
) -> Result<Vec<Vec<ClientEvaluation>>> {
    let jobs: Vec<(usize, usize)> = (0..clients.len())
        .flat_map(|n| (0..clients[n].len()).map(move |k| (n, k)))
        .collect();
    let flat: Vec<ClientEvaluation> = jobs
        .par_iter()
        .map(|&(n, k)| evaluate_client(&globals[n], &clients[n][k], ig_steps).map_err(tag(k, n)))
        .collect::<Result<_>>()?;
    let mut it = flat.into_iter();
    Ok(clients.iter().map(|c| it.by_ref().take(c.len()).collect()).collect())
}

/// Broadcast, local training on every client in parallel, per-slice aggregation and evaluation.
///
/// `reference` is the per-slice loss normaliser; pass `None` in round 0, where it is computed.
pub fn run_round(
    globals: &[Model],
    clients: &[Vec<ClientData>],
    variant: Variant,
    cfg: &ExperimentConfig,
    round: usize,
    reference: Option<&[f64]>,
) -> Result<RoundOutcome> {
    if globals.len() != clients.len() {
        return Err(Error::Dimension(format!("{} globals for {} slices", globals.len(), clients.len())));
    }
    let jobs: Vec<(usize, usize)> = (0..clients.len())
        .flat_map(|n| (0..clients[n].len()).map(move |k| (n, k)))
        .collect();
    let trained: Vec<(Model, Vec<EpochRecord>)> = jobs
        .par_iter()
        .map(|&(n, k)| {
            fairness::local_train(&globals[n], &clients[n][k], &cfg.train_config(variant, n))
                .map(|(m, log)| (m, log.records))
                .map_err(tag(k, n))
        })
        .collect::<Result<_>>()?;

    let mut trained = trained.into_iter();
    let mut new_globals = Vec::with_capacity(clients.len());
    let mut logs = Vec::with_capacity(jobs.len());
    for (n, slice_clients) in clients.iter().enumerate() {
        let (models, records): (Vec<Model>, Vec<Vec<EpochRecord>>) =
            trained.by_ref().take(slice_clients.len()).unzip();
        let sizes: Vec<usize> = slice_clients.iter().map(|c| c.size).collect();
        new_globals.push(aggregate(&models, &sizes)?);
        for (k, records) in records.into_iter().enumerate() {
            logs.push(ClientLog {
                round,
                bs: k,
                slice: n,
                size: sizes[k],
                records,
            });
        }
    }

    let evals = evaluate_globals(&new_globals, clients, cfg.ig_steps)?;
    let mut slices = Vec::with_capacity(clients.len());
    let mut own_reference = Vec::with_capacity(clients.len());
    for (n, slice_clients) in clients.iter().enumerate() {
        let slice_logs: Vec<&ClientLog> = logs.iter().filter(|l| l.slice == n).collect();
        let sizes: Vec<usize> = slice_clients.iter().map(|c| c.size).collect();
        let weights = aggregation_weights(&sizes)?;
        let loss: f64 = slice_logs.iter().zip(&weights).map(|(l, w)| w * l.mean_loss()).sum();
        let violation: f64 = slice_logs
            .iter()
            .zip(&weights)
            .map(|(l, w)| w * l.records.last().map_or(0.0, |r| r.phi))
            .sum();
        own_reference.push(slice_logs.iter().map(|l| l.mean_loss()).fold(f64::NEG_INFINITY, f64::max));
        let norm = reference.map_or(own_reference[n], |r| r[n]);
        slices.push(SliceRound {
            slice: n,
            loss,
            normalized_loss: loss / norm,
            violation,
            metrics: slice_metrics(slice_clients, &evals[n], cfg.threshold)?,
            weights,
        });
    }
    Ok(RoundOutcome {
        globals: new_globals,
        report: RoundReport { round, slices },
        logs,
        reference: reference.map_or(own_reference, <[f64]>::to_vec),
    })
}

/// Post-training evaluation of one slice, pooled over its clients' test splits.
#[derive(Clone, Debug)]
pub struct SliceFinal {
    pub slice: usize,
    pub gamma: f64,
    pub metrics: SliceMetrics,
    pub sweep: Vec<SweepPoint>,
    /// Client index, label, prediction and masked prediction of every pooled test sample.
    pub predictions: Vec<(usize, u8, f64, f64)>,
    pub attributions: Matrix,
}

/// Full run of one variant.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub radius: f64,
    pub reports: Vec<RoundReport>,
    pub logs: Vec<ClientLog>,
    pub models: Vec<Model>,
    pub finals: Vec<SliceFinal>,
}

fn finalize_slice(
    n: usize,
    model: &Model,
    clients: &[ClientData],
    evals: Vec<ClientEvaluation>,
    cfg: &ExperimentConfig,
) -> Result<SliceFinal> {
    let metrics = slice_metrics(clients, &evals, cfg.threshold)?;
    let rows: usize = clients.iter().map(|c| c.test.len()).sum();
    let q = FEATURE_NAMES.len();
    let mut pooled = Vec::with_capacity(rows * q);
    let mut attr = Vec::with_capacity(rows * q);
    let mut predictions = Vec::with_capacity(rows);
    for (k, (c, e)) in clients.iter().zip(&evals).enumerate() {
        pooled.extend_from_slice(c.test.features.as_slice());
        attr.extend_from_slice(e.attributions.values.as_slice());
        for i in 0..c.test.len() {
            predictions.push((k, c.test.labels[i], e.p_test[i], e.p_masked[i]));
        }
    }
    let pooled = Matrix::new(rows, q, pooled)?;
    let attributions = AttributionMatrix {
        values: Matrix::new(rows, q, attr)?,
        baseline: vec![0.0; q],
        steps: cfg.ig_steps,
    };
    let sweep = egl::comprehensiveness_sweep(model, &pooled, &attributions)?;
    Ok(SliceFinal {
        slice: n,
        gamma: cfg.gamma[n],
        metrics,
        sweep,
        predictions,
        attributions: attributions.values,
    })
}

/// Runs `cfg.t` rounds of one variant from the shared initial models.
pub fn run_variant(clients: &[Vec<ClientData>], variant: Variant, cfg: &ExperimentConfig) -> Result<VariantRun> {
    cfg.validate()?;
    let mut globals = initial_models(cfg)?;
    let mut reports = Vec::with_capacity(cfg.t);
    let mut logs = Vec::new();
    let mut reference: Option<Vec<f64>> = None;
    for round in 0..cfg.t {
        let out = run_round(&globals, clients, variant, cfg, round, reference.as_deref())?;
        log::info!(
            "{} round {}/{}: {}",
            variant.name(),
            round + 1,
            cfg.t,
            out.report
                .slices
                .iter()
                .map(|s| format!("loss {:.4} recall {:.3}", s.normalized_loss, s.metrics.recall_train))
                .collect::<Vec<_>>()
                .join(" | ")
        );
        globals = out.globals;
        reports.push(out.report);
        logs.extend(out.logs);
        reference = Some(out.reference);
    }
    let evals = evaluate_globals(&globals, clients, cfg.ig_steps)?;
    let finals = evals
        .into_iter()
        .enumerate()
        .map(|(n, e)| finalize_slice(n, &globals[n], &clients[n], e, cfg))
        .collect::<Result<_>>()?;
    Ok(VariantRun {
        variant,
        radius: if variant.constrained() { cfg.r_lambda } else { 0.0 },
        reports,
        logs,
        models: globals,
        finals,
    })
}

/// Runs every configured variant on the same clients.
pub fn run_experiment(grid: &DatasetGrid, cfg: &ExperimentConfig) -> Result<Vec<VariantRun>> {
    let clients = build_clients(grid, cfg)?;
    cfg.variants.iter().map(|&v| run_variant(&clients, v, cfg)).collect()
}

/// Summary written to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: Variant,
    pub radius: f64,
    pub rounds: usize,
    pub slices: Vec<SliceSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub slice: usize,
    pub gamma: f64,
    #[serde(flatten)]
    pub metrics: SliceMetrics,
    pub sweep: Vec<SweepPoint>,
}

impl VariantRun {
    pub fn metrics(&self) -> VariantMetrics {
        VariantMetrics {
            variant: self.variant,
            radius: self.radius,
            rounds: self.reports.len(),
            slices: self
                .finals
                .iter()
                .map(|f| SliceSummary {
                    slice: f.slice,
                    gamma: f.gamma,
                    metrics: f.metrics.clone(),
                    sweep: f.sweep.clone(),
                })
                .collect(),
        }
    }

    /// Writes every artifact of this variant into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let models_dir = dir.join("models");
        fs::create_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
        let name = self.variant.name();

        let mut w = csv_writer(&dir.join(ROUND_REPORTS))?;
        w.write_record([
            "round",
            "slice",
            "loss",
            "normalized_loss",
            "recall_train",
            "recall_test",
            "js",
            "comprehensiveness",
            "total_variation",
            "violation",
            "weights",
        ])?;
        for r in &self.reports {
            for s in &r.slices {
                let m = &s.metrics;
                w.write_record([
                    r.round.to_string(),
                    s.slice.to_string(),
                    s.loss.to_string(),
                    s.normalized_loss.to_string(),
                    m.recall_train.to_string(),
                    m.recall_test.to_string(),
                    m.js.to_string(),
                    m.comprehensiveness.to_string(),
                    m.total_variation.to_string(),
                    s.violation.to_string(),
                    s.weights.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
                ])?;
            }
        }
        flush(w, &dir.join(ROUND_REPORTS))?;

        let path = dir.join(TRAIN_LOGS);
        let mut text = String::new();
        for l in &self.logs {
            text.push_str(&serde_json::to_string(l)?);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

        for (n, m) in self.models.iter().enumerate() {
            let path = models_dir.join(format!("slice{n}.json"));
            fs::write(&path, m.to_json()? + "\n").map_err(|e| Error::io(&path, e))?;
        }

        let path = dir.join(METRICS);
        fs::write(&path, serde_json::to_string_pretty(&self.metrics())? + "\n").map_err(|e| Error::io(&path, e))?;

        let path = dir.join(SWEEP);
        let mut w = csv_writer(&path)?;
        w.write_record(["slice", "variant", "masked", "p_percent", "comprehensiveness"])?;
        for f in &self.finals {
            for p in &f.sweep {
                w.write_record([
                    f.slice.to_string(),
                    name.to_string(),
                    p.masked.to_string(),
                    p.p_percent.to_string(),
                    p.comprehensiveness.to_string(),
                ])?;
            }
        }
        flush(w, &path)?;

        for f in &self.finals {
            let path = dir.join(format!("attributions_slice{}.csv", f.slice));
            let attr = AttributionMatrix {
                values: f.attributions.clone(),
                baseline: vec![0.0; f.attributions.cols()],
                steps: 0,
            };
            attr.save_csv(&path, &FEATURE_NAMES)?;

            let path = dir.join(format!("predictions_slice{}.csv", f.slice));
            let mut w = csv_writer(&path)?;
            w.write_record(["bs", "label", "y_hat", "p_masked"])?;
            for (k, y, p, q) in &f.predictions {
                w.write_record([k.to_string(), y.to_string(), p.to_string(), q.to_string()])?;
            }
            flush(w, &path)?;
        }
        Ok(())
    }
}

pub const ROUND_REPORTS: &str = "round_reports.csv";
pub const TRAIN_LOGS: &str = "trainlogs.jsonl";
pub const METRICS: &str = "metrics.json";
pub const SWEEP: &str = "sweep.csv";

fn csv_writer(path: &Path) -> Result<csv::Writer<std::io::BufWriter<fs::File>>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(std::io::BufWriter::new(file)))
}

fn flush(w: csv::Writer<std::io::BufWriter<fs::File>>, path: &Path) -> Result<()> {
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

/// Reads `trainlogs.jsonl`.
pub fn read_train_logs(path: &Path) -> Result<Vec<ClientLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<VariantMetrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Oracle error `delta` measured on the convex self-test problem.
pub fn oracle_error(cfg: &ExperimentConfig) -> Result<f64> {
    model::measure_oracle_gap(cfg.oracle_steps, cfg.oracle_lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> Model {
        Model::from_parameters(&[1, 1], vec![vec![w]], vec![vec![0.0]], 1.0).unwrap()
    }

    #[test]
    fn weighted_mean_of_two() {
        let g = aggregate(&[single(1.0), single(2.0)], &[100, 300]).unwrap();
        assert_eq!(g.layers()[0].weights[0], 1.75);
    }

    #[test]
    fn aggregate_rejects_mismatch() {
        let other = Model::zeros(&[2, 1], 1.0).unwrap();
        assert!(matches!(
            aggregate(&[single(1.0), other], &[1, 1]),
            Err(Error::ArchitectureMismatch(_))
        ));
        assert!(aggregate(&[single(1.0)], &[0]).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        let w = aggregation_weights(&[3, 7, 11, 500]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = ExperimentConfig::parse("gamma = 0.8, 1.2, 0.8\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "gamma"), "{err}");
        let err = ExperimentConfig::parse("K = 0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "K"));
        let err = ExperimentConfig::parse("bogus = 1\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "bogus"));
        let err = ExperimentConfig::parse("variants = EGFL-XX\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "variants"));
    }

    #[test]
    fn variant_roles() {
        assert_eq!(Variant::FlVanilla.divergence(), DivergenceKind::None);
        assert!(!Variant::EgflUnconstrained.constrained());
        assert_eq!("egfl-kl".parse::<Variant>().unwrap(), Variant::EgflKl);
        let cfg = ExperimentConfig {
            r_lambda: 3.0,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.train_config(Variant::FlVanilla, 0).radius, 0.0);
        assert_eq!(cfg.train_config(Variant::FlVanilla, 0).divergence_weight, 0.0);
        assert_eq!(cfg.train_config(Variant::FlConstrained, 0).radius, 3.0);
    }
}
