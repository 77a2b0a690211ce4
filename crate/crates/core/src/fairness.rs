//! Recall constraint and the proxy-Lagrangian game run inside every local training call.
//!
//! The weight player minimises cross-entropy plus the divergence term plus
//! `multiplier * (gamma - s(W))`, where `s` is the smooth recall surrogate (mean predicted
//! probability over positives). The multiplier player never sees the surrogate: it performs
//! exponentiated gradient ascent on a column-stochastic matrix `A` using the violation of the
//! true, thresholded recall, and its mixed strategy `lambda` is the stationary vector of `A`.
//!
//! The surrogate enters in violation form `gamma - s` so that minimisation raises recall.

use serde::{Deserialize, Serialize};

use crate::egl::{self, DivergenceKind, MaskSize};
use crate::error::{Error, Result};
use crate::explain;
use crate::model::{self, LocalDataset, MaskedBatch, Matrix, Model, Objective};

/// Train/test split of one client's data. Training terms use `train`; attributions, masks and
/// the divergence term use the `test` (tester) batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub train: LocalDataset,
    pub test: LocalDataset,
    /// Size of the full local dataset, used as the aggregation weight.
    pub size: usize,
}

fn count_positives(labels: &[u8]) -> Result<usize> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 {
        return Err(Error::UndefinedRecall);
    }
    Ok(pos)
}

fn check_lengths(labels: &[u8], probs: &[f64]) -> Result<()> {
    if labels.len() != probs.len() {
        return Err(Error::Dimension(format!(
            "{} labels vs {} predictions",
            labels.len(),
            probs.len()
        )));
    }
    Ok(())
}

/// `TP / (TP + FN)` with a positive prediction iff `prob >= threshold`.
pub fn recall(labels: &[u8], probs: &[f64], threshold: f64) -> Result<f64> {
    check_lengths(labels, probs)?;
    let pos = count_positives(labels)?;
    let tp = labels
        .iter()
        .zip(probs)
        .filter(|(&y, &p)| y == 1 && p >= threshold)
        .count();
    Ok(tp as f64 / pos as f64)
}

/// Smooth recall surrogate `s` and its violation `psi = gamma - s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallSurrogate {
    pub value: f64,
    pub violation: f64,
}

pub fn recall_surrogate(labels: &[u8], probs: &[f64], gamma: f64) -> Result<RecallSurrogate> {
    check_lengths(labels, probs)?;
    let pos = count_positives(labels)?;
    let sum: f64 = labels
        .iter()
        .zip(probs)
        .filter(|(&y, _)| y == 1)
        .map(|(_, &p)| p.min(1.0))
        .sum();
    let value = sum / pos as f64;
    Ok(RecallSurrogate {
        value,
        violation: gamma - value,
    })
}

/// `phi = gamma - recall`; positive means the recall floor is violated.
pub fn constraint_violation(labels: &[u8], probs: &[f64], gamma: f64, threshold: f64) -> Result<f64> {
    Ok(gamma - recall(labels, probs, threshold)?)
}

const STOCHASTIC_TOL: f64 = 1e-9;
const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITER: usize = 10_000;

fn check_stochastic(a: &Matrix) -> Result<()> {
    if a.rows() != a.cols() || a.rows() == 0 {
        return Err(Error::NonStochastic(format!("{}x{} is not square", a.rows(), a.cols())));
    }
    if a.as_slice().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::NonStochastic("negative or non-finite entry".into()));
    }
    for j in 0..a.cols() {
        let s: f64 = (0..a.rows()).map(|i| a.row(i)[j]).sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NonStochastic(format!("column {j} sums to {s}")));
        }
    }
    Ok(())
}

/// Stationary vector of a column-stochastic matrix (`A v = v`, `v` on the simplex), by power
/// iteration from the uniform vector.
///
/// When the unit eigenvalue is repeated (e.g. the identity) the uniform start is already a
/// fixed point and is returned.
pub fn lambda_from_matrix(a: &Matrix) -> Result<Vec<f64>> {
    check_stochastic(a)?;
    let n = a.rows();
    let mut v = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..POWER_MAX_ITER {
        for (i, slot) in next.iter_mut().enumerate() {
            *slot = a.row(i).iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let diff = v
            .iter()
            .zip(&next)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if diff < POWER_TOL {
            break;
        }
    }
    Ok(v)
}

/// Exponentiated gradient ascent on `A`: row `m` is scaled by `exp(eta * grad[m])`, then every
/// column is renormalised to sum to one. `grad[0]` belongs to the objective row, and is zero for
/// the multiplier Lagrangian `lambda . phi`.
pub fn update_matrix(a: &Matrix, grad: &[f64], eta: f64) -> Result<Matrix> {
    if grad.len() != a.rows() || a.rows() != a.cols() {
        return Err(Error::Dimension(format!(
            "gradient of length {} for {}x{} matrix",
            grad.len(),
            a.rows(),
            a.cols()
        )));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidArgument(format!("ascent step {eta} must be positive")));
    }
    let n = a.rows();
    let mut out = a.clone();
    for (i, g) in grad.iter().enumerate() {
        let factor = (eta * g).exp();
        out.row_mut(i).iter_mut().for_each(|x| *x *= factor);
    }
    for j in 0..n {
        let s: f64 = (0..n).map(|i| out.row(i)[j]).sum();
        for i in 0..n {
            out.row_mut(i)[j] /= s;
        }
    }
    if out.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix update produced non-finite entries".into()));
    }
    Ok(out)
}

/// Multiplier player's state.
#[derive(Clone, Debug, PartialEq)]
pub struct GameState {
    pub matrix: Matrix,
    pub lambda: Vec<f64>,
    pub radius: f64,
    pub eta: f64,
}

impl GameState {
    /// `constraints + 1` square matrix with every entry `1 / (constraints + 1)`.
    pub fn new(constraints: usize, radius: f64, eta: f64) -> Result<Self> {
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(Error::InvalidArgument(format!("multiplier radius {radius} must be >= 0")));
        }
        let n = constraints + 1;
        let matrix = Matrix::new(n, n, vec![1.0 / n as f64; n * n])?;
        Ok(Self {
            lambda: vec![1.0 / n as f64; n],
            matrix,
            radius,
            eta,
        })
    }

    pub fn constraints(&self) -> usize {
        self.matrix.rows() - 1
    }

    /// Recomputes `lambda` from the current matrix.
    pub fn refresh_lambda(&mut self) -> Result<&[f64]> {
        self.lambda = lambda_from_matrix(&self.matrix)?;
        Ok(&self.lambda)
    }

    /// Multipliers scaled into the radius ball: `R * lambda_m / sum(lambda)` for `m >= 1`.
    pub fn effective_multipliers(&self) -> Vec<f64> {
        let total: f64 = self.lambda.iter().sum();
        self.lambda[1..].iter().map(|l| self.radius * l / total).collect()
    }

    /// One ascent step on the observed constraint violations.
    pub fn ascend(&mut self, violations: &[f64]) -> Result<()> {
        if violations.len() != self.constraints() {
            return Err(Error::Dimension(format!(
                "{} violations for {} constraints",
                violations.len(),
                self.constraints()
            )));
        }
        let mut grad = Vec::with_capacity(violations.len() + 1);
        grad.push(0.0);
        grad.extend_from_slice(violations);
        self.matrix = update_matrix(&self.matrix, &grad, self.eta)?;
        Ok(())
    }
}

/// Local training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub gamma: f64,
    pub eta_lambda: f64,
    pub radius: f64,
    pub divergence: DivergenceKind,
    pub divergence_weight: f64,
    pub oracle_steps: usize,
    pub oracle_lr: f64,
    pub ig_steps: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            gamma: 0.85,
            eta_lambda: 0.12,
            radius: 1e-5,
            divergence: DivergenceKind::JensenShannon,
            divergence_weight: 1.0,
            oracle_steps: 5,
            oracle_lr: 0.12,
            ig_steps: explain::TRAINING_STEPS,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("local epochs must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {} outside (0,1)", self.gamma)));
        }
        if self.oracle_steps == 0 || self.ig_steps == 0 {
            return Err(Error::InvalidArgument("oracle and IG step counts must be >= 1".into()));
        }
        Ok(())
    }

    fn uses_divergence(&self) -> bool {
        self.divergence != DivergenceKind::None && self.divergence_weight != 0.0
    }
}

/// One local epoch of the game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Cross-entropy plus weighted divergence after the oracle step.
    pub loss: f64,
    pub bce: f64,
    /// Jensen-Shannon divergence between tester predictions and masked predictions; absent when
    /// the loop does not mask.
    pub js: Option<f64>,
    /// Value of the configured divergence term.
    pub divergence: f64,
    /// Thresholded recall on the training split.
    pub recall: f64,
    pub psi: f64,
    pub phi: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub multiplier: f64,
    /// Running maximum of the oracle's gradient norms.
    pub grad_norm_max: f64,
    pub oracle_monotone_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn grad_norm_max(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.grad_norm_max)
    }

    pub fn mean_loss(&self) -> f64 {
        if self.records.is_empty() {
            return f64::NAN;
        }
        self.records.iter().map(|r| r.loss).sum::<f64>() / self.records.len() as f64
    }
}

/// Masked tester batch for the current weights: integrated gradients from the zero baseline,
/// then the least-attributed feature of each sample zero-padded.
pub fn masked_tester(model: &Model, test: &Matrix, ig_steps: usize, size: MaskSize) -> Result<Matrix> {
    let baseline = vec![0.0; test.cols()];
    let attr = explain::attribution_matrix(model, test, &baseline, ig_steps)?;
    let plan = egl::select_mask(&attr, size)?;
    egl::apply_mask(test, &plan)
}

/// Runs `cfg.epochs` rounds of the two-player game from `model` and returns the average of the
/// per-epoch oracle outputs together with the epoch log.
pub fn local_train(model: &Model, data: &ClientData, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    count_positives(&data.train.labels)?;
    let mut game = GameState::new(1, cfg.radius, cfg.eta_lambda)?;
    let mut current = model.clone();
    let mut sum: Option<Model> = None;
    let mut log = TrainLog::default();
    let mut grad_norm_max: f64 = 0.0;

    for epoch in 0..cfg.epochs {
        let masked = if cfg.uses_divergence() {
            Some(masked_tester(&current, &data.test.features, cfg.ig_steps, MaskSize::Count(1))?)
        } else {
            None
        };
        game.refresh_lambda()?;
        let multiplier = game.effective_multipliers()[0];
        let objective = Objective {
            bce_weight: 1.0,
            divergence: cfg.divergence,
            divergence_weight: cfg.divergence_weight,
            tester: masked.as_ref().map(|m| MaskedBatch {
                original: &data.test.features,
                masked: m,
            }),
            surrogate_weight: multiplier,
            gamma: cfg.gamma,
        };
        let run = model::oracle_minimize(&current, &objective, &data.train, cfg.oracle_steps, cfg.oracle_lr)?;
        grad_norm_max = grad_norm_max.max(run.max_grad_norm);

        let probs = run.model.predict(&data.train.features)?;
        let rec = recall(&data.train.labels, &probs, cfg.threshold)?;
        let surrogate = recall_surrogate(&data.train.labels, &probs, cfg.gamma)?;
        let phi = cfg.gamma - rec;
        let js = match &masked {
            Some(m) => {
                let p = run.model.predict(&data.test.features)?;
                let q = run.model.predict(m)?;
                Some(egl::js_divergence(&p, &q)?)
            }
            None => None,
        };
        log.records.push(EpochRecord {
            epoch,
            loss: run.last.bce + cfg.divergence_weight * run.last.divergence,
            bce: run.last.bce,
            js,
            divergence: run.last.divergence,
            recall: rec,
            psi: surrogate.violation,
            phi,
            lambda0: game.lambda[0],
            lambda1: game.lambda[1],
            multiplier,
            grad_norm_max,
            oracle_monotone_fraction: run.monotone_fraction,
        });
        game.ascend(&[phi])?;

        match sum.as_mut() {
            None => sum = Some(run.model.clone()),
            Some(acc) => {
                for (a, w) in acc.parameters_mut().zip(run.model.parameters()) {
                    *a += w;
                }
            }
        }
        current = run.model;
    }

    let mut average = sum.expect("at least one epoch");
    let l = cfg.epochs as f64;
    average.parameters_mut().for_each(|w| *w /= l);
    Ok((average, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_counts() {
        let y = [1, 1, 0, 1];
        let r = recall(&y, &[0.9, 0.2, 0.1, 0.8], 0.5).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall(&y, &[1.0, 1.0, 0.0, 1.0], 0.5).unwrap(), 1.0);
        assert_eq!(recall(&y, &[0.0; 4], 0.5).unwrap(), 0.0);
        assert!(matches!(recall(&[0, 0], &[0.3, 0.9], 0.5), Err(Error::UndefinedRecall)));
    }

    #[test]
    fn surrogate_values() {
        let s = recall_surrogate(&[1, 1, 0], &[0.9, 0.4, 0.8], 0.85).unwrap();
        assert!((s.value - 0.65).abs() < 1e-12);
        assert!((s.violation - 0.20).abs() < 1e-12);
        let s = recall_surrogate(&[1, 1], &[1.0, 1.0], 0.85).unwrap();
        assert_eq!(s.value, 1.0);
        assert!((s.violation + 0.15).abs() < 1e-12);
        let s = recall_surrogate(&[1, 0], &[0.5, 0.1], 0.5).unwrap();
        assert_eq!(s.violation, 0.0);
    }

    #[test]
    fn violation_values() {
        let y = [1u8; 10];
        let mut p = [1.0; 10];
        p[0] = 0.0;
        assert!((constraint_violation(&y, &p, 0.85, 0.5).unwrap() + 0.05).abs() < 1e-12);
        let p: Vec<f64> = (0..10).map(|i| if i < 5 { 1.0 } else { 0.0 }).collect();
        assert!((constraint_violation(&y, &p, 0.85, 0.5).unwrap() - 0.35).abs() < 1e-12);
        assert_eq!(constraint_violation(&y[..2], &[1.0, 0.0], 0.5, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn stationary_vectors() {
        let half = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert_eq!(lambda_from_matrix(&half).unwrap(), vec![0.5, 0.5]);
        let a = Matrix::from_rows(&[[0.25, 1.0 / 3.0], [0.75, 2.0 / 3.0]]).unwrap();
        let v = lambda_from_matrix(&a).unwrap();
        assert!((v[0] - 4.0 / 13.0).abs() < 1e-9 && (v[1] - 9.0 / 13.0).abs() < 1e-9);
        let id = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(lambda_from_matrix(&id).unwrap(), vec![0.5, 0.5]);
        let bad = Matrix::from_rows(&[[0.5, 0.5], [0.6, 0.5]]).unwrap();
        assert!(matches!(lambda_from_matrix(&bad), Err(Error::NonStochastic(_))));
    }

    #[test]
    fn matrix_update_rules() {
        let game = GameState::new(1, 1.0, 0.12).unwrap();
        assert_eq!(update_matrix(&game.matrix, &[0.0, 0.0], 0.12).unwrap(), game.matrix);
        let up = update_matrix(&game.matrix, &[0.0, 0.3], 0.12).unwrap();
        for j in 0..2 {
            assert!(up.row(1)[j] > game.matrix.row(1)[j]);
            assert!((up.row(0)[j] + up.row(1)[j] - 1.0).abs() < 1e-12);
        }
        assert!(update_matrix(&game.matrix, &[0.0, 0.3], 0.0).is_err());
        assert!(update_matrix(&game.matrix, &[0.3], 0.1).is_err());
    }

    #[test]
    fn multiplier_stays_in_radius() {
        let mut game = GameState::new(1, 2.5, 0.5).unwrap();
        for step in 0..50 {
            game.ascend(&[if step % 3 == 0 { -0.4 } else { 0.9 }]).unwrap();
            game.refresh_lambda().unwrap();
            assert!(game.effective_multipliers()[0] <= 2.5);
            assert!((game.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
