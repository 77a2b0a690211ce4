//! Explanation-guided pieces of the local loop: least-attributed feature masking, masked
//! predictions, Bernoulli divergences between original and masked predictions, and the
//! comprehensiveness faithfulness score.
//!
//! Every prediction is read as a Bernoulli distribution over {drop, no drop}; batch divergences
//! are the mean of the per-sample divergences, in nats.

use serde::{Deserialize, Serialize};

use crate::clamp_prob;
use crate::error::{Error, Result};
use crate::explain::AttributionMatrix;
use crate::model::{Matrix, Model};

/// Divergence between original and masked predictions used in the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DivergenceKind {
    #[serde(rename = "js")]
    JensenShannon,
    #[serde(rename = "kl")]
    KullbackLeibler,
    #[serde(rename = "none")]
    None,
}

impl DivergenceKind {
    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::JensenShannon => "js",
            DivergenceKind::KullbackLeibler => "kl",
            DivergenceKind::None => "none",
        }
    }
}

impl std::str::FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "js" => Ok(Self::JensenShannon),
            "kl" => Ok(Self::KullbackLeibler),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidArgument(format!("unknown divergence `{other}`"))),
        }
    }
}

/// How many features to mask per sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskSize {
    Count(usize),
    /// `max(1, ceil(p * Q))` features.
    Fraction(f64),
}

impl MaskSize {
    pub fn resolve(self, features: usize) -> Result<usize> {
        let count = match self {
            MaskSize::Count(c) => c,
            MaskSize::Fraction(p) => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!("mask fraction {p} outside [0,1]")));
                }
                // absorb representation error so that e.g. 2/3 * 3 resolves to 2
                ((p * features as f64 - 1e-9).ceil() as usize).max(1)
            }
        };
        if count >= features {
            return Err(Error::InvalidArgument(format!(
                "cannot mask {count} of {features} features"
            )));
        }
        Ok(count)
    }
}

/// Feature indices to zero-pad, per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub features: usize,
    pub masked_indices: Vec<Vec<usize>>,
}

impl MaskPlan {
    /// A plan that masks nothing.
    pub fn empty(rows: usize, features: usize) -> Self {
        Self {
            features,
            masked_indices: vec![Vec::new(); rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.masked_indices.len()
    }
}

/// Per sample, the `size` features with smallest |attribution|; ties go to the lower index.
pub fn select_mask(attr: &AttributionMatrix, size: MaskSize) -> Result<MaskPlan> {
    if attr.rows() == 0 {
        return Err(Error::InvalidArgument("empty attribution matrix".into()));
    }
    let q = attr.features();
    let count = size.resolve(q)?;
    let mut order: Vec<usize> = Vec::with_capacity(q);
    let masked_indices = (0..attr.rows())
        .map(|i| {
            let row = attr.row(i);
            order.clear();
            order.extend(0..q);
            order.sort_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs()).then(a.cmp(&b)));
            let mut picked = order[..count].to_vec();
            picked.sort_unstable();
            picked
        })
        .collect();
    Ok(MaskPlan {
        features: q,
        masked_indices,
    })
}

/// Copy of `batch` with the planned entries set to exactly zero.
pub fn apply_mask(batch: &Matrix, plan: &MaskPlan) -> Result<Matrix> {
    if plan.rows() != batch.rows() || plan.features != batch.cols() {
        return Err(Error::Dimension(format!(
            "plan {}x{} vs batch {}x{}",
            plan.rows(),
            plan.features,
            batch.rows(),
            batch.cols()
        )));
    }
    let mut out = batch.clone();
    for (i, idx) in plan.masked_indices.iter().enumerate() {
        let row = out.row_mut(i);
        for &j in idx {
            if j >= row.len() {
                return Err(Error::Dimension(format!("mask index {j} out of range")));
            }
            row[j] = 0.0;
        }
    }
    Ok(out)
}

/// Model output on a masked batch.
pub fn masked_predictions(model: &Model, masked: &Matrix) -> Result<Vec<f64>> {
    model.predict(masked)
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("lengths {} and {}", p.len(), q.len())));
    }
    if p.is_empty() {
        return Err(Error::InvalidArgument("empty probability vectors".into()));
    }
    Ok(())
}

/// `KL(B(p) || B(q))` for already clamped probabilities.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

/// Jensen-Shannon divergence of two Bernoulli distributions (clamped inputs).
/// Symmetric bit for bit under operand swap.
pub fn bernoulli_js(p: f64, q: f64) -> f64 {
    let m = 0.5 * (p + q);
    0.5 * bernoulli_kl(p, m) + 0.5 * bernoulli_kl(q, m)
}

/// Value and partial derivatives `(D, dD/dp, dD/dq)` of the per-sample divergence.
pub fn divergence_partials(kind: DivergenceKind, p: f64, q: f64) -> (f64, f64, f64) {
    match kind {
        DivergenceKind::None => (0.0, 0.0, 0.0),
        DivergenceKind::JensenShannon => {
            // JS = H(m) - H(p)/2 - H(q)/2 with H the binary entropy, H'(x) = ln((1-x)/x)
            let m = 0.5 * (p + q);
            let dp = 0.5 * ((p * (1.0 - m)) / (m * (1.0 - p))).ln();
            let dq = 0.5 * ((q * (1.0 - m)) / (m * (1.0 - q))).ln();
            (bernoulli_js(p, q), dp, dq)
        }
        DivergenceKind::KullbackLeibler => {
            let dp = (p / q).ln() - ((1.0 - p) / (1.0 - q)).ln();
            let dq = (q - p) / (q * (1.0 - q));
            (bernoulli_kl(p, q), dp, dq)
        }
    }
}

/// Mean per-sample Jensen-Shannon divergence; bounded by ln 2.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| bernoulli_js(clamp_prob(a), clamp_prob(b)))
        .sum();
    Ok(sum / p.len() as f64)
}

/// Mean per-sample `KL(B(p_i) || B(q_i))`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| bernoulli_kl(clamp_prob(a), clamp_prob(b)))
        .sum();
    Ok(sum / p.len() as f64)
}

pub fn divergence(kind: DivergenceKind, p: &[f64], q: &[f64]) -> Result<f64> {
    match kind {
        DivergenceKind::JensenShannon => js_divergence(p, q),
        DivergenceKind::KullbackLeibler => kl_divergence(p, q),
        DivergenceKind::None => check_pair(p, q).map(|_| 0.0),
    }
}

/// Mean drop `y_hat - p_masked`; may be negative.
pub fn comprehensiveness(p_hat: &[f64], p_masked: &[f64]) -> Result<f64> {
    check_pair(p_hat, p_masked)?;
    let sum: f64 = p_hat.iter().zip(p_masked).map(|(a, b)| a - b).sum();
    Ok(sum / p_hat.len() as f64)
}

/// Mean total variation `|p_i - q_i|` between paired Bernoulli predictions.
pub fn mean_total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// One point of the comprehensiveness-versus-masked-fraction sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub masked: usize,
    pub p_percent: f64,
    pub comprehensiveness: f64,
}

/// Comprehensiveness after masking the `c` least-attributed features, for `c = 1..Q-1`.
pub fn comprehensiveness_sweep(
    model: &Model,
    batch: &Matrix,
    attr: &AttributionMatrix,
) -> Result<Vec<SweepPoint>> {
    let p_hat = model.predict(batch)?;
    let q = batch.cols();
    (1..q)
        .map(|c| {
            let plan = select_mask(attr, MaskSize::Count(c))?;
            let masked = apply_mask(batch, &plan)?;
            let p_masked = masked_predictions(model, &masked)?;
            Ok(SweepPoint {
                masked: c,
                p_percent: percent_label(c, q),
                comprehensiveness: comprehensiveness(&p_hat, &p_masked)?,
            })
        })
        .collect()
}

/// `100 c / q` rounded to one decimal.
pub fn percent_label(c: usize, q: usize) -> f64 {
    (1000.0 * c as f64 / q as f64).round() / 10.0
}
