//! Convergence-probability bound and the empirical quantities that feed it.
//!
//! For a slice with clients `k`, sizes `D_k`, subgradient bounds `B_k`, multiplier radius `R`,
//! oracle error `delta`, total variation `V` and violation rate `nu in (0,1)`:
//!
//! ```text
//! alpha = delta + ln(1 - V^2/4)                  (printed convention)
//! C     = 2 R sum_k D_k B_k + D_n alpha
//! x     = -(D_n eps)^2 / (2 C^2)
//! Delta = 1 - nu / (1 + (nu - 1) e^x)
//! ```
//!
//! `Delta` is evaluated as `(1 - nu)(-expm1(x)) / (1 - (1 - nu) e^x)`, which is algebraically
//! identical and avoids cancellation for small `eps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::ClientLog;

/// Which sign the `ln(1 - V^2/4)` term carries inside `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaConvention {
    /// `alpha = delta + ln(1 - V^2/4)`.
    Printed,
    /// `alpha = delta - ln(1 - V^2/4)`, the sign carried by the JS lower bound.
    ProofSign,
}

/// Inputs of the bound for one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub nu: f64,
    pub epsilon: f64,
    pub radius: f64,
    pub subgradient_bounds: Vec<f64>,
    pub sizes: Vec<f64>,
    pub delta: f64,
    pub total_variation: f64,
}

/// `-ln(1 - V^2/4)`, the lower bound of the Bernoulli JS divergence at total variation `V`.
pub fn js_lower_bound(v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("total variation {v} outside [0,1]")));
    }
    Ok(-(-0.25 * v * v).ln_1p())
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::InvalidArgument(format!("violation rate {} outside (0,1)", self.nu)));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if !(self.radius >= 0.0 && self.delta >= 0.0) {
            return Err(Error::InvalidArgument("radius and oracle error must be >= 0".into()));
        }
        if self.sizes.is_empty() || self.sizes.len() != self.subgradient_bounds.len() {
            return Err(Error::Dimension(format!(
                "{} sizes vs {} subgradient bounds",
                self.sizes.len(),
                self.subgradient_bounds.len()
            )));
        }
        if self.sizes.iter().chain(&self.subgradient_bounds).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("sizes and bounds must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn total_size(&self) -> f64 {
        self.sizes.iter().sum()
    }

    pub fn alpha(&self, convention: AlphaConvention) -> Result<f64> {
        let ln_term = -js_lower_bound(self.total_variation)?;
        Ok(match convention {
            AlphaConvention::Printed => self.delta + ln_term,
            AlphaConvention::ProofSign => self.delta - ln_term,
        })
    }

    /// `2 R sum_k D_k B_k + D_n alpha`.
    pub fn denominator_term(&self, convention: AlphaConvention) -> Result<f64> {
        let weighted: f64 = self
            .sizes
            .iter()
            .zip(&self.subgradient_bounds)
            .map(|(d, b)| d * b)
            .sum();
        Ok(2.0 * self.radius * weighted + self.total_size() * self.alpha(convention)?)
    }
}

/// `Delta` from its scalar ingredients.
pub fn delta_from_terms(nu: f64, epsilon: f64, total_size: f64, c_term: f64) -> Result<f64> {
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::InvalidArgument(format!("violation rate {nu} outside (0,1)")));
    }
    if c_term == 0.0 || !c_term.is_finite() {
        return Err(Error::Numeric(format!("degenerate denominator term {c_term}")));
    }
    let ratio = total_size * epsilon / c_term;
    let x = -0.5 * ratio * ratio;
    let delta = if x == f64::NEG_INFINITY {
        1.0 - nu
    } else {
        (1.0 - nu) * -x.exp_m1() / (1.0 - (1.0 - nu) * x.exp())
    };
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Numeric(format!("bound {delta} outside [0,1]")));
    }
    Ok(delta)
}

pub fn convergence_probability(inputs: &BoundInputs, convention: AlphaConvention) -> Result<f64> {
    inputs.validate()?;
    delta_from_terms(
        inputs.nu,
        inputs.epsilon,
        inputs.total_size(),
        inputs.denominator_term(convention)?,
    )
}

/// Bound inputs measured from a completed run, for one (variant, slice).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalEstimate {
    pub slice: usize,
    pub rounds: usize,
    pub violating_rounds: usize,
    pub nu: f64,
    /// True when `nu` was moved off 0 or 1 into the open interval.
    pub nu_clamped: bool,
    pub inputs: BoundInputs,
}

impl EmpiricalEstimate {
    pub fn b_max(&self) -> f64 {
        self.inputs.subgradient_bounds.iter().copied().fold(0.0, f64::max)
    }

    pub fn at(&self, epsilon: f64) -> BoundInputs {
        BoundInputs {
            epsilon,
            ..self.inputs.clone()
        }
    }
}

/// `nu = (rounds whose mean last-epoch violation is positive) / T`, moved into
/// `[1/(T+1), T/(T+1)]` at the boundaries.
///
/// `B_k` is the largest oracle gradient norm client `k` reported over the run; `V` and `delta`
/// are measured elsewhere and passed through.
pub fn empirical_estimates(
    logs: &[ClientLog],
    slice: usize,
    radius: f64,
    total_variation: f64,
    delta: f64,
) -> Result<EmpiricalEstimate> {
    let logs: Vec<&ClientLog> = logs.iter().filter(|l| l.slice == slice).collect();
    if logs.is_empty() {
        return Err(Error::InvalidArgument(format!("no training logs for slice {slice}")));
    }
    let rounds = logs.iter().map(|l| l.round).max().unwrap_or(0) + 1;
    let clients = logs.iter().map(|l| l.bs).max().unwrap_or(0) + 1;
    let mut phi_sum = vec![0.0; rounds];
    let mut phi_count = vec![0usize; rounds];
    let mut b = vec![0.0f64; clients];
    let mut sizes = vec![0.0; clients];
    for log in &logs {
        let last = log
            .records
            .last()
            .ok_or_else(|| Error::InvalidArgument(format!("empty log for ({}, {})", log.bs, slice)))?;
        phi_sum[log.round] += last.phi;
        phi_count[log.round] += 1;
        b[log.bs] = b[log.bs].max(last.grad_norm_max);
        sizes[log.bs] = log.size as f64;
    }
    if phi_count.contains(&0) {
        return Err(Error::InvalidArgument(format!("slice {slice} is missing rounds")));
    }
    let violating_rounds = phi_sum
        .iter()
        .zip(&phi_count)
        .filter(|(s, &c)| *s / c as f64 > 0.0)
        .count();
    let t = rounds as f64;
    let (nu, nu_clamped) = match violating_rounds {
        0 => (1.0 / (t + 1.0), true),
        v if v == rounds => (t / (t + 1.0), true),
        v => (v as f64 / t, false),
    };
    Ok(EmpiricalEstimate {
        slice,
        rounds,
        violating_rounds,
        nu,
        nu_clamped,
        inputs: BoundInputs {
            nu,
            epsilon: 0.0,
            radius,
            subgradient_bounds: b,
            sizes,
            delta,
            total_variation,
        },
    })
}

/// One row of the bound report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub variant: String,
    pub slice: usize,
    pub epsilon: f64,
    pub delta_printed: f64,
    pub delta_alt_sign: f64,
    pub nu: f64,
    pub nu_clamped: bool,
    #[serde(rename = "V")]
    pub total_variation: f64,
    #[serde(rename = "B_max")]
    pub b_max: f64,
}

pub fn bound_rows(variant: &str, estimate: &EmpiricalEstimate, grid: &[f64]) -> Result<Vec<BoundRow>> {
    grid.iter()
        .map(|&eps| {
            let inputs = estimate.at(eps);
            Ok(BoundRow {
                variant: variant.to_string(),
                slice: estimate.slice,
                epsilon: eps,
                delta_printed: convergence_probability(&inputs, AlphaConvention::Printed)?,
                delta_alt_sign: convergence_probability(&inputs, AlphaConvention::ProofSign)?,
                nu: estimate.nu,
                nu_clamped: estimate.nu_clamped,
                total_variation: inputs.total_variation,
                b_max: estimate.b_max(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(nu: f64, eps: f64) -> BoundInputs {
        BoundInputs {
            nu,
            epsilon: eps,
            radius: 1.0,
            subgradient_bounds: vec![2.0, 3.0],
            sizes: vec![100.0, 200.0],
            delta: 0.05,
            total_variation: 0.2,
        }
    }

    #[test]
    fn lower_bound_values() {
        assert_eq!(js_lower_bound(0.0).unwrap(), 0.0);
        assert!((js_lower_bound(1.0).unwrap() - 0.2876820724517809).abs() < 1e-15);
        assert!((js_lower_bound(0.2).unwrap() - 0.01005033585350145).abs() < 1e-15);
        assert!(js_lower_bound(1.5).is_err());
    }

    #[test]
    fn bound_limits() {
        for nu in [0.05, 0.3, 0.9] {
            assert_eq!(convergence_probability(&inputs(nu, 0.0), AlphaConvention::Printed).unwrap(), 0.0);
            let far = convergence_probability(&inputs(nu, 1e9), AlphaConvention::Printed).unwrap();
            assert!((far - (1.0 - nu)).abs() < 1e-9);
        }
    }

    #[test]
    fn printed_form_agrees_with_rearrangement() {
        let (nu, eps, d, c) = (0.3, 0.5, 1500.0, 100.0);
        let x: f64 = -(d * eps) * (d * eps) / (2.0 * c * c);
        let printed = 1.0 - nu / (1.0 + (nu - 1.0) * x.exp());
        assert!((delta_from_terms(nu, eps, d, c).unwrap() - printed).abs() < 1e-15);
        let (eps, c) = (0.01, 40.0);
        let x: f64 = -(d * eps) * (d * eps) / (2.0 * c * c);
        let printed = 1.0 - nu / (1.0 + (nu - 1.0) * x.exp());
        assert!((delta_from_terms(nu, eps, d, c).unwrap() - printed).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(delta_from_terms(0.3, 0.5, 10.0, 0.0), Err(Error::Numeric(_))));
        assert!(delta_from_terms(0.0, 0.5, 10.0, 1.0).is_err());
        assert!(delta_from_terms(1.0, 0.5, 10.0, 1.0).is_err());
    }

    #[test]
    fn conventions_differ_only_in_log_sign() {
        let i = inputs(0.3, 0.1);
        let lb = js_lower_bound(0.2).unwrap();
        assert!((i.alpha(AlphaConvention::Printed).unwrap() - (0.05 - lb)).abs() < 1e-15);
        assert!((i.alpha(AlphaConvention::ProofSign).unwrap() - (0.05 + lb)).abs() < 1e-15);
    }
}
