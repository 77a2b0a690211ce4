//! Convergence-probability bound against a frozen 50-digit reference and its limit properties.

use egfl_core::fairness::EpochRecord;
use egfl_core::federation::ClientLog;
use egfl_core::theory::{self, AlphaConvention, BoundInputs};
use proptest::prelude::*;

/// Produced by `tests/data/bound_oracle.py`.
const ORACLE: &str = include_str!("data/bound_oracle.csv");

#[test]
fn agrees_with_high_precision_reference() {
    let mut count = 0;
    for line in ORACLE.lines().filter(|l| !l.trim().is_empty()) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let got = theory::delta_from_terms(v[0], v[1], v[2], v[3]).unwrap();
        assert!((got - v[4]).abs() <= 1e-12, "{line}: got {got}");
        count += 1;
    }
    assert_eq!(count, 20);
}

fn inputs(nu: f64, radius: f64, v: f64) -> BoundInputs {
    BoundInputs {
        nu,
        epsilon: 0.0,
        radius,
        subgradient_bounds: vec![0.7, 1.2, 0.4],
        sizes: vec![500.0, 500.0, 500.0],
        delta: 0.08,
        total_variation: v,
    }
}

proptest! {
    #[test]
    fn monotone_in_epsilon_with_correct_limits(
        nu in 0.01f64..0.99,
        radius in 0.0f64..10.0,
        v in 0.0f64..0.5,
    ) {
        let base = inputs(nu, radius, v);
        for conv in [AlphaConvention::Printed, AlphaConvention::ProofSign] {
            let c = base.denominator_term(conv).unwrap();
            prop_assume!(c.abs() > 1e-9);
            let at = |eps: f64| theory::convergence_probability(&BoundInputs { epsilon: eps, ..base.clone() }, conv).unwrap();
            prop_assert_eq!(at(0.0), 0.0);
            prop_assert!((at(1e12) - (1.0 - nu)).abs() <= 1e-9);
            let scale = c.abs() / base.total_size();
            let mut prev = 0.0;
            for i in 0..100 {
                let d = at(scale * 5.0 * i as f64 / 99.0);
                prop_assert!(d >= prev);
                prop_assert!((0.0..=1.0).contains(&d));
                prev = d;
            }
        }
    }
}

fn record(phi: f64, grad: f64) -> EpochRecord {
    EpochRecord {
        epoch: 0,
        loss: 0.5,
        bce: 0.5,
        js: None,
        divergence: 0.0,
        recall: 0.8,
        psi: 0.0,
        phi,
        lambda0: 0.5,
        lambda1: 0.5,
        multiplier: 0.0,
        grad_norm_max: grad,
        oracle_monotone_fraction: 1.0,
    }
}

fn log(round: usize, bs: usize, phi: f64, grad: f64) -> ClientLog {
    ClientLog {
        round,
        bs,
        slice: 0,
        size: 100 + bs,
        records: vec![record(0.3, 9.0), record(phi, grad)],
    }
}

#[test]
fn violation_rate_counts_rounds_with_positive_mean_violation() {
    // Round means: 0.05, -0.05, 0.1, -0.2. Only the last epoch counts.
    let logs = vec![
        log(0, 0, 0.2, 1.0),
        log(0, 1, -0.1, 2.0),
        log(1, 0, -0.2, 1.5),
        log(1, 1, 0.1, 0.5),
        log(2, 0, 0.1, 3.0),
        log(2, 1, 0.1, 0.1),
        log(3, 0, -0.2, 0.2),
        log(3, 1, -0.2, 0.2),
    ];
    let est = theory::empirical_estimates(&logs, 0, 1.0, 0.1, 0.01).unwrap();
    assert_eq!((est.rounds, est.violating_rounds), (4, 2));
    assert_eq!(est.nu, 0.5);
    assert!(!est.nu_clamped);
    assert_eq!(est.inputs.subgradient_bounds, vec![3.0, 2.0]);
    assert_eq!(est.inputs.sizes, vec![100.0, 101.0]);
}

#[test]
fn boundary_violation_rates_move_into_open_interval() {
    let none: Vec<ClientLog> = (0..3).map(|t| log(t, 0, -0.1, 1.0)).collect();
    let est = theory::empirical_estimates(&none, 0, 1.0, 0.1, 0.01).unwrap();
    assert_eq!(est.nu, 0.25);
    assert!(est.nu_clamped);
    let all: Vec<ClientLog> = (0..3).map(|t| log(t, 0, 0.1, 1.0)).collect();
    let est = theory::empirical_estimates(&all, 0, 1.0, 0.1, 0.01).unwrap();
    assert_eq!(est.nu, 0.75);
    assert!(est.nu_clamped);
    assert!(theory::empirical_estimates(&[], 0, 1.0, 0.1, 0.01).is_err());
}

#[test]
fn lower_bound_sits_below_matching_js() {
    let lb = theory::js_lower_bound(0.2).unwrap();
    let js = egfl_core::egl::js_divergence(&[0.6], &[0.4]).unwrap();
    assert!((js - 0.020135513550688863).abs() < 1e-12);
    assert!(js >= lb);
}
