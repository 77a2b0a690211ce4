//! Divergence, masking and bound invariants over random inputs.

use std::f64::consts::LN_2;

use egfl_core::egl::{self, bernoulli_js, bernoulli_kl};
use egfl_core::explain::{self, LinearScore};
use egfl_core::model::DEFAULT_LAYER_DIMS;
use egfl_core::theory::js_lower_bound;
use egfl_core::{AttributionMatrix, MaskSize, Matrix, Model, PROB_EPS};
use proptest::prelude::*;

fn prob() -> impl Strategy<Value = f64> {
    PROB_EPS..(1.0 - PROB_EPS)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn js_is_bounded_symmetric_and_dominates_tv_bound(p in prob(), q in prob()) {
        let js = bernoulli_js(p, q);
        prop_assert!((0.0..=LN_2).contains(&js));
        prop_assert_eq!(js.to_bits(), bernoulli_js(q, p).to_bits());
        let lb = js_lower_bound((p - q).abs()).unwrap();
        prop_assert!(js - lb >= -1e-12, "js {} < bound {}", js, lb);
    }

    #[test]
    fn divergences_vanish_only_on_equal_inputs(p in prob(), d in 1e-4f64..0.5) {
        prop_assert_eq!(bernoulli_js(p, p), 0.0);
        prop_assert_eq!(bernoulli_kl(p, p), 0.0);
        let q = if p + d < 1.0 - PROB_EPS { p + d } else { p - d };
        prop_assert!(bernoulli_js(p, q) > 0.0);
        prop_assert!(bernoulli_kl(p, q) > 0.0);
    }

    #[test]
    fn mask_choice_is_invariant_under_row_rescaling(
        a in prop::collection::vec(-3.0f64..3.0, 3),
        scale in 0.01f64..100.0,
    ) {
        let attr = |v: Vec<f64>| AttributionMatrix { values: Matrix::new(1, 3, v).unwrap(), baseline: vec![0.0; 3], steps: 1 };
        let base = egl::select_mask(&attr(a.clone()), MaskSize::Count(1)).unwrap();
        let scaled = egl::select_mask(&attr(a.iter().map(|v| v * scale).collect()), MaskSize::Count(1)).unwrap();
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn integrated_gradients_complete_at_200_steps(
        seed in 0u64..5000,
        x in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let m = Model::seeded(&DEFAULT_LAYER_DIMS, 1.0, seed).unwrap();
        let a = explain::integrated_gradients(&m, &x, &[0.0; 3], 200).unwrap();
        let gap = m.forward(&x).unwrap() - m.forward(&[0.0; 3]).unwrap();
        prop_assert!((a.iter().sum::<f64>() - gap).abs() <= 1e-3);
    }

    #[test]
    fn integrated_gradients_exact_for_linear_scores(
        w in prop::collection::vec(-5.0f64..5.0, 3),
        b in -1.0f64..1.0,
        x in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let f = LinearScore { weights: w.clone(), bias: b };
        let a = explain::integrated_gradients(&f, &x, &[0.0; 3], 1).unwrap();
        let gap: f64 = w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum();
        prop_assert!((a.iter().sum::<f64>() - gap).abs() <= 1e-12);
    }
}

#[test]
fn disjoint_point_masses_reach_ln2() {
    let js = egl::js_divergence(&[1.0 - PROB_EPS], &[PROB_EPS]).unwrap();
    assert!((js - LN_2).abs() < 1e-5);
    assert!(egl::js_divergence(&[1.0], &[0.0]).unwrap() <= LN_2);
}

#[test]
fn kl_is_asymmetric_where_js_is_not() {
    assert!((bernoulli_kl(0.9, 0.5) - 0.36806420716849714).abs() < 1e-12);
    assert!((bernoulli_kl(0.5, 0.9) - 0.5108256237659907).abs() < 1e-12);
    assert_eq!(bernoulli_js(0.9, 0.5), bernoulli_js(0.5, 0.9));
}

#[test]
fn masking_an_ignored_feature_changes_nothing() {
    let mut m = Model::seeded(&DEFAULT_LAYER_DIMS, 1.0, 21).unwrap();
    let first = &mut m.layers_mut()[0];
    for o in 0..first.outputs {
        first.weights[o * first.inputs + 2] = 0.0;
    }
    let batch = Matrix::from_rows(&[[0.4, -1.0, 2.0], [1.5, 0.2, -0.7]]).unwrap();
    let plan = egl::MaskPlan {
        features: 3,
        masked_indices: vec![vec![2], vec![2]],
    };
    let masked = egl::apply_mask(&batch, &plan).unwrap();
    let p = m.predict(&batch).unwrap();
    let q = egl::masked_predictions(&m, &masked).unwrap();
    assert_eq!(p, q);
    assert_eq!(egl::comprehensiveness(&p, &q).unwrap(), 0.0);
}
