//! Property tests for the per-step kernel contracts: normalization, shift
//! invariance, the unclipped dual identity, coefficient zero-sums and the
//! affine structure in the perturbation coefficient, and checkpoint
//! round-trips.

use proptest::prelude::*;

use qdual_core::math::{
    cov_coefficients, dual_distribution, log_sum_exp, mabe_coefficients, mle_coefficients,
    softmax, temperature_rescale, QValues,
};
use qdual_core::model::{checkpoint_from_str, checkpoint_to_string, ModelFamily, QModel};

fn q_vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 2..12)
}

proptest! {
    #[test]
    fn softmax_is_normalized_and_consistent(values in q_vector()) {
        let q = QValues::new(values).unwrap();
        let p = softmax(&q);
        let sum: f64 = p.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        for (&prob, &lp) in p.probs().iter().zip(p.log_probs()) {
            if prob > 0.0 {
                prop_assert!((lp.exp() - prob).abs() <= 1e-12);
            } else {
                prop_assert_eq!(lp, f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn softmax_and_dual_are_shift_invariant(values in q_vector(), shift in -20.0f64..20.0) {
        let q = QValues::new(values.clone()).unwrap();
        let shifted = QValues::new(values.iter().map(|v| v + shift).collect()).unwrap();
        let (a, b) = (softmax(&q), softmax(&shifted));
        for (x, y) in a.probs().iter().zip(b.probs()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
        let (da, db) = (dual_distribution(&q), dual_distribution(&shifted));
        for (x, y) in da.distribution.probs().iter().zip(db.distribution.probs()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn log_sum_exp_dominates_max(values in q_vector()) {
        let q = QValues::new(values.clone()).unwrap();
        let lse = log_sum_exp(&q);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let d = values.len() as f64;
        prop_assert!(lse >= max - 1e-12);
        prop_assert!(lse <= max + d.ln() + 1e-12);
    }

    #[test]
    fn unclipped_dual_raws_sum_to_one(values in q_vector()) {
        let q = QValues::new(values).unwrap();
        let p = softmax(&q);
        let out = dual_distribution(&q);
        let total: f64 = p
            .probs()
            .iter()
            .zip(&out.factors)
            .map(|(&pa, &fa)| pa * fa)
            .sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(out.z > 0.0);
    }

    #[test]
    fn coefficients_sum_to_zero(values in q_vector(), y_raw in 0usize..12, lambda in -3.0f64..3.0) {
        let q = QValues::new(values).unwrap();
        let y = y_raw % q.len();
        for coeffs in [
            mle_coefficients(&q, y).unwrap(),
            cov_coefficients(&q),
            mabe_coefficients(&q, y, lambda).unwrap(),
        ] {
            let sum: f64 = coeffs.as_slice().iter().sum();
            prop_assert!(sum.abs() <= 1e-10);
        }
    }

    #[test]
    fn mabe_is_affine_in_lambda(values in q_vector(), y_raw in 0usize..12, lambda in -3.0f64..3.0) {
        let q = QValues::new(values).unwrap();
        let y = y_raw % q.len();
        let mle = mle_coefficients(&q, y).unwrap();
        let cov = cov_coefficients(&q);
        let mabe = mabe_coefficients(&q, y, lambda).unwrap();
        for ((&m, &c), &g) in mle.as_slice().iter().zip(cov.as_slice()).zip(mabe.as_slice()) {
            prop_assert!((g - (m + (lambda - 1.0) * c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn temperature_one_is_softmax(values in q_vector()) {
        let q = QValues::new(values).unwrap();
        let a = temperature_rescale(&q, 1.0).unwrap();
        let b = softmax(&q);
        for (x, y) in a.probs().iter().zip(b.probs()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn checkpoint_text_roundtrip(seed in 0u64..1000, step in 0u64..100000) {
        let mut model = QModel::init(
            ModelFamily::LinearFeatures { context_order: 1 },
            4,
            seed,
        )
        .unwrap();
        model.set_step(step);
        let text = checkpoint_to_string(&model);
        let loaded = checkpoint_from_str(&text).unwrap();
        prop_assert_eq!(loaded.params(), model.params());
        prop_assert_eq!(loaded.step(), step);
    }
}
