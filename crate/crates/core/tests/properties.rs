use proptest::prelude::*;

use proxykd_core::domain_gap::{mmd, Estimator, KernelSpec};
use proxykd_core::objectives::{cross_entropy, softmax_kl, LossConfig};
use proxykd_core::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Tensor::from_vec(&[rows, cols], v).unwrap())
}

fn logits_and_labels() -> impl Strategy<Value = (Tensor<f64>, Vec<usize>)> {
    (1usize..6, 2usize..8).prop_flat_map(|(n, k)| (matrix(n, k), prop::collection::vec(0..k, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_ignores_sample_order(x in matrix(6, 3), y in matrix(5, 3), rot in 0usize..6) {
        let kernel = KernelSpec::rbf(1.3);
        let order: Vec<usize> = (0..6).map(|i| (i + rot) % 6).collect();
        for est in [Estimator::Biased, Estimator::Unbiased] {
            let a = mmd(&x, &y, &kernel, est).unwrap().value;
            let b = mmd(&x.gather_rows(&order), &y, &kernel, est).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn biased_mmd_is_nonnegative(x in matrix(4, 2), y in matrix(7, 2)) {
        prop_assert!(mmd(&x, &y, &KernelSpec::default(), Estimator::Biased).unwrap().value >= -1e-12);
    }

    #[test]
    fn cross_entropy_ignores_a_per_row_shift((logits, labels) in logits_and_labels(), shift in -50.0f64..50.0) {
        let mut moved = logits.clone();
        for v in moved.data_mut() {
            *v += shift;
        }
        let a = cross_entropy(&logits, &labels).unwrap();
        let b = cross_entropy(&moved, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn kl_of_identical_logits_vanishes((logits, _) in logits_and_labels(), tau in 0.5f64..8.0) {
        let cfg = LossConfig { temperature: tau, ..Default::default() };
        prop_assert!(softmax_kl(&logits, &logits, &cfg).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative((a, _) in logits_and_labels(), noise in prop::collection::vec(-2.0f64..2.0, 64)) {
        let mut b = a.clone();
        for (v, d) in b.data_mut().iter_mut().zip(noise.iter().cycle()) {
            *v += d;
        }
        prop_assert!(softmax_kl(&a, &b, &LossConfig::default()).unwrap() >= -1e-12);
    }
}
