use proptest::collection::vec;
use proptest::prelude::*;

use sdlab::objectives::{cross_entropy, kd_kl, kd_loss, one_hot, softmax, KDWeights};

fn case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize, f64)> {
    (2usize..10).prop_flat_map(|k| {
        (
            vec(-25.0f64..25.0, k),
            vec(-25.0f64..25.0, k),
            0..k,
            0.2f64..10.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn cross_entropy_and_kl_are_non_negative((zs, zt, label, tau) in case()) {
        let y = one_hot(label, zs.len()).unwrap();
        prop_assert!(cross_entropy(&zs, &y).unwrap() >= 0.0);
        prop_assert!(kd_kl(&zs, &zt, tau).unwrap() >= 0.0);
    }

    #[test]
    fn kl_vanishes_when_scaled_softmaxes_agree((zs, _zt, _l, tau) in case(), c in -40.0f64..40.0) {
        // A common shift leaves the softmax unchanged.
        let shifted: Vec<f64> = zs.iter().map(|z| z + c).collect();
        prop_assert!(kd_kl(&zs, &shifted, tau).unwrap() <= 1e-9);
        let p = softmax(&zs, tau).unwrap();
        let q = softmax(&shifted, tau).unwrap();
        for (a, b) in p.probs().iter().zip(q.probs()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn kd_loss_is_affine_in_alpha((zs, zt, label, tau) in case(), alpha in 0.0f64..1.0) {
        let y = one_hot(label, zs.len()).unwrap();
        let at = |a: f64| kd_loss(&zs, &y, &zt, KDWeights { alpha: a, tau }).unwrap();
        let (l0, l1) = (at(0.0), at(1.0));
        let mix = alpha * l1 + (1.0 - alpha) * l0;
        prop_assert!((at(alpha) - mix).abs() <= 1e-9 * (1.0 + mix.abs()));
    }
}
