use proptest::prelude::*;

use sdlab::diffcore::{hvp, value_and_grad, ParameterVector, Tape};
use sdlab::models::{Model, ModelLoss, Target};
use sdlab::objectives::KDWeights;
use sdlab::oracle::{check_derivatives, gaussian_like, synthetic_batch, tiny_model_specs};

fn combine(a: f64, u: &ParameterVector, b: f64, v: &ParameterVector) -> ParameterVector {
    let mut w = u.scaled(a);
    w.axpy(b, v);
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hvp_is_linear_and_symmetric(
        family in 0usize..5,
        seed in 0u64..1000,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let (_, spec) = tiny_model_specs().swap_remove(family);
        let (x, y, zt) = synthetic_batch(&spec, 5, seed).unwrap();
        let loss = ModelLoss {
            spec: &spec,
            inputs: &x,
            labels: &y,
            target: Target::Distill { teacher_logits: &zt, weights: KDWeights::default() },
        };
        let theta = Model::init(&spec, seed).unwrap().params().clone();
        let u = gaussian_like(&theta, seed + 1);
        let v = gaussian_like(&theta, seed + 2);

        let hu = hvp(&loss, &theta, &u).unwrap();
        let hv = hvp(&loss, &theta, &v).unwrap();
        let lhs = hvp(&loss, &theta, &combine(a, &u, b, &v)).unwrap();
        let rhs = combine(a, &hu, b, &hv);
        let scale = 1.0 + rhs.norm();
        for (l, r) in lhs.flatten().iter().zip(rhs.flatten()) {
            prop_assert!((l - r).abs() <= 1e-10 * scale, "{l} vs {r}");
        }

        let (uhv, vhu) = (u.dot(&hv), v.dot(&hu));
        prop_assert!((uhv - vhu).abs() <= 1e-8 * uhv.abs().max(vhu.abs()).max(1e-12));
    }
}

#[test]
fn gradient_and_hvp_are_bitwise_deterministic() {
    for (_, spec) in tiny_model_specs() {
        let (x, y, _) = synthetic_batch(&spec, 4, 9).unwrap();
        let loss = ModelLoss::cross_entropy(&spec, &x, &y);
        let theta = Model::init(&spec, 3).unwrap().params().clone();
        let v = gaussian_like(&theta, 4);
        let (l1, g1) = value_and_grad(&loss, &theta).unwrap();
        let (l2, g2) = value_and_grad(&loss, &theta).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.checksum(), g2.checksum());
        assert_eq!(
            hvp(&loss, &theta, &v).unwrap().checksum(),
            hvp(&loss, &theta, &v).unwrap().checksum()
        );
    }
}

#[test]
fn gradient_matches_finite_differences_on_every_family() {
    for (name, spec) in tiny_model_specs() {
        let (x, y, _) = synthetic_batch(&spec, 4, 21).unwrap();
        let loss = ModelLoss::cross_entropy(&spec, &x, &y);
        let theta = Model::init(&spec, 21).unwrap().params().clone();
        let check = check_derivatives(&loss, &theta, 5, 21).unwrap();
        assert!(check.max_grad_rel_err < 1e-4, "{name}: {check:?}");
        assert!(check.max_hvp_rel_err < 1e-4, "{name}: {check:?}");
    }
}

/// Teacher logits computed from a parameter on the same tape: the
/// distillation op must not send any adjoint back into that branch.
#[test]
fn teacher_branch_receives_no_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let zs = tape
        .param(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.3, -0.7])
        .unwrap();
    let t_param = tape
        .param(vec![2, 3], vec![1.0, 2.0, -1.0, 0.4, 0.1, 0.9])
        .unwrap();
    let zt = tape.scale(t_param, 3.0);
    let loss = tape.kd_loss(zs, zt, &[2, 0], 0.3, 2.0).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get_or_zeros(t_param, 6).iter().all(|&x| x == 0.0));
    assert!(g.get_or_zeros(zt, 6).iter().all(|&x| x == 0.0));
    assert!(g.get_or_zeros(zs, 6).iter().any(|&x| x != 0.0));
}
