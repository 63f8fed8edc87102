use proptest::collection::vec;
use proptest::prelude::*;

use sdlab::diffcore::{value, ParameterVector, Quadratic, SegmentSpec};
use sdlab::optim::{cosine_lr, sam_step, sgd_step, OptimConfig, OptimState, SamConfig, Schedule};

fn flat(values: Vec<f64>) -> ParameterVector {
    ParameterVector::from_flat(vec![SegmentSpec::new("theta", vec![values.len()])], values).unwrap()
}

fn cfg(momentum: f64, weight_decay: f64) -> OptimConfig {
    OptimConfig {
        lr0: 0.1,
        momentum,
        weight_decay,
        clip_norm: None,
        batch_size: 1,
        schedule: Schedule::Constant,
        sam: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn cosine_is_nonincreasing(t_max in 1u64..2000, lr0 in 1e-4f64..1.0, frac in 0.0f64..1.0) {
        let lr_min = lr0 * frac;
        let mut prev = cosine_lr(0, lr0, lr_min, t_max);
        for t in 1..=t_max {
            let lr = cosine_lr(t, lr0, lr_min, t_max);
            prop_assert!(lr <= prev);
            prev = lr;
        }
        prop_assert_eq!(prev, lr_min);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_alone(
        theta in vec(-5.0f64..5.0, 1..20),
        mu in 0.0f64..0.99,
        wd in 0.0f64..0.1,
    ) {
        let g: Vec<f64> = theta.iter().map(|x| 0.5 - x).collect();
        let mut p = flat(theta.clone());
        let mut st = OptimState::new(&p);
        st.velocity = flat(theta.iter().map(|x| x * 0.1).collect());
        sgd_step(&mut p, &flat(g), &mut st, &cfg(mu, wd), 0.0).unwrap();
        prop_assert_eq!(p.flatten(), &theta[..]);
    }

    /// Without decay or clipping, `Δθ = −lr(μ v + g)`: check the coefficients
    /// by least squares on the observed update.
    #[test]
    fn update_lies_in_span_of_velocity_and_gradient(
        v in vec(-2.0f64..2.0, 3..15),
        mu in 0.0f64..0.99,
        lr in 1e-3f64..0.5,
        gshift in -1.0f64..1.0,
    ) {
        let d = v.len();
        let g: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37 + gshift).sin()).collect();
        let mut p = flat(vec![0.0; d]);
        let mut st = OptimState::new(&p);
        st.velocity = flat(v.clone());
        sgd_step(&mut p, &flat(g.clone()), &mut st, &cfg(mu, 0.0), lr).unwrap();
        let delta = p.flatten();

        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (vv, gg, vg) = (dot(&v, &v), dot(&g, &g), dot(&v, &g));
        let det = vv * gg - vg * vg;
        prop_assume!(det > 1e-6 * vv * gg);
        let (dv, dg) = (dot(delta, &v), dot(delta, &g));
        let a = (dv * gg - dg * vg) / det;
        let b = (dg * vv - dv * vg) / det;
        let resid: f64 = (0..d).map(|i| (delta[i] - a * v[i] - b * g[i]).powi(2)).sum::<f64>().sqrt();
        prop_assert!(resid <= 1e-12 * (1.0 + dot(delta, delta).sqrt()));
        prop_assert!((a + lr * mu).abs() <= 1e-9);
        prop_assert!((b + lr).abs() <= 1e-9);
    }
}

#[test]
fn sam_descends_monotonically_on_a_convex_quadratic() {
    let eigs = [0.5, 0.8, 1.0, 1.3, 2.0];
    let q = Quadratic::diagonal(&eigs).unwrap();
    let mut p = q.point(vec![3.0, -2.0, 1.5, -1.0, 2.5]).unwrap();
    let c = OptimConfig {
        sam: Some(SamConfig { rho: 0.05 }),
        ..cfg(0.0, 0.0)
    };
    let mut st = OptimState::new(&p);
    let start = value(&q, &p).unwrap();
    let mut losses = Vec::new();
    for _ in 0..200 {
        sam_step(&mut p, &q, &mut st, &c, 0.01).unwrap();
        losses.push(value(&q, &p).unwrap());
    }
    let burn_in = 10;
    assert!(losses[burn_in..].windows(2).all(|w| w[1] <= w[0]));
    assert!(*losses.last().unwrap() < 0.1 * start);
}
