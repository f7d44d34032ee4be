use ndarray::Array2;
use proptest::prelude::*;

use ibmd::bridges::{v_from_x0, x0_from_v};
use ibmd::eval::energy_distance;
use ibmd::netcore::{Activation, Mlp};
use ibmd::rng::{normal_matrix, seeded};
use ibmd::Schedule;

fn schedule_strategy() -> impl Strategy<Value = Schedule> {
    prop_oneof![
        (0.05f64..3.0, 0.2f64..5.0).prop_map(|(eps, h)| Schedule::brownian(eps, h).unwrap()),
        (0.01f64..1.0, 1.0f64..25.0, 0.5f64..3.0).prop_map(|(lo, span, h)| Schedule::variance_preserving(
            lo,
            lo + span,
            h
        )
        .unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn brownian_coefficients_match_closed_form(eps in 0.05f64..3.0, horizon in 0.2f64..5.0, u in 0.0f64..=1.0) {
        let s = Schedule::brownian(eps, horizon).unwrap();
        let t = u * horizon;
        let c = s.bridge_coeffs(t).unwrap();
        prop_assert!((c.a - t / horizon).abs() < 1e-12);
        prop_assert!((c.b - (1.0 - t / horizon)).abs() < 1e-12);
        let var = eps * t * (horizon - t) / horizon;
        prop_assert!((c.c2 - var).abs() < 1e-10 * (1.0 + var));
    }

    #[test]
    fn bridge_coefficients_are_finite_and_pinned(s in schedule_strategy(), u in 0.0f64..=1.0) {
        let h = s.horizon();
        let c = s.bridge_coeffs(u * h).unwrap();
        prop_assert!(c.a.is_finite() && c.b.is_finite() && c.c2.is_finite());
        prop_assert!(c.c2 >= 0.0 && c.a >= 0.0 && c.b >= 0.0);
        let start = s.bridge_coeffs(0.0).unwrap();
        let end = s.bridge_coeffs(h).unwrap();
        prop_assert_eq!((start.a, start.b, start.c2), (0.0, 1.0, 0.0));
        prop_assert_eq!((end.a, end.b, end.c2), (1.0, 0.0, 0.0));
        prop_assert!(s.bridge_coeffs(h * 1.01 + 1e-9).is_err());
    }

    #[test]
    fn velocity_and_data_parameterisations_invert(
        s in schedule_strategy(),
        u in 0.05f64..1.0,
        x0 in prop::collection::vec(-3.0f64..3.0, 3),
        xt in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let t = u * s.horizon();
        let v = v_from_x0(&s, &x0, &xt, t).unwrap();
        let back = x0_from_v(&s, &v, &xt, t).unwrap();
        for (a, b) in x0.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-7 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences(
        seed in any::<u64>(),
        hidden in prop::collection::vec(2usize..8, 1..3),
        act in prop_oneof![Just(Activation::Tanh), Just(Activation::Silu)],
    ) {
        let mut rng = seeded(seed);
        let mut widths = vec![3];
        widths.extend(hidden);
        widths.push(2);
        let net = Mlp::new(&widths, act, &mut rng).unwrap();
        let x = normal_matrix(&mut rng, 1, 3);
        let w = normal_matrix(&mut rng, 1, 2);
        let (_, tape) = net.forward_tape(x.view()).unwrap();
        let grad = net.backward_input(&tape, w.view());
        let f = |x: &Array2<f64>| (&net.forward(x.view()).unwrap() * &w).sum();
        let h = 1e-4;
        for j in 0..3 {
            let shifted = |d: f64| {
                let mut y = x.clone();
                y[[0, j]] += d;
                f(&y)
            };
            let fd = (8.0 * (shifted(h) - shifted(-h)) - (shifted(2.0 * h) - shifted(-2.0 * h))) / (12.0 * h);
            let a = grad[[0, j]];
            prop_assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0), "{a} vs {fd}");
        }
    }

    #[test]
    fn energy_distance_is_a_symmetric_translation_invariant_divergence(
        seed in any::<u64>(),
        shift in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let mut rng = seeded(seed);
        let a = normal_matrix(&mut rng, 120, 2);
        let b = normal_matrix(&mut rng, 110, 2) + 0.5;
        let ab = energy_distance(a.view(), b.view()).unwrap();
        let ba = energy_distance(b.view(), a.view()).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(energy_distance(a.view(), a.view()).unwrap(), 0.0);
        let offset = ndarray::arr1(&shift);
        let moved = energy_distance((&a + &offset).view(), (&b + &offset).view()).unwrap();
        prop_assert!((moved - ab).abs() < 1e-9);
    }
}
