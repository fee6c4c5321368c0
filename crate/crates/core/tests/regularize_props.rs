use ndarray::Array2;
use proptest::prelude::*;
use statrs::distribution::{Beta as BetaDist, ContinuousCDF};
use structreg::autodiff::{softmax_rows, Graph};
use structreg::regularize::{
    consistency_transform, draw_lambda, emu_targets_graph, emu_transform, eta, mixup_transform,
    plan_mix, rescaled_radius, structural_loss, MixPlan, StructuralLossKind, STEP_GUARD,
};
use structreg::seeded_rng;

fn probs(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| {
        softmax_rows(Array2::from_shape_vec((rows, cols), v).unwrap().view())
    })
}

fn features(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0..5.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn eta_is_monotone_in_lambda(nu in 0.0..(0.5 - STEP_GUARD)) {
        let mut prev = -1.0;
        for k in 0..=1000 {
            let e = eta(k as f64 / 1000.0, nu);
            prop_assert!(e >= prev);
            prop_assert!((0.0..=1.0).contains(&e));
            prev = e;
        }
    }

    #[test]
    fn eta_symmetry(lambda in 0.0..=1.0f64, nu in 0.0..2.0f64) {
        prop_assert!((eta(1.0 - lambda, nu) - (1.0 - eta(lambda, nu))).abs() <= 1e-12);
    }

    #[test]
    fn synthetic_targets_are_distributions(
        x in features(6, 3),
        p in probs(6, 4),
        eps in 0.0..10.0f64,
        beta in 0.1..2.0f64,
        seed in any::<u64>(),
    ) {
        let mut rng = seeded_rng(seed);
        let plan = plan_mix(x.view(), beta, &mut rng).unwrap();
        let batches = [
            mixup_transform(x.view(), p.view(), &plan).unwrap(),
            emu_transform(x.view(), p.view(), eps, &plan).unwrap(),
            consistency_transform(x.view(), p.view(), 0.3, &mut rng).unwrap(),
        ];
        for b in batches {
            for row in b.y_tilde.rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            }
        }
    }

    #[test]
    fn emu_with_zero_radius_is_mixup(x in features(5, 2), p in probs(5, 3), seed in any::<u64>()) {
        let plan = plan_mix(x.view(), 0.7, &mut seeded_rng(seed)).unwrap();
        let a = mixup_transform(x.view(), p.view(), &plan).unwrap();
        let b = emu_transform(x.view(), p.view(), 0.0, &plan).unwrap();
        prop_assert_eq!(&a.x_tilde, &b.x_tilde);
        for (u, v) in a.y_tilde.iter().zip(b.y_tilde.iter()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn swapping_pair_and_reflecting_lambda_is_invariant(
        xi in prop::collection::vec(-3.0..3.0f64, 2),
        xj in prop::collection::vec(-3.0..3.0f64, 2),
        p in probs(2, 3),
        lambda in 0.0..=1.0f64,
        eps in 0.0..3.0f64,
    ) {
        let x = Array2::from_shape_vec((2, 2), [xi.clone(), xj.clone()].concat()).unwrap();
        let d = xi.iter().zip(&xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let plan = |l: f64| MixPlan {
            pair_index: vec![1, 0],
            lambda: vec![l, 1.0 - l],
            pair_distance: vec![d, d],
            nu: vec![0.0; 2],
            eta: vec![l, 1.0 - l],
        };
        // Row 0 mixes (i, j) with λ; row 1 mixes (j, i) with 1−λ.
        let a = emu_transform(x.view(), p.view(), eps, &plan(lambda)).unwrap();
        for c in 0..2 {
            prop_assert!((a.x_tilde[[0, c]] - a.x_tilde[[1, c]]).abs() <= 1e-12);
        }
        for c in 0..3 {
            prop_assert!((a.y_tilde[[0, c]] - a.y_tilde[[1, c]]).abs() <= 1e-12);
        }
    }

    #[test]
    fn epsilon_gradient_matches_central_differences(
        x in features(8, 2),
        p in probs(8, 3),
        pred in probs(8, 3),
        seed in any::<u64>(),
        frac in 0.02..0.3f64,
    ) {
        let plan = plan_mix(x.view(), 1.0, &mut seeded_rng(seed)).unwrap();
        let eps = frac * plan.max_distance();
        let h = 1e-6 * plan.max_distance().max(1e-3);
        // Every row must stay inside one regime across [eps-h, eps+h].
        for i in 0..plan.len() {
            let d = plan.pair_distance[i];
            prop_assume!(d > 1e-3);
            let l = plan.lambda[i];
            for e in [eps - h, eps + h] {
                let nu = rescaled_radius(e, d);
                prop_assume!((l - nu).abs() > 1e-4 && (l - (1.0 - nu)).abs() > 1e-4);
                prop_assume!((nu - 0.5).abs() > 1e-4);
            }
        }
        let loss = |e: f64, grad: bool| -> (f64, f64) {
            let mut g = Graph::new();
            let en = g.scalar(e, true);
            let yt = emu_targets_graph(&mut g, en, p.view(), &plan).unwrap();
            let pn = g.constant(pred.clone().into_dyn());
            let l = structural_loss(&mut g, pn, yt, StructuralLossKind::Mse).unwrap();
            if grad {
                g.backward(l).unwrap();
                (g.scalar_value(l), g.grad(en)[[]])
            } else {
                (g.scalar_value(l), 0.0)
            }
        };
        let (_, analytic) = loss(eps, true);
        let numeric = (loss(eps + h, false).0 - loss(eps - h, false).0) / (2.0 * h);
        let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        prop_assert!(rel < 1e-4 || (analytic - numeric).abs() < 1e-9, "analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn beta_tail_mass_matches_incomplete_beta() {
    // Independent oracle: the regularized incomplete beta function.
    let oracle = BetaDist::new(0.2, 0.2).unwrap();
    let expected = oracle.cdf(0.1) + (1.0 - oracle.cdf(0.9));
    assert!((expected - 0.6734).abs() < 5e-4, "oracle tail {expected}");

    let mut rng = seeded_rng(11);
    let n = 200_000;
    let tail = (0..n)
        .map(|_| draw_lambda(0.2, &mut rng).unwrap())
        .filter(|&l| !(0.1..=0.9).contains(&l))
        .count() as f64
        / n as f64;
    assert!((tail - expected).abs() < 0.01, "empirical {tail} vs {expected}");
}

#[test]
fn uniform_beta_has_mean_one_half() {
    let mut rng = seeded_rng(5);
    let n = 200_000;
    let mean = (0..n).map(|_| draw_lambda(1.0, &mut rng).unwrap()).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.01);
}

#[test]
fn consistency_noise_is_reproducible() {
    let x = Array2::zeros((1, 2));
    let p = Array2::from_elem((1, 2), 0.5);
    let a = consistency_transform(x.view(), p.view(), 0.1, &mut seeded_rng(3)).unwrap();
    let b = consistency_transform(x.view(), p.view(), 0.1, &mut seeded_rng(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.y_tilde, p);
    assert!(a.x_tilde.iter().any(|&v| v != 0.0));
}

#[test]
fn emu_targets_on_graph_equal_fixed_transform() {
    let x = ndarray::array![[0.0, 0.0], [3.0, 4.0], [1.0, 1.0], [-2.0, 0.5]];
    let p = softmax_rows(ndarray::array![[1.0, 0.0], [0.0, 2.0], [0.5, 0.5], [-1.0, 1.0]].view());
    let plan = plan_mix(x.view(), 0.5, &mut seeded_rng(9)).unwrap();
    for eps in [0.0, 0.3, 1.0, 2.4, 10.0] {
        let fixed = emu_transform(x.view(), p.view(), eps, &plan).unwrap();
        let mut g = Graph::new();
        let e = g.scalar(eps, true);
        let yt = emu_targets_graph(&mut g, e, p.view(), &plan).unwrap();
        let v = g.value(yt).clone();
        for (a, b) in fixed.y_tilde.iter().zip(v.iter()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }
}
