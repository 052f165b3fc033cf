use fragavg::averaging::{criterion, kkt_residual, project_simplex, OptOptions};
use fragavg::baselines::smoothed_ic_weights;
use fragavg::screen::pairwise_correlation;
use fragavg::{
    fixtures, kl_loss, optimize_weights, CriterionContext, ExponentialFamily, KlTruth, PatternIndex, PatternOrder,
    WeightVector,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn on_simplex(w: &DVector<f64>) -> bool {
    w.iter().all(|&v| v >= 0.0) && (w.sum() - 1.0).abs() < 1e-12
}

fn family_strategy() -> impl Strategy<Value = ExponentialFamily> {
    prop_oneof![
        Just(ExponentialFamily::binomial()),
        Just(ExponentialFamily::gaussian()),
        Just(ExponentialFamily::poisson()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_lands_on_simplex_and_is_nearest(
        v in prop::collection::vec(-5.0..5.0f64, 1..8),
        q in prop::collection::vec(0.0..1.0f64, 8),
    ) {
        let v = DVector::from_vec(v);
        let p = project_simplex(&v);
        prop_assert!(on_simplex(&p));
        prop_assert!((project_simplex(&p) - &p).amax() < 1e-12);
        // any other simplex point is at least as far
        let q = DVector::from_iterator(v.len(), q.into_iter().take(v.len()));
        let q = if q.sum() > 0.0 { &q / q.sum() } else { DVector::from_element(v.len(), 1.0 / v.len() as f64) };
        prop_assert!((&v - &p).norm() <= (&v - &q).norm() + 1e-12);
    }

    #[test]
    fn optimized_weights_are_a_kkt_point_below_every_vertex(
        family in family_strategy(),
        seed in 0u64..10_000,
        k in 1usize..5,
        lambda in 0.0..6.0f64,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let theta = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.5..1.5));
        let y = DVector::from_fn(n, |i, _| match family.kind {
            fragavg::FamilyKind::BinomialLogit => (rng.random::<f64>() < 0.5) as u8 as f64,
            fragavg::FamilyKind::PoissonLog => (i % 4) as f64,
            fragavg::FamilyKind::GaussianIdentity => rng.random_range(-2.0..2.0),
        });
        let p_sizes: Vec<usize> = (0..k).map(|j| k + 1 - j).collect();
        let ctx = CriterionContext::new(theta, y, p_sizes, family).unwrap();
        let opts = OptOptions::default();
        let fit = optimize_weights(&ctx, lambda, &opts).unwrap();
        prop_assert!(on_simplex(fit.weights.as_vector()));
        prop_assert!(fit.kkt_residual <= opts.kkt_tol, "kkt {}", fit.kkt_residual);
        let g = fit.criterion;
        for j in 0..k {
            prop_assert!(g <= criterion(&ctx, &WeightVector::vertex(k, j), lambda).unwrap() + opts.obj_tol);
        }
        prop_assert!(g <= criterion(&ctx, &WeightVector::uniform(k), lambda).unwrap() + opts.obj_tol);
        let grad = fragavg::averaging::criterion_gradient(&ctx, &fit.weights, lambda).unwrap();
        prop_assert!(kkt_residual(fit.weights.as_vector(), &grad, opts.support_tol) <= opts.kkt_tol);
    }

    #[test]
    fn smoothed_weights_ignore_a_common_shift(
        ic in prop::collection::vec(-50.0..50.0f64, 1..7),
        shift in -1e3..1e3f64,
    ) {
        let w = smoothed_ic_weights(&ic).unwrap();
        let shifted: Vec<f64> = ic.iter().map(|v| v + shift).collect();
        let ws = smoothed_ic_weights(&shifted).unwrap();
        prop_assert!(on_simplex(w.as_vector()));
        prop_assert!((w.as_vector() - ws.as_vector()).amax() < 1e-12);
        // smaller criterion, larger weight
        for a in 0..ic.len() {
            for b in 0..ic.len() {
                if ic[a] < ic[b] {
                    prop_assert!(w.as_slice()[a] >= w.as_slice()[b]);
                }
            }
        }
    }

    #[test]
    fn patterns_partition_subjects(
        n in 1usize..60,
        p in 1usize..7,
        obs in 0.2..0.95f64,
        seed in 0u64..10_000,
        first in any::<bool>(),
    ) {
        let data = fixtures::random_masked(n, p, obs, seed);
        let order = if first { PatternOrder::FirstAppearance } else { PatternOrder::SizeDescending };
        let index = PatternIndex::build(&data, order).unwrap();
        let mut seen = vec![0usize; n];
        for k in 0..index.len() {
            let delta = &index.pattern(k).indices;
            for &i in index.t_set(k) {
                seen[i] += 1;
                prop_assert_eq!(&data.observed_set(i), delta);
            }
            let s: Vec<usize> = (0..n).filter(|&i| data.observes_all(i, delta)).collect();
            prop_assert_eq!(index.s_set(k), s.as_slice());
            prop_assert!(index.t_set(k).iter().all(|i| index.s_set(k).contains(i)));
            prop_assert_eq!(index.n_k(k), index.s_set(k).len());
            prop_assert_eq!(index.p_k(k), delta.len());
            if k > 0 {
                prop_assert!(index.pattern(0).len() >= delta.len());
            }
            if k > 0 && !first {
                prop_assert!(index.pattern(k - 1).len() >= delta.len());
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn kl_loss_is_nonnegative_and_zero_at_truth(
        family in family_strategy(),
        theta0 in prop::collection::vec(-3.0..3.0f64, 1..20),
        noise in prop::collection::vec(-1.0..1.0f64, 20),
    ) {
        let t0 = DVector::from_vec(theta0);
        let hat = DVector::from_iterator(t0.len(), t0.iter().zip(&noise).map(|(a, b)| a + b));
        let kl = kl_loss(&hat, KlTruth::Theta(&t0), &family).unwrap();
        prop_assert!(kl.total >= -1e-12);
        prop_assert!(kl_loss(&t0, KlTruth::Theta(&t0), &family).unwrap().total.abs() < 1e-12);
    }

    #[test]
    fn correlation_is_bounded_and_affine_invariant(
        pairs in prop::collection::vec((prop::option::of(-10.0..10.0f64), -10.0..10.0f64), 2..40),
        a in 0.1..5.0f64,
        b in -5.0..5.0f64,
    ) {
        let (x, y): (Vec<Option<f64>>, Vec<f64>) = pairs.into_iter().unzip();
        if let Some((r, _)) = pairwise_correlation(&x, &y) {
            prop_assert!(r.abs() <= 1.0 + 1e-12);
            let xt: Vec<Option<f64>> = x.iter().map(|v| v.map(|v| a * v + b)).collect();
            let (rt, _) = pairwise_correlation(&xt, &y).unwrap();
            prop_assert!((r - rt).abs() < 1e-8 || r == 0.0 || rt == 0.0);
        }
    }
}
