use proptest::prelude::*;
use sco_adversary::codebook::{coherence, generate_codebook, Codebook, MAX_COHERENCE};
use sco_adversary::instance_smallstep::SmallStepParams;
use sco_adversary::objective::FnSurface;
use sco_adversary::optim::{project_ball, run_gd, suffix_average, Record};
use sco_adversary::risk::empirical_risk;
use sco_adversary::rng::seeded;
use sco_adversary::smoothing::{smoothed_grad, smoothed_value, sphere_sample, SmoothingConfig};
use sco_adversary::vecops::{max_abs_diff, norm, sub};

fn vec_in(dim: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_lands_in_ball_and_contracts(a in vec_in(7, 3.0), b in vec_in(7, 3.0)) {
        let (pa, pb) = (project_ball(&a), project_ball(&b));
        prop_assert!(norm(&pa) <= 1.0 + 1e-15);
        // A projected point may sit an ulp outside the ball and move again.
        prop_assert!(max_abs_diff(&project_ball(&pa), &pa) <= 1e-15);
        prop_assert!(norm(&sub(&pa, &pb)) <= norm(&sub(&a, &b)) * (1.0 + 1e-12));
        if norm(&a) <= 1.0 {
            prop_assert_eq!(pa, a);
        }
    }

    #[test]
    fn sphere_samples_have_unit_norm(dim in 1usize..300, seed in any::<u64>()) {
        let v = sphere_sample(dim, &mut seeded(seed)).unwrap();
        prop_assert_eq!(v.len(), dim);
        prop_assert!((norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smallstep_empirical_risk_matches_loss(eta in 0.005f64..0.05, t in 1usize..60, w in vec_in(4, 0.2)) {
        let p = SmallStepParams::new(eta, t).unwrap();
        let mut x = vec![0.0; p.d];
        for (xi, wi) in x.iter_mut().zip(&w) {
            *xi = *wi;
        }
        let risk = empirical_risk(&p, &x, &[(), (), ()]).unwrap();
        prop_assert!((risk - p.loss(&x)).abs() <= 1e-15);
    }

    #[test]
    fn smallstep_gd_stays_above_floor(eta in 0.005f64..0.05, t in 1usize..80) {
        let p = SmallStepParams::new(eta, t).unwrap();
        let traj = run_gd(&p, &[()], p.eta, p.t, false, Record::All).unwrap();
        let floor = (0.25f64).min(1.0 / (20.0 * eta * t as f64));
        for m in [1, t] {
            let avg = suffix_average(&traj, m).unwrap();
            prop_assert!(p.loss(&avg) >= floor - 1e-12, "m={m}: {} < {floor}", p.loss(&avg));
        }
    }

    #[test]
    fn smoothing_a_lipschitz_function_moves_it_by_at_most_delta(
        w in vec_in(5, 1.0),
        delta in 0.01f64..0.5,
        seed in any::<u64>(),
    ) {
        let s = FnSurface { dim: 5, f: |x: &[f64]| norm(x) };
        let cfg = SmoothingConfig { delta, samples: 256, seed, antithetic: false };
        let v = smoothed_value(&s, &w, &cfg).unwrap();
        // Every draw lies within delta of f(w), hence so does the mean.
        prop_assert!((v.estimate - norm(&w)).abs() <= delta * (1.0 + 1e-12));
    }

    #[test]
    fn antithetic_gradient_of_linear_function_is_exact_in_mean(
        g in vec_in(4, 1.0),
        seed in any::<u64>(),
    ) {
        let gc = g.clone();
        let s = FnSurface { dim: 4, f: move |x: &[f64]| x.iter().zip(&gc).map(|(a, b)| a * b).sum() };
        let cfg = SmoothingConfig { delta: 0.1, samples: 4096, seed, antithetic: true };
        let est = smoothed_grad(&s, &[0.0; 4], &cfg).unwrap();
        for i in 0..4 {
            prop_assert!((est.estimate[i] - g[i]).abs() <= 6.0 * est.stderr[i] + 1e-9);
        }
    }

    #[test]
    fn codebooks_are_normalized_coherent_and_reproducible(n in 2usize..24, seed in 0u64..1000) {
        let cb = generate_codebook(n, 256, seed, 100_000).unwrap();
        let x = 1.0 / 16.0;
        for i in 0..n {
            prop_assert!(cb.vector(i).iter().all(|&v| v == x || v == -x));
        }
        prop_assert!(coherence(&cb) <= MAX_COHERENCE);
        prop_assert_eq!(&cb, &generate_codebook(n, 256, seed, 100_000).unwrap());
        prop_assert_eq!(&cb, &Codebook::from_json(&cb.to_json().unwrap()).unwrap());
    }
}
