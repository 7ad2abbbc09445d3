use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stormtail_core::conformal::{calibrate, conformity_scores, conservative_rank, predict_set, CoverageStats};
use stormtail_core::field::ProbField;
use stormtail_core::grid::ClassField;
use stormtail_core::qm::fit_qm;

/// Random softmax field whose true class gets a noisy boost.
fn draw(rng: &mut ChaCha8Rng, c: usize, n: usize) -> (ProbField, ClassField) {
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..c) as u8).collect();
    let mut z = vec![0.0_f64; c * n];
    for p in 0..n {
        for k in 0..c {
            let boost = if usize::from(labels[p]) == k { 1.0 } else { 0.0 };
            z[k * n + p] = boost + rng.random_range(-1.5..1.5);
        }
    }
    let mut probs = vec![0.0; c * n];
    for p in 0..n {
        let s: f64 = (0..c).map(|k| z[k * n + p].exp()).sum();
        for k in 0..c {
            probs[k * n + p] = z[k * n + p].exp() / s;
        }
    }
    (
        ProbField::new(c, 1, n, probs).unwrap(),
        ClassField::new(1, n, labels, c).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn class_conditional_coverage_holds(seed in 0u64..10_000, alpha in 0.05f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cp, cl) = draw(&mut rng, 3, 1500);
        let (tp, tl) = draw(&mut rng, 3, 3000);
        let calib = calibrate(&conformity_scores(&[cp], &[cl]).unwrap(), alpha).unwrap();
        let mut cov = CoverageStats::new(3);
        cov.add(&predict_set(&tp, &calib).unwrap(), &tl).unwrap();
        // Finite-sample coverage is at least 1 - alpha in expectation; allow
        // sampling slack for one draw.
        for (k, p) in cov.per_class_picp().into_iter().enumerate() {
            prop_assert!(p.unwrap() >= 1.0 - alpha - 0.05, "class {} coverage {:?}", k, p);
        }
    }

    #[test]
    fn sets_nest_as_alpha_grows(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cp, cl) = draw(&mut rng, 4, 400);
        let (tp, _) = draw(&mut rng, 4, 200);
        let scores = conformity_scores(&[cp], &[cl]).unwrap();
        let small = predict_set(&tp, &calibrate(&scores, 0.3).unwrap()).unwrap();
        let large = predict_set(&tp, &calibrate(&scores, 0.05).unwrap()).unwrap();
        for (s, l) in small.members.iter().zip(&large.members) {
            prop_assert!(!s | l);
        }
    }

    #[test]
    fn rank_is_ceiling_of_quantile(n in 1usize..5000, alpha in 0.001f64..0.999) {
        let r = conservative_rank(n, alpha);
        let x = (1.0 - alpha) * (n + 1) as f64;
        prop_assert!(r as f64 >= x - 1e-9 && (r as f64) < x + 1.0);
    }

    #[test]
    fn qm_of_matching_pools_is_near_identity(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..10.0)).collect();
        let b: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..10.0)).collect();
        let grid = 101;
        let qm = fit_qm(&a, &b, grid).unwrap();
        // Two independent empirical CDFs of 5000 draws differ by a few
        // percent of the range at most.
        for x in [0.5, 2.0, 5.0, 7.5, 9.5] {
            prop_assert!((qm.map(x) - x).abs() < 0.06 * 10.0);
        }
    }
}

#[test]
fn unseen_class_gets_the_full_set() {
    let probs = ProbField::new(2, 1, 2, vec![0.9, 0.2, 0.1, 0.8]).unwrap();
    let labels = ClassField::new(1, 2, vec![0, 0], 2).unwrap();
    let calib = calibrate(&conformity_scores(std::slice::from_ref(&probs), &[labels]).unwrap(), 0.1).unwrap();
    assert_eq!(calib.q[1], 1.0);
    assert_eq!(calib.counts, vec![2, 0]);
    let sets = predict_set(&probs, &calib).unwrap();
    assert!(sets.contains(0, 1) && sets.contains(1, 1));
}

#[test]
fn qm_recovers_a_linear_stretch() {
    let a: Vec<f64> = (0..=2000).map(|i| i as f64 / 1000.0).collect();
    let b: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
    let qm = fit_qm(&a, &b, 201).unwrap();
    for x in [0.0, 0.3, 1.0, 1.7, 2.0] {
        assert!((qm.map(x) - 2.0 * x).abs() < 1e-9);
    }
    // Outside the fitted range the outer quantile ratio extrapolates.
    assert!((qm.map(3.0) - 6.0).abs() < 1e-9);
}
