use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stormtail_core::feature_quality::{
    ch_index, f1_svm, fisher_score, intra_sim, inter_sim, knn_acc, macro_f1, FeatureSample, ProgressiveCaps, SvmConfig,
};

fn sample() -> impl Strategy<Value = FeatureSample> {
    (2usize..5, 6usize..30).prop_flat_map(|(dim, n)| {
        (
            prop::collection::vec(-3.0f64..3.0, dim * n),
            prop::collection::vec(0usize..3, n),
        )
            .prop_filter("three classes with two members each", |(_, l)| {
                (0..3).all(|k| l.iter().filter(|&&x| x == k).count() >= 2)
            })
            .prop_map(move |(v, l)| FeatureSample::new(dim, v, l, "test").unwrap())
    })
}

fn scaled(fs: &FeatureSample, s: f64) -> FeatureSample {
    FeatureSample::new(fs.dim, fs.vectors.iter().map(|v| v * s).collect(), fs.labels.clone(), "scaled").unwrap()
}

proptest! {
    #[test]
    fn similarities_stay_in_range(fs in sample()) {
        for v in [intra_sim(&fs).unwrap(), inter_sim(&fs).unwrap()] {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
        }
        let k = knn_acc(&fs).unwrap();
        prop_assert!((0.0..=1.0).contains(&k));
        if let Some(f) = fisher_score(&fs).unwrap() {
            prop_assert!(f >= 0.0);
        }
    }

    #[test]
    fn metrics_are_scale_invariant(fs in sample(), s in 0.1f64..10.0) {
        let t = scaled(&fs, s);
        prop_assert!((intra_sim(&fs).unwrap() - intra_sim(&t).unwrap()).abs() < 1e-10);
        prop_assert_eq!(knn_acc(&fs).unwrap(), knn_acc(&t).unwrap());
        let (a, b) = (fisher_score(&fs).unwrap().unwrap(), fisher_score(&t).unwrap().unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        let (a, b) = (ch_index(&fs).unwrap().unwrap(), ch_index(&t).unwrap().unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn caps_grow_with_pools_up_to_the_limit(a in 0usize..100_000, b in 0usize..100_000) {
        let p = ProgressiveCaps::default();
        let (lo, hi) = (a.min(b), a.max(b));
        let caps = p.caps(&[lo, hi]);
        prop_assert!(caps[0] <= caps[1] && caps[1] <= p.max_cap);
    }
}

#[test]
fn separable_clusters_score_perfectly() {
    let mut v = Vec::new();
    let mut l = Vec::new();
    for k in 0..3usize {
        for i in 0..12 {
            let mut row = [0.0; 3];
            row[k] = 5.0 + 0.05 * i as f64;
            row[(k + 1) % 3] = 0.01 * i as f64;
            v.extend_from_slice(&row);
            l.push(k);
        }
    }
    let fs = FeatureSample::new(3, v, l, "clusters").unwrap();
    assert_eq!(knn_acc(&fs).unwrap(), 1.0);
    let f1 = f1_svm(&fs, &SvmConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(f1, 1.0);
    assert!(intra_sim(&fs).unwrap() > 0.99);
    assert!(inter_sim(&fs).unwrap() < 0.05);
}

#[test]
fn macro_f1_hand_example() {
    // Class 0: tp 1, fp 1, fn 1 -> F1 1/2. Class 1: tp 1, fp 1, fn 1 -> 1/2.
    let f = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 0], &[0, 1]);
    assert!((f - 0.5).abs() < 1e-15);
}
