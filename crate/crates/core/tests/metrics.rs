use proptest::prelude::*;
use stormtail_core::grid::Mask;
use stormtail_core::metrics::{
    contingency, coverage_order, coverage_ranking, fss, per_sample_average, scores, top_count, ContingencyTable,
    Metric,
};

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |d| Mask::new(h, w, d).unwrap())
}

/// Window fractions by visiting every in-grid neighbour.
fn naive_fss(p: &Mask, o: &Mask, n: usize) -> f64 {
    let (h, w) = (p.height() as i64, p.width() as i64);
    let r = (n / 2) as i64;
    let frac = |m: &Mask, i: i64, j: i64| {
        let (mut hit, mut cells) = (0.0, 0.0);
        for a in i - r..=i + r {
            for b in j - r..=j + r {
                if a >= 0 && a < h && b >= 0 && b < w {
                    cells += 1.0;
                    if m.data()[(a * w + b) as usize] {
                        hit += 1.0;
                    }
                }
            }
        }
        hit / cells
    };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let (fp, fo) = (frac(p, i, j), frac(o, i, j));
            num += (fp - fo) * (fp - fo);
            den += fp * fp + fo * fo;
        }
    }
    if den == 0.0 {
        1.0
    } else {
        1.0 - num / den
    }
}

proptest! {
    #[test]
    fn fss_matches_naive_windows(p in mask_strategy(7, 9), o in mask_strategy(7, 9), n in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let got = fss(&p, &o, n).unwrap();
        prop_assert!((got - naive_fss(&p, &o, n)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn fss_of_identical_masks_is_one(m in mask_strategy(6, 6), n in prop::sample::select(vec![1usize, 3, 5])) {
        prop_assert_eq!(fss(&m, &m, n).unwrap(), 1.0);
    }

    #[test]
    fn table_counts_partition_the_grid(p in mask_strategy(5, 8), o in mask_strategy(5, 8)) {
        let t = contingency(&p, &o).unwrap();
        prop_assert_eq!(t.total(), 40);
        prop_assert_eq!(t.tp + t.fp, p.count() as u64);
        prop_assert_eq!(t.tp + t.fn_, o.count() as u64);
    }

    #[test]
    fn scores_stay_in_range(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..500) {
        let s = scores(&ContingencyTable { tp, fp, fn_, tn });
        for m in [Metric::Csi, Metric::Pod, Metric::Far, Metric::Mar, Metric::F1] {
            if let Some(v) = s.get(m) {
                prop_assert!((0.0..=1.0).contains(&v), "{:?} = {}", m, v);
            }
        }
        if let Some(e) = s.ets {
            prop_assert!((-1.0 / 3.0 - 1e-12..=1.0 + 1e-12).contains(&e));
        }
        if let Some(v) = s.sedi {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
        if let (Some(pod), Some(mar)) = (s.pod, s.mar) {
            prop_assert!((pod + mar - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stacked_grids_pool_their_tables(a in mask_strategy(4, 6), b in mask_strategy(4, 6), c in mask_strategy(4, 6), d in mask_strategy(4, 6)) {
        let stack = |x: &Mask, y: &Mask| Mask::new(8, 6, x.data().iter().chain(y.data()).copied().collect()).unwrap();
        let joint = contingency(&stack(&a, &c), &stack(&b, &d)).unwrap();
        prop_assert_eq!(joint, contingency(&a, &b).unwrap() + contingency(&c, &d).unwrap());
    }
}

#[test]
fn per_sample_average_skips_undefined_samples() {
    let defined = ContingencyTable { tp: 1, fp: 1, fn_: 0, tn: 2 };
    let empty = ContingencyTable { tp: 0, fp: 0, fn_: 0, tn: 4 };
    let avg = per_sample_average(&[defined, empty]);
    assert_eq!(avg.csi, Some(0.5));
}

#[test]
fn ranking_selects_highest_coverage_first() {
    let obs: Vec<Mask> = (0..10)
        .map(|k| Mask::new(2, 5, (0..10).map(|i| i < k).collect()).unwrap())
        .collect();
    let order = coverage_order(&obs);
    assert_eq!(order[..3], [9, 8, 7]);
    assert_eq!(top_count(100, 0.01), 1);
    assert_eq!(top_count(400, 0.25), 100);
    assert_eq!(top_count(7, 0.1), 1);
    let ranked = coverage_ranking(&obs, &obs, &[0.25, 0.1], 1).unwrap();
    assert_eq!(ranked[0].samples, 3);
    assert_eq!(ranked[1].samples, 1);
    assert_eq!(ranked[1].table.tp, 9);
}
