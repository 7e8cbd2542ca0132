use std::collections::HashSet;

use proptest::prelude::*;
use prospectr::pu::{
    balance_oversample, filtered_count, select_negatives, similarity_scale, split_80_10_10, Metric, NegativeCount,
    SamplingConfig,
};
use prospectr::{Error, RngStream};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn scale_1d(ids: &[usize], unknown: &[f64], positives: &[f64]) -> prospectr::pu::SimilarityScale {
    similarity_scale(ids, unknown, positives, 1, Metric::Euclidean).unwrap()
}

fn cfg(filter: f64, n: usize) -> SamplingConfig {
    SamplingConfig { filter_range: filter, n_negatives: NegativeCount::Count(n), ..SamplingConfig::default() }
}

#[test]
fn one_dimensional_ordering_example() {
    let s = scale_1d(&[1, 3, 2], &[1.0, 3.0, 2.0], &[0.0]);
    let ordered: Vec<usize> = s.order.iter().map(|&i| s.unknown_ids[i]).collect();
    assert_eq!(ordered, vec![1, 2, 3]);
    assert_eq!(s.ranks(), vec![0, 2, 1]);
}

#[test]
fn identical_unknown_ranks_first() {
    let pos = [0.5, 0.5, 3.0, -1.0];
    let unk = [2.0, 2.0, 3.0, -1.0, 9.0, 9.0];
    let s = similarity_scale(&[10, 11, 12], &unk, &pos, 2, Metric::Euclidean).unwrap();
    assert_eq!(s.distance[1], 0.0);
    assert_eq!(s.order[0], 1);
}

#[test]
fn cosine_ignores_norm() {
    assert!(Metric::Cosine.distance(&[1.0, 2.0], &[3.0, 6.0]).abs() < 1e-15);
    assert!((Metric::Cosine.distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
    assert_eq!(Metric::Cosine.distance(&[0.0, 0.0], &[1.0, 1.0]), 1.0);
}

#[test]
fn ties_break_by_id() {
    let s = scale_1d(&[7, 2, 5], &[1.0, 1.0, 1.0], &[0.0]);
    let ordered: Vec<usize> = s.order.iter().map(|&i| s.unknown_ids[i]).collect();
    assert_eq!(ordered, vec![2, 5, 7]);
}

#[test]
fn scale_errors() {
    assert!(matches!(similarity_scale(&[0], &[1.0], &[], 1, Metric::Euclidean), Err(Error::Contract(_))));
    assert!(matches!(similarity_scale(&[0], &[1.0, 2.0], &[0.0], 1, Metric::Euclidean), Err(Error::Shape(_))));
    assert!(matches!(similarity_scale(&[0], &[1.0, 2.0], &[0.0], 2, Metric::Euclidean), Err(Error::Shape(_))));
}

#[test]
fn nearest_unknown_never_selected_over_ten_thousand_seeds() {
    let ids: Vec<usize> = (100..110).collect();
    let unk: Vec<f64> = (0..10).map(|i| 0.5 + i as f64).collect();
    let s = scale_1d(&ids, &unk, &[0.0]);
    let c = cfg(0.10, 5);
    let mut seen = HashSet::new();
    for seed in 0..10_000 {
        let neg = select_negatives(&s, &c, 5, &mut RngStream::from_seed(seed)).unwrap();
        assert!(!neg.contains(&100), "seed {seed}");
        seen.extend(neg);
    }
    assert_eq!(seen.len(), 9);
}

#[test]
fn zero_filter_selects_uniformly() {
    let n = 20;
    let ids: Vec<usize> = (0..n).collect();
    let unk: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
    let s = scale_1d(&ids, &unk, &[0.0]);
    let c = cfg(0.0, 5);
    let mut counts = vec![0.0f64; n];
    for seed in 0..20_000 {
        for id in select_negatives(&s, &c, 5, &mut RngStream::from_seed(seed)).unwrap() {
            counts[id] += 1.0;
        }
    }
    let expect = 100_000.0 / n as f64;
    let chi2: f64 = counts.iter().map(|o| (o - expect).powi(2) / expect).sum();
    let p = ChiSquared::new((n - 1) as f64).unwrap().sf(chi2);
    assert!(p > 0.01, "chi2 {chi2} p {p}");
}

#[test]
fn wide_filter_draws_only_easy_negatives() {
    let ids: Vec<usize> = (0..40).collect();
    let unk: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let s = scale_1d(&ids, &unk, &[-1.0]);
    for seed in 0..200 {
        let neg = select_negatives(&s, &cfg(0.75, 10), 10, &mut RngStream::from_seed(seed)).unwrap();
        let mut sorted = neg.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (30..40).collect::<Vec<_>>());
    }
}

#[test]
fn selection_is_deterministic_and_sized() {
    let ids: Vec<usize> = (0..30).collect();
    let unk: Vec<f64> = (0..30).map(|i| ((i * 7) % 30) as f64).collect();
    let s = scale_1d(&ids, &unk, &[0.0]);
    let c = SamplingConfig::default();
    let a = select_negatives(&s, &c, 6, &mut RngStream::from_seed(3)).unwrap();
    let b = select_negatives(&s, &c, 6, &mut RngStream::from_seed(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert_eq!(a.iter().collect::<HashSet<_>>().len(), 6);
}

#[test]
fn exhausted_pool_and_bad_filter() {
    let s = scale_1d(&[0, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0], &[0.0]);
    let r = select_negatives(&s, &cfg(0.5, 3), 3, &mut RngStream::from_seed(0));
    assert!(matches!(r, Err(Error::PoolExhausted { available: 2, requested: 3 })));
    for f in [1.0, -0.1, f64::NAN] {
        assert!(matches!(select_negatives(&s, &cfg(f, 1), 1, &mut RngStream::from_seed(0)), Err(Error::Config(_))));
    }
}

#[test]
fn filtered_count_is_ceiling() {
    assert_eq!(filtered_count(0.1, 30), 3);
    assert_eq!(filtered_count(0.1, 31), 4);
    assert_eq!(filtered_count(0.0, 31), 0);
    assert_eq!(filtered_count(0.75, 10), 8);
}

proptest! {
    #[test]
    fn filtered_ids_never_selected(seed in any::<u64>(), n in 5usize..80, filter in 0.0f64..0.9, frac in 0.05f64..1.0) {
        let mut rng = RngStream::from_seed(seed);
        let ids: Vec<usize> = (0..n).map(|i| 1000 + 3 * i).collect();
        let unk: Vec<f64> = (0..2 * n).map(|_| rng.normal()).collect();
        let pos: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let s = similarity_scale(&ids, &unk, &pos, 2, Metric::Euclidean).unwrap();
        let cut = filtered_count(filter, n);
        let want = (((n - cut) as f64 * frac) as usize).max(1).min(n - cut);
        prop_assume!(n > cut);
        let banned: HashSet<usize> = s.order[..cut].iter().map(|&i| ids[i]).collect();
        let neg = select_negatives(&s, &cfg(filter, want), 0, &mut rng).unwrap();
        prop_assert_eq!(neg.len(), want);
        prop_assert!(neg.iter().all(|id| !banned.contains(id)));
    }

    #[test]
    fn scale_is_sorted_and_nonnegative(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = RngStream::from_seed(seed);
        let ids: Vec<usize> = (0..n).collect();
        let unk: Vec<f64> = (0..3 * n).map(|_| rng.normal()).collect();
        let pos: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        for m in [Metric::Euclidean, Metric::Cosine] {
            let s = similarity_scale(&ids, &unk, &pos, 3, m).unwrap();
            prop_assert!(s.distance.iter().all(|&d| d >= 0.0));
            prop_assert!(s.order.windows(2).all(|w| s.distance[w[0]] <= s.distance[w[1]]));
            // Brute-force nearest positive.
            for (i, u) in unk.chunks(3).enumerate() {
                let d = pos.chunks(3).map(|p| m.distance(u, p)).fold(f64::INFINITY, f64::min);
                prop_assert_eq!(d, s.distance[i]);
            }
        }
    }
}

#[test]
fn oversampling_examples() {
    let mut rng = RngStream::from_seed(0);
    let b = balance_oversample(&[1, 2, 3], &[4, 5, 6], &mut rng).unwrap();
    assert_eq!((b.positives, b.negatives), (vec![1, 2, 3], vec![4, 5, 6]));
    let b = balance_oversample(&[1, 2], &[3, 4, 5, 6, 7, 8], &mut rng).unwrap();
    assert_eq!(b.positives.len(), 6);
    assert!(b.positives.contains(&1) && b.positives.contains(&2));
    let b = balance_oversample(&[9], &[1, 2, 3, 4, 5], &mut rng).unwrap();
    assert_eq!(b.positives, vec![9; 5]);
    assert!(matches!(balance_oversample(&[], &[1], &mut rng), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn oversampling_balances_and_spreads(seed in any::<u64>(), p in 1usize..20, n in 1usize..60) {
        let pos: Vec<usize> = (0..p).collect();
        let neg: Vec<usize> = (100..100 + n).collect();
        let b = balance_oversample(&pos, &neg, &mut RngStream::from_seed(seed)).unwrap();
        prop_assert_eq!(b.positives.len(), b.negatives.len());
        prop_assert_eq!(b.positives.len(), p.max(n));
        // Copies of any original differ by at most one.
        for (side, orig) in [(&b.positives, &pos), (&b.negatives, &neg)] {
            let counts: Vec<usize> = orig.iter().map(|id| side.iter().filter(|&x| x == id).count()).collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            prop_assert!(counts.iter().all(|&c| c >= 1));
        }
    }
}

fn labeled(pos: usize, neg: usize) -> Vec<(usize, bool)> {
    (0..pos).map(|i| (i, true)).chain((0..neg).map(|i| (pos + i, false))).collect()
}

#[test]
fn split_hundred_is_exact() {
    let s = split_80_10_10(&labeled(50, 50), 1).unwrap();
    let count = |v: &[(usize, bool)], c: bool| v.iter().filter(|x| x.1 == c).count();
    for c in [true, false] {
        assert_eq!((count(&s.train, c), count(&s.val, c), count(&s.test, c)), (40, 5, 5));
    }
    assert_eq!(s, split_80_10_10(&labeled(50, 50), 1).unwrap());
    assert_ne!(s, split_80_10_10(&labeled(50, 50), 2).unwrap());
}

#[test]
fn split_small_class_stays_in_train() {
    let s = split_80_10_10(&labeled(2, 20), 0).unwrap();
    assert_eq!(s.train.iter().filter(|x| x.1).count(), 2);
    assert!(matches!(split_80_10_10(&labeled(3, 3), 0), Err(Error::Contract(_))));
}

#[test]
fn splits_partition_over_a_thousand_seeds() {
    for seed in 0..1000u64 {
        let p = 5 + (seed % 37) as usize;
        let n = 5 + (seed % 53) as usize;
        let items = labeled(p, n);
        let s = split_80_10_10(&items, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).map(|x| x.0).collect();
        all.sort_unstable();
        assert_eq!(all, (0..p + n).collect::<Vec<_>>(), "seed {seed}");
        for (part, frac) in [(&s.train, 0.8), (&s.val, 0.1), (&s.test, 0.1)] {
            for (c, total) in [(true, p), (false, n)] {
                let got = part.iter().filter(|x| x.1 == c).count() as f64;
                assert!((got - frac * total as f64).abs() <= 1.0, "seed {seed}");
            }
        }
    }
}
