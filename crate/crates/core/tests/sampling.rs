mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use robust_adapt::baselines::{dfr_balance, DfrMode};
use robust_adapt::sampling::{build_contrastive_batches, build_resampled_train, knn_other_class, SamplingConfig};
use robust_adapt::{Rng, Split};

use common::*;

fn config(p: usize, m: usize, mstar: usize, seed: u64) -> SamplingConfig {
    SamplingConfig {
        num_positives: p,
        num_negatives: m,
        num_neighbors: mstar,
        seed,
        strict_positive_filter: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batches_respect_their_contract(
        seed in 0u64..10_000,
        n in 30usize..90,
        classes in 2usize..4,
        p in 1usize..12,
        m in 1usize..8,
        extra in 0usize..8,
    ) {
        let b = random_bundle(seed, n, 5, classes, 2);
        let train = b.split_view(Split::Train);
        let pseudo = random_pseudo(&b, &train, 0.3, &mut Rng::new(seed ^ 1));
        let cfg = config(p, m, m + extra, seed);
        let batches = build_contrastive_batches(&b, &train, &pseudo, &cfg).unwrap();
        let pos = |i: usize| train.iter().position(|&t| t == i).unwrap();
        let anchors: Vec<usize> = batches.iter().map(|x| x.anchor).collect();
        prop_assert_eq!(anchors.iter().collect::<HashSet<_>>().len(), anchors.len());
        for batch in &batches {
            let a = pos(batch.anchor);
            let y = b.class_labels[batch.anchor];
            prop_assert!(!pseudo.correct[a]);
            prop_assert_eq!(batch.positives.len(), p);
            let distinct: HashSet<_> = batch.positives.iter().collect();
            let n_candidates = (0..train.len())
                .filter(|&j| pseudo.correct[j] && b.class_labels[train[j]] == y)
                .count();
            if n_candidates >= p {
                prop_assert_eq!(distinct.len(), p);
            }
            for &q in &batch.positives {
                prop_assert_eq!(b.class_labels[q], y);
                prop_assert!(pseudo.correct[pos(q)]);
            }
            let labels: Vec<usize> = train.iter().map(|&i| b.class_labels[i]).collect();
            let pool = knn_other_class(&b.samples.select_rows(&train), &labels, a, cfg.num_neighbors).unwrap();
            prop_assert_eq!(batch.negatives.len(), m.min(pool.len()));
            prop_assert_eq!(batch.negatives.iter().collect::<HashSet<_>>().len(), batch.negatives.len());
            for &q in &batch.negatives {
                prop_assert!(b.class_labels[q] != y);
                prop_assert!(pool.contains(&pos(q)));
            }
        }
        // Every incorrect row is an anchor unless its class has no positives.
        for (j, &i) in train.iter().enumerate() {
            let y = b.class_labels[i];
            let has_pos = (0..train.len()).any(|k| pseudo.correct[k] && b.class_labels[train[k]] == y);
            prop_assert_eq!(!pseudo.correct[j] && has_pos, anchors.contains(&i));
        }
    }

    #[test]
    fn knn_is_sorted_and_other_class(seed in 0u64..10_000, n in 5usize..60, k in 1usize..20) {
        let b = random_bundle(seed, n, 4, 3, 1);
        let anchor = seed as usize % n;
        let got = knn_other_class(&b.samples, &b.class_labels, anchor, k).unwrap();
        let pool = (0..n).filter(|&i| b.class_labels[i] != b.class_labels[anchor]).count();
        prop_assert_eq!(got.len(), k.min(pool));
        prop_assert_eq!(got, knn_oracle(&b.samples, &b.class_labels, anchor, k));
    }

    #[test]
    fn resampling_balances_each_class(seed in 0u64..10_000, n in 20usize..80, p_wrong in 0.0f64..0.9) {
        let b = random_bundle(seed, n, 3, 3, 2);
        let train = b.split_view(Split::Train);
        let pseudo = random_pseudo(&b, &train, p_wrong, &mut Rng::new(seed));
        let ustar = build_resampled_train(&b, &train, &pseudo, &mut Rng::new(seed + 1)).unwrap();
        for c in 0..3 {
            let correct = (0..train.len()).filter(|&j| pseudo.correct[j] && b.class_labels[train[j]] == c).count();
            let incorrect = (0..train.len()).filter(|&j| !pseudo.correct[j] && b.class_labels[train[j]] == c).count();
            let got = ustar.iter().filter(|&&i| b.class_labels[i] == c).count();
            let want = match (correct, incorrect) {
                (0, k) => k,
                (k, 0) => k,
                (k, _) => 2 * k,
            };
            prop_assert_eq!(got, want);
        }
        prop_assert!(ustar.iter().all(|i| train.contains(i)));
    }

    #[test]
    fn dfr_sides_are_equal(seed in 0u64..10_000, n in 20usize..80, up in any::<bool>()) {
        let b = random_bundle(seed, n, 3, 2, 2);
        let train = b.split_view(Split::Train);
        let pseudo = random_pseudo(&b, &train, 0.4, &mut Rng::new(seed));
        let mode = if up { DfrMode::Upsample } else { DfrMode::Subsample };
        let rows = dfr_balance(&b, &train, &pseudo, mode, &mut Rng::new(seed)).unwrap();
        let correct_of = |i: usize| pseudo.correct[train.iter().position(|&t| t == i).unwrap()];
        for c in 0..2 {
            let (k, w): (Vec<usize>, Vec<usize>) = rows
                .iter()
                .filter(|&&i| b.class_labels[i] == c)
                .partition(|&&i| correct_of(i));
            if !k.is_empty() && !w.is_empty() {
                prop_assert_eq!(k.len(), w.len());
            }
        }
    }
}

#[test]
fn algorithms_match_brute_force_oracles() {
    for seed in 0..20u64 {
        assert_eq!(oracle_mismatch(seed), None);
    }
}
