//! Brute-force reference implementations and random fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use robust_adapt::dataio::{EmbeddingBundle, Split};
use robust_adapt::sampling::{ContrastiveBatch, SamplingConfig};
use robust_adapt::zeroshot::PseudoLabels;
use robust_adapt::{Matrix, Rng};

/// Random bundle with `n` rows, every split populated and every
/// (class, group) cell nonempty in train.
pub fn random_bundle(seed: u64, n: usize, dim: usize, classes: usize, groups: usize) -> EmbeddingBundle {
    let mut rng = Rng::new(seed);
    let data: Vec<f32> = (0..n * dim).map(|_| rng.normal() as f32).collect();
    let class_data: Vec<f32> = (0..classes * dim).map(|_| rng.normal() as f32).collect();
    let cells = classes * groups;
    let class_labels: Vec<usize> = (0..n)
        .map(|i| if i < cells { i / groups } else { rng.below(classes) })
        .collect();
    let group_labels: Vec<usize> = (0..n)
        .map(|i| if i < cells { i % groups } else { rng.below(groups) })
        .collect();
    let splits = (0..n)
        .map(|i| match (i, rng.below(10)) {
            (i, _) if i < cells => Split::Train,
            (i, _) if i < 2 * cells => Split::Val,
            (i, _) if i < 3 * cells => Split::Test,
            (_, 0 | 1) => Split::Val,
            (_, 2 | 3) => Split::Test,
            _ => Split::Train,
        })
        .collect();
    EmbeddingBundle {
        samples: Matrix::from_vec(n, dim, data).unwrap(),
        class_embeds: Matrix::from_vec(classes, dim, class_data).unwrap(),
        class_labels,
        group_labels,
        splits,
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
        group_names: (0..groups).map(|g| format!("group{g}")).collect(),
        group_prompts: None,
    }
}

/// Pseudo-labels for `train` that are wrong with probability `p_wrong`.
pub fn random_pseudo(bundle: &EmbeddingBundle, train: &[usize], p_wrong: f64, rng: &mut Rng) -> PseudoLabels {
    let c = bundle.n_classes();
    let truth: Vec<usize> = train.iter().map(|&i| bundle.class_labels[i]).collect();
    let predicted = truth
        .iter()
        .map(|&y| if rng.next_f64() < p_wrong { (y + 1 + rng.below(c - 1)) % c } else { y })
        .collect();
    PseudoLabels::from_predictions(predicted, &truth)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na.max(1e-12) * nb.max(1e-12))
}

/// Repeated selection of the most similar remaining other-class row.
pub fn knn_oracle(samples: &Matrix, labels: &[usize], anchor: usize, k: usize) -> Vec<usize> {
    let mut taken = vec![false; labels.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..labels.len() {
            if taken[i] || labels[i] == labels[anchor] {
                continue;
            }
            let s = cosine(samples.row(i), samples.row(anchor));
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        match best {
            Some((i, _)) => {
                taken[i] = true;
                out.push(i);
            }
            None => break,
        }
    }
    out
}

pub fn contrastive_oracle(
    bundle: &EmbeddingBundle,
    train: &[usize],
    pseudo: &PseudoLabels,
    cfg: &SamplingConfig,
) -> Vec<ContrastiveBatch> {
    let sub = bundle.samples.select_rows(train);
    let labels: Vec<usize> = train.iter().map(|&i| bundle.class_labels[i]).collect();
    let mut out = Vec::new();
    for a in 0..train.len() {
        if pseudo.correct[a] {
            continue;
        }
        let mut candidates = Vec::new();
        for p in 0..train.len() {
            let ok = labels[p] == labels[a]
                && pseudo.correct[p]
                && (!cfg.strict_positive_filter || pseudo.labels[p] != pseudo.labels[a]);
            if ok {
                candidates.push(p);
            }
        }
        if candidates.is_empty() {
            continue;
        }
        let mut rng = Rng::derive(cfg.seed, train[a] as u64);
        let positives: Vec<usize> = if candidates.len() >= cfg.num_positives {
            rng.sample_distinct(candidates.len(), cfg.num_positives)
                .iter()
                .map(|&j| train[candidates[j]])
                .collect()
        } else {
            (0..cfg.num_positives)
                .map(|_| train[candidates[rng.below(candidates.len())]])
                .collect()
        };
        let pool = knn_oracle(&sub, &labels, a, cfg.num_neighbors);
        let m = cfg.num_negatives.min(pool.len());
        let negatives = rng
            .sample_distinct(pool.len(), m)
            .iter()
            .map(|&j| train[pool[j]])
            .collect();
        out.push(ContrastiveBatch {
            anchor: train[a],
            positives,
            negatives,
        });
    }
    out
}

/// Rows of `train` of class `c`, split by pseudo-correctness.
fn sides(bundle: &EmbeddingBundle, train: &[usize], pseudo: &PseudoLabels, c: usize) -> (Vec<usize>, Vec<usize>) {
    let correct = (0..train.len())
        .filter(|&j| bundle.class_labels[train[j]] == c && pseudo.correct[j])
        .map(|j| train[j])
        .collect();
    let incorrect = (0..train.len())
        .filter(|&j| bundle.class_labels[train[j]] == c && !pseudo.correct[j])
        .map(|j| train[j])
        .collect();
    (correct, incorrect)
}

pub fn resample_oracle(bundle: &EmbeddingBundle, train: &[usize], pseudo: &PseudoLabels, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::new();
    for c in 0..bundle.n_classes() {
        let (correct, incorrect) = sides(bundle, train, pseudo, c);
        out.extend(&correct);
        if correct.is_empty() {
            out.extend(&incorrect);
        } else if !incorrect.is_empty() {
            for _ in 0..correct.len() {
                out.push(incorrect[rng.below(incorrect.len())]);
            }
        }
    }
    out
}

pub fn dfr_oracle(
    bundle: &EmbeddingBundle,
    train: &[usize],
    pseudo: &PseudoLabels,
    upsample: bool,
    rng: &mut Rng,
) -> Vec<usize> {
    let mut out = Vec::new();
    for c in 0..bundle.n_classes() {
        let (correct, incorrect) = sides(bundle, train, pseudo, c);
        if correct.is_empty() || incorrect.is_empty() {
            out.extend(&correct);
            out.extend(&incorrect);
            continue;
        }
        let (a, b) = (correct.len(), incorrect.len());
        let target = if upsample { a.max(b) } else { a.min(b) };
        for side in [&correct, &incorrect] {
            if side.len() > target {
                let mut keep = rng.sample_distinct(side.len(), target);
                keep.sort();
                out.extend(keep.iter().map(|&k| side[k]));
            } else {
                out.extend(side.iter());
                for _ in side.len()..target {
                    out.push(side[rng.below(side.len())]);
                }
            }
        }
    }
    out
}

/// Label of the most similar cache row, lowest index on ties.
pub fn tip_oracle(samples: &Matrix, labels: &[usize], query: &[f32]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for i in 0..samples.rows() {
        let s = cosine(samples.row(i), query);
        if s > best_sim {
            best_sim = s;
            best = i;
        }
    }
    labels[best]
}

/// Per-(class, group) accuracy by direct counting; returns
/// `(average, worst group)`.
pub fn group_accuracy_oracle(pred: &[usize], labels: &[usize], groups: &[usize]) -> (f64, f64) {
    let mut worst = f64::INFINITY;
    let max_c = labels.iter().max().copied().unwrap_or(0);
    let max_g = groups.iter().max().copied().unwrap_or(0);
    for c in 0..=max_c {
        for g in 0..=max_g {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c && groups[i] == g).collect();
            if idx.is_empty() {
                continue;
            }
            let acc = idx.iter().filter(|&&i| pred[i] == labels[i]).count() as f64 / idx.len() as f64;
            worst = worst.min(acc);
        }
    }
    let avg = (0..labels.len()).filter(|&i| pred[i] == labels[i]).count() as f64 / labels.len() as f64;
    (avg, worst)
}

/// Runs every randomized algorithm against its oracle on one seeded fixture
/// of 50 to 200 rows and describes the first disagreement.
pub fn oracle_mismatch(seed: u64) -> Option<String> {
    use robust_adapt::baselines::{dfr_balance, tip_lookup, DfrMode};
    use robust_adapt::sampling::{build_contrastive_batches, build_resampled_train, knn_other_class};

    let n = 50 + (seed as usize * 37) % 151;
    let b = random_bundle(seed, n, 6, 2 + seed as usize % 3, 2);
    let train = b.split_view(Split::Train);
    let pseudo = random_pseudo(&b, &train, 0.25, &mut Rng::new(seed + 100));
    let cfg = SamplingConfig {
        num_positives: 7,
        num_negatives: 5,
        num_neighbors: 9,
        seed,
        strict_positive_filter: false,
    };
    if build_contrastive_batches(&b, &train, &pseudo, &cfg).ok()? != contrastive_oracle(&b, &train, &pseudo, &cfg) {
        return Some(format!("seed {seed}: build_contrastive_batches"));
    }
    if build_resampled_train(&b, &train, &pseudo, &mut Rng::new(seed)).ok()?
        != resample_oracle(&b, &train, &pseudo, &mut Rng::new(seed))
    {
        return Some(format!("seed {seed}: build_resampled_train"));
    }
    for (mode, up) in [(DfrMode::Subsample, false), (DfrMode::Upsample, true)] {
        if dfr_balance(&b, &train, &pseudo, mode, &mut Rng::new(seed)).ok()?
            != dfr_oracle(&b, &train, &pseudo, up, &mut Rng::new(seed))
        {
            return Some(format!("seed {seed}: dfr_balance {mode:?}"));
        }
    }
    let cache = b.samples.select_rows(&train);
    let labels: Vec<usize> = train.iter().map(|&i| b.class_labels[i]).collect();
    for q in b.split_view(Split::Test) {
        let query = b.samples.row(q);
        if tip_lookup(&cache, &labels, query).ok()? != tip_oracle(&cache, &labels, query) {
            return Some(format!("seed {seed}: tip_lookup row {q}"));
        }
    }
    for anchor in 0..n {
        if knn_other_class(&b.samples, &b.class_labels, anchor, 11).ok()?
            != knn_oracle(&b.samples, &b.class_labels, anchor, 11)
        {
            return Some(format!("seed {seed}: knn_other_class anchor {anchor}"));
        }
    }
    None
}
