//! Contrastive batch construction and pseudo-label-balanced resampling.
//!
//! All neighbor searches run over the pretrained embeddings of the bundle,
//! never over adapted ones. Indices in and out are bundle row indices.

use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix, Rng, Scalar, NORM_EPS};
use crate::zeroshot::PseudoLabels;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub num_positives: usize,
    pub num_negatives: usize,
    pub num_neighbors: usize,
    pub seed: u64,
    /// Additionally require `ŷ_p ≠ ŷ_a` for positives.
    pub strict_positive_filter: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            num_positives: 512,
            num_negatives: 512,
            num_neighbors: 1024,
            seed: 0,
            strict_positive_filter: false,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_positives == 0 {
            return Err(Error::Config("sampling.num_positives must be >= 1".into()));
        }
        if self.num_negatives == 0 || self.num_negatives > self.num_neighbors {
            return Err(Error::Config(
                "sampling requires 1 <= num_negatives <= num_neighbors".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveBatch {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Rows of `samples` scaled to unit norm, in f64.
fn unit_rows(samples: &Matrix) -> Vec<Vec<f64>> {
    samples
        .iter_rows()
        .map(|r| {
            let n = norm(r).max(NORM_EPS as f64);
            r.iter().map(|v| v.as_f64() / n).collect()
        })
        .collect()
}

fn nearest_other_class(units: &[Vec<f64>], labels: &[usize], anchor: usize, k: usize) -> Vec<usize> {
    let a = &units[anchor];
    let mut scored: Vec<(f64, usize)> = units
        .iter()
        .enumerate()
        .filter(|&(i, _)| labels[i] != labels[anchor])
        .map(|(i, u)| (u.iter().zip(a).map(|(x, y)| x * y).sum(), i))
        .collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// The `k` rows of `samples` with the highest cosine similarity to row
/// `anchor` among rows whose label differs from the anchor's, in descending
/// similarity with ties to the lower index. Returns fewer when the pool is
/// smaller than `k`.
pub fn knn_other_class(samples: &Matrix, labels: &[usize], anchor: usize, k: usize) -> Result<Vec<usize>> {
    if samples.rows() != labels.len() {
        return Err(Error::shape("knn_other_class", samples.rows(), labels.len()));
    }
    if anchor >= labels.len() {
        return Err(Error::shape("knn_other_class anchor", format!("< {}", labels.len()), anchor));
    }
    Ok(nearest_other_class(&unit_rows(samples), labels, anchor, k))
}

/// One contrastive batch per pseudo-incorrect row of `train`.
///
/// `pseudo` is aligned with `train`. Positives are same-class pseudo-correct
/// rows, drawn without replacement when at least `P` exist and with
/// replacement otherwise. Negatives are `M` rows drawn without replacement
/// from the `M*` nearest other-class rows. Anchors of a class without any
/// positive candidate are dropped with a warning.
///
/// Each anchor draws from its own stream `Rng::derive(seed, anchor)`.
pub fn build_contrastive_batches(
    bundle: &EmbeddingBundle,
    train: &[usize],
    pseudo: &PseudoLabels,
    cfg: &SamplingConfig,
) -> Result<Vec<ContrastiveBatch>> {
    cfg.validate()?;
    if pseudo.labels.len() != train.len() || pseudo.correct.len() != train.len() {
        return Err(Error::shape("build_contrastive_batches", train.len(), pseudo.labels.len()));
    }
    let labels: Vec<usize> = train.iter().map(|&i| bundle.class_labels[i]).collect();
    let units = unit_rows(&bundle.samples.select_rows(train));

    let mut batches = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();
    for a in (0..train.len()).filter(|&a| !pseudo.correct[a]) {
        let y = labels[a];
        let candidates: Vec<usize> = (0..train.len())
            .filter(|&p| labels[p] == y && pseudo.correct[p])
            .filter(|&p| !cfg.strict_positive_filter || pseudo.labels[p] != pseudo.labels[a])
            .collect();
        if candidates.is_empty() {
            if !dropped.contains(&y) {
                dropped.push(y);
            }
            continue;
        }
        let mut rng = Rng::derive(cfg.seed, train[a] as u64);
        let positives: Vec<usize> = if candidates.len() >= cfg.num_positives {
            rng.sample_distinct(candidates.len(), cfg.num_positives)
                .into_iter()
                .map(|j| candidates[j])
                .collect()
        } else {
            (0..cfg.num_positives)
                .map(|_| candidates[rng.below(candidates.len())])
                .collect()
        };
        let pool = nearest_other_class(&units, &labels, a, cfg.num_neighbors);
        let m = cfg.num_negatives.min(pool.len());
        let negatives: Vec<usize> = rng.sample_distinct(pool.len(), m).into_iter().map(|j| pool[j]).collect();
        batches.push(ContrastiveBatch {
            anchor: train[a],
            positives: positives.into_iter().map(|p| train[p]).collect(),
            negatives: negatives.into_iter().map(|n| train[n]).collect(),
        });
    }
    for class in dropped {
        log::warn!(
            "{}; dropping its anchors",
            Error::NoPositives(class)
        );
    }
    Ok(batches)
}

/// Per class, the pseudo-correct rows plus `|correct|` draws with
/// replacement from the pseudo-incorrect rows. A class with no correct rows
/// contributes its incorrect rows once.
pub fn build_resampled_train(
    bundle: &EmbeddingBundle,
    train: &[usize],
    pseudo: &PseudoLabels,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if pseudo.correct.len() != train.len() {
        return Err(Error::shape("build_resampled_train", train.len(), pseudo.correct.len()));
    }
    let mut out = Vec::new();
    for c in 0..bundle.n_classes() {
        let (mut correct, mut incorrect) = (Vec::new(), Vec::new());
        for (j, &i) in train.iter().enumerate() {
            if bundle.class_labels[i] == c {
                if pseudo.correct[j] {
                    correct.push(i);
                } else {
                    incorrect.push(i);
                }
            }
        }
        if correct.is_empty() {
            if !incorrect.is_empty() {
                log::warn!("class {c} has no pseudo-correct rows; its incorrect rows are not upsampled");
            }
            out.extend(incorrect);
            continue;
        }
        let n = correct.len();
        out.extend(correct);
        if !incorrect.is_empty() {
            out.extend((0..n).map(|_| incorrect[rng.below(incorrect.len())]));
        }
    }
    Ok(out)
}
