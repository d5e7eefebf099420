//! Linear heads and the comparison methods: weight-space ensembling with the
//! zero-shot head, DFR on inferred groups, and nearest-training-sample lookup.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataio::{EmbeddingBundle, Split};
use crate::error::{Error, Result};
use crate::numerics::{argmax, gemm, norm, Matrix, Rng, NORM_EPS};
use crate::trainer::{train_linear_probe_on, TrainConfig, TrainRun};
use crate::zeroshot::{pseudolabels, PseudoLabels, ZeroShotHead};

/// Logits `W u + b` over `C` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `C×D`.
    pub weights: Matrix,
    pub bias: Vec<f32>,
    /// l2-normalize inputs before applying the head.
    pub normalize_inputs: bool,
}

impl LinearHead {
    pub fn new(weights: Matrix, bias: Vec<f32>, normalize_inputs: bool) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape("LinearHead bias", weights.rows(), bias.len()));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("linear head"));
        }
        Ok(Self {
            weights,
            bias,
            normalize_inputs,
        })
    }

    /// Fan-in uniform initialization.
    pub fn init(n_classes: usize, dim: usize, normalize_inputs: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect() };
        let weights = Matrix::from_vec(n_classes, dim, draw(n_classes * dim)).unwrap();
        let bias = draw(n_classes);
        Self {
            weights,
            bias,
            normalize_inputs,
        }
    }

    /// `class_matrix / τ` with zero bias, applied to normalized inputs.
    pub fn from_zeroshot(head: &ZeroShotHead) -> Self {
        let inv = 1.0 / head.temperature();
        let data = head.class_matrix().data().iter().map(|v| v * inv).collect();
        Self {
            weights: Matrix::from_vec(head.n_classes(), head.dim(), data).unwrap(),
            bias: vec![0.0; head.n_classes()],
            normalize_inputs: true,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    fn prepare(&self, samples: &Matrix) -> Result<Matrix> {
        if samples.cols() != self.dim() {
            return Err(Error::shape("LinearHead input", self.dim(), samples.cols()));
        }
        if self.normalize_inputs {
            samples.normalize_rows()
        } else {
            Ok(samples.clone())
        }
    }

    /// `B×C` logits.
    pub fn logits(&self, samples: &Matrix) -> Result<Matrix> {
        let x = self.prepare(samples)?;
        let wt = self.weights.transpose();
        let mut out = gemm(x.data(), x.rows(), x.cols(), wt.data(), self.n_classes());
        for row in out.chunks_exact_mut(self.n_classes()) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Matrix::from_vec(x.rows(), self.n_classes(), out)
    }

    pub fn predict_all(&self, samples: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(samples)?.iter_rows().map(argmax).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("linear")
            .with_meta("classes", self.n_classes())
            .with_meta("dim", self.dim())
            .with_meta("normalize_inputs", self.normalize_inputs)
            .with_field("weights", self.weights.data())
            .with_field("bias", &self.bias)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("linear")?;
        let classes: usize = c.meta_parse("classes")?;
        let dim: usize = c.meta_parse("dim")?;
        Self::new(
            Matrix::from_vec(classes, dim, c.field("weights", classes * dim)?.to_vec())?,
            c.field("bias", classes)?.to_vec(),
            c.meta_parse("normalize_inputs")?,
        )
    }
}

/// Weight-space interpolation `α·W_probe + (1−α)·W_zs`, bias `α·b_probe`,
/// evaluated on normalized inputs.
pub fn wise_ft(zs_head: &ZeroShotHead, probe: &LinearHead, alpha: f32) -> Result<LinearHead> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let zs = LinearHead::from_zeroshot(zs_head);
    if zs.weights.rows() != probe.weights.rows() || zs.weights.cols() != probe.weights.cols() {
        return Err(Error::shape(
            "wise_ft",
            format!("{}x{}", zs.weights.rows(), zs.weights.cols()),
            format!("{}x{}", probe.weights.rows(), probe.weights.cols()),
        ));
    }
    let weights = probe
        .weights
        .data()
        .iter()
        .zip(zs.weights.data())
        .map(|(&p, &z)| alpha * p + (1.0 - alpha) * z)
        .collect();
    LinearHead::new(
        Matrix::from_vec(zs.n_classes(), zs.dim(), weights)?,
        probe.bias.iter().map(|b| alpha * b).collect(),
        true,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DfrMode {
    /// Shrink the larger inferred group to the smaller one's size.
    Subsample,
    /// Replicate the smaller inferred group up to the larger one's size.
    Upsample,
}

/// Per class, balances the pseudo-correct and pseudo-incorrect rows of
/// `train` (aligned with `pseudo`). Within a class the output lists the
/// correct side first. A class with one empty side keeps the other side
/// unchanged, with a warning.
pub fn dfr_balance(
    bundle: &EmbeddingBundle,
    train: &[usize],
    pseudo: &PseudoLabels,
    mode: DfrMode,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if pseudo.correct.len() != train.len() {
        return Err(Error::shape("dfr_balance", train.len(), pseudo.correct.len()));
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
        if correct.is_empty() || incorrect.is_empty() {
            if !(correct.is_empty() && incorrect.is_empty()) {
                log::warn!(
                    "{}; using the nonempty side",
                    Error::DegenerateGroups(format!("class {c} has an empty inferred group"))
                );
            }
            out.extend(correct);
            out.extend(incorrect);
            continue;
        }
        let target = match mode {
            DfrMode::Subsample => correct.len().min(incorrect.len()),
            DfrMode::Upsample => correct.len().max(incorrect.len()),
        };
        for side in [correct, incorrect] {
            let n = side.len();
            if n == target {
                out.extend(side);
            } else if n > target {
                let mut keep = rng.sample_distinct(n, target);
                keep.sort_unstable();
                out.extend(keep.into_iter().map(|k| side[k]));
            } else {
                out.extend_from_slice(&side);
                out.extend((0..target - n).map(|_| side[rng.below(n)]));
            }
        }
    }
    Ok(out)
}

/// Pseudo-labels the train split, balances it per class, then trains a
/// linear probe on the balanced multiset.
pub fn dfr_train(bundle: &EmbeddingBundle, head: &ZeroShotHead, mode: DfrMode, cfg: &TrainConfig) -> Result<TrainRun> {
    let train = bundle.split_view(Split::Train);
    let pseudo = pseudolabels(bundle, head, &train, cfg.pseudo_source, cfg.seed)?;
    let rows = dfr_balance(bundle, &train, &pseudo, mode, &mut Rng::derive(cfg.seed, 0xdf4))?;
    train_linear_probe_on(bundle, &rows, cfg)
}

/// Pre-normalized training embeddings for nearest-neighbor lookup.
#[derive(Clone, Debug)]
pub struct TipCache {
    units: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl TipCache {
    pub fn new(samples: &Matrix, labels: &[usize]) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::shape("TipCache", samples.rows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(Error::EmptyCache);
        }
        let units = samples
            .iter_rows()
            .map(|r| {
                let n = norm(r).max(NORM_EPS as f64);
                r.iter().map(|&v| v as f64 / n).collect()
            })
            .collect();
        Ok(Self {
            units,
            labels: labels.to_vec(),
        })
    }

    /// Class of the highest-cosine cached row, ties to the lower index.
    pub fn lookup(&self, query: &[f32]) -> usize {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, u) in self.units.iter().enumerate() {
            let s: f64 = u.iter().zip(query).map(|(a, &b)| a * b as f64).sum();
            if s > best.0 {
                best = (s, i);
            }
        }
        self.labels[best.1]
    }

    pub fn predict_all(&self, queries: &Matrix) -> Vec<usize> {
        queries.iter_rows().map(|q| self.lookup(q)).collect()
    }
}

/// One-shot form of [`TipCache::lookup`].
pub fn tip_lookup(samples: &Matrix, labels: &[usize], query: &[f32]) -> Result<usize> {
    if query.len() != samples.cols() {
        return Err(Error::shape("tip_lookup", samples.cols(), query.len()));
    }
    Ok(TipCache::new(samples, labels)?.lookup(query))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zs(tau: f32) -> ZeroShotHead {
        ZeroShotHead::new(&Matrix::identity(2), tau).unwrap()
    }

    #[test]
    fn wise_ft_linearity() {
        let probe = LinearHead::new(Matrix::zeros(2, 2), vec![0.0; 2], true).unwrap();
        let h = wise_ft(&zs(0.01), &probe, 0.5).unwrap();
        let expected = 1.0 / (2.0 * 0.01f32);
        assert!((h.weights.get(0, 0) - expected).abs() < 1e-3);
        assert_eq!(h.weights.get(0, 1), 0.0);
        assert!(matches!(wise_ft(&zs(0.01), &probe, 1.5), Err(Error::AlphaOutOfRange(_))));
    }

    #[test]
    fn wise_ft_endpoints() {
        let probe = LinearHead::new(
            Matrix::from_vec(2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap(),
            vec![0.1, -0.2],
            true,
        )
        .unwrap();
        let one = wise_ft(&zs(0.01), &probe, 1.0).unwrap();
        assert_eq!(one, probe);
        let zero = wise_ft(&zs(0.01), &probe, 0.0).unwrap();
        assert_eq!(zero, LinearHead::from_zeroshot(&zs(0.01)));
    }

    #[test]
    fn dfr_sizes() {
        let n = 14;
        let b = EmbeddingBundle {
            samples: Matrix::from_vec(n, 2, [1.0f32, 0.0].repeat(n)).unwrap(),
            class_embeds: Matrix::identity(2),
            class_labels: vec![0; n],
            group_labels: vec![0; n],
            splits: vec![Split::Train; n],
            class_names: vec!["a".into(), "b".into()],
            group_names: vec!["g".into()],
            group_prompts: None,
        };
        let train: Vec<usize> = (0..n).collect();
        let pred: Vec<usize> = (0..n).map(|i| usize::from(i >= 10)).collect();
        let pseudo = PseudoLabels::from_predictions(pred, &b.class_labels);
        let sub = dfr_balance(&b, &train, &pseudo, DfrMode::Subsample, &mut Rng::new(0)).unwrap();
        assert_eq!(sub.iter().filter(|&&i| i < 10).count(), 4);
        assert_eq!(sub.iter().filter(|&&i| i >= 10).count(), 4);
        let up = dfr_balance(&b, &train, &pseudo, DfrMode::Upsample, &mut Rng::new(0)).unwrap();
        assert_eq!(up.iter().filter(|&&i| i < 10).count(), 10);
        assert_eq!(up.iter().filter(|&&i| i >= 10).count(), 10);
    }

    #[test]
    fn tip_examples() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let labels = [0, 1, 0];
        assert_eq!(tip_lookup(&m, &labels, &[0.0, 2.0]).unwrap(), 1);
        // Equidistant from rows 0 and 1.
        assert_eq!(tip_lookup(&m, &labels, &[1.0, 1.0]).unwrap(), 0);
        assert_eq!(tip_lookup(&m, &[1, 0, 0], &[1.0, 1.0]).unwrap(), 1);
        assert!(matches!(tip_lookup(&Matrix::zeros(0, 2), &[], &[1.0, 0.0]), Err(Error::EmptyCache)));
    }

    #[test]
    fn linear_checkpoint_round_trip() {
        let h = LinearHead::init(3, 4, false, &mut Rng::new(2));
        assert_eq!(LinearHead::from_checkpoint(&h.to_checkpoint()).unwrap(), h);
    }
}
