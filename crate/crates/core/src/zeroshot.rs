//! Zero-shot classification against fixed class embeddings, group-prompt
//! classification, and the pseudo-labels (zero-shot correctness or K-means)
//! that drive contrastive sampling and DFR.

use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine_sim, softmax, Matrix, Rng};

/// Default classification temperature.
pub const DEFAULT_TEMPERATURE: f32 = 0.01;

/// The frozen linear classifier: l2-normalized class embeddings and a
/// softmax temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotHead {
    class_matrix: Matrix,
    temperature: f32,
}

impl ZeroShotHead {
    pub fn new(class_embeds: &Matrix, temperature: f32) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        if class_embeds.rows() == 0 {
            return Err(Error::shape("ZeroShotHead::new", "at least one class", 0));
        }
        Ok(Self {
            class_matrix: class_embeds.normalize_rows()?,
            temperature,
        })
    }

    pub fn from_bundle(b: &EmbeddingBundle, temperature: f32) -> Result<Self> {
        Self::new(&b.class_embeds, temperature)
    }

    pub fn class_matrix(&self) -> &Matrix {
        &self.class_matrix
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn n_classes(&self) -> usize {
        self.class_matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.class_matrix.cols()
    }

    /// Cosine similarity of `u` to every class embedding.
    pub fn similarities(&self, u: &[f32]) -> Result<Vec<f32>> {
        if u.len() != self.dim() {
            return Err(Error::shape("zeroshot_predict", self.dim(), u.len()));
        }
        self.class_matrix
            .iter_rows()
            .map(|v| cosine_sim(u, v))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub label: usize,
}

fn prediction_from_scores(scores: &[f32], temperature: f32) -> Result<Prediction> {
    let scaled: Vec<f64> = scores
        .iter()
        .map(|&s| s as f64 / temperature as f64)
        .collect();
    let probs = softmax(&scaled)?.into_iter().map(|p| p as f32).collect();
    Ok(Prediction {
        probs,
        label: argmax(scores),
    })
}

pub fn zeroshot_predict(head: &ZeroShotHead, u: &[f32]) -> Result<Prediction> {
    prediction_from_scores(&head.similarities(u)?, head.temperature)
}

pub fn zeroshot_predict_all(head: &ZeroShotHead, samples: &Matrix) -> Result<Vec<Prediction>> {
    if samples.rows() > 0 && samples.cols() != head.dim() {
        return Err(Error::shape("zeroshot_predict_all", head.dim(), samples.cols()));
    }
    samples
        .iter_rows()
        .map(|u| zeroshot_predict(head, u))
        .collect()
}

/// Labels only, for callers that do not need probabilities.
pub fn zeroshot_labels(head: &ZeroShotHead, samples: &Matrix) -> Result<Vec<usize>> {
    Ok(zeroshot_predict_all(head, samples)?
        .into_iter()
        .map(|p| p.label)
        .collect())
}

/// Classifies `u` with the group-annotated prompts of `bundle`: each class
/// scores the best cosine over its own prompts.
pub fn group_prompt_predict(
    bundle: &EmbeddingBundle,
    u: &[f32],
    temperature: f32,
) -> Result<Prediction> {
    let prompts = bundle.group_prompts.as_ref().ok_or(Error::MissingGroupPrompts)?;
    if u.len() != prompts.embeds.cols() {
        return Err(Error::shape("group_prompt_predict", prompts.embeds.cols(), u.len()));
    }
    let c = bundle.n_classes();
    let mut best = vec![f32::NEG_INFINITY; c];
    for (row, &class) in prompts.embeds.iter_rows().zip(&prompts.classes) {
        let s = cosine_sim(u, row)?;
        if s > best[class] {
            best[class] = s;
        }
    }
    if best.iter().all(|s| s.is_finite()) {
        return prediction_from_scores(&best, temperature);
    }
    // Some class has no prompt: it gets probability zero.
    let label = argmax(&best);
    let max = best[label] as f64 / temperature as f64;
    let exps: Vec<f64> = best
        .iter()
        .map(|&s| {
            if s == f32::NEG_INFINITY {
                0.0
            } else {
                (s as f64 / temperature as f64 - max).exp()
            }
        })
        .collect();
    let z: f64 = exps.iter().sum();
    Ok(Prediction {
        probs: exps.iter().map(|e| (e / z) as f32).collect(),
        label,
    })
}

/// Proxy labels over a set of training rows: the predicted class and whether
/// it matches the ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub correct: Vec<bool>,
}

impl PseudoLabels {
    pub fn from_predictions(predicted: Vec<usize>, truth: &[usize]) -> Self {
        let correct = predicted.iter().zip(truth).map(|(p, y)| p == y).collect();
        Self {
            labels: predicted,
            correct,
        }
    }

    pub fn n_incorrect(&self) -> usize {
        self.correct.iter().filter(|&&c| !c).count()
    }
}

pub fn pseudolabel_zeroshot(
    head: &ZeroShotHead,
    samples: &Matrix,
    truth: &[usize],
) -> Result<PseudoLabels> {
    if samples.rows() != truth.len() {
        return Err(Error::shape("pseudolabel_zeroshot", samples.rows(), truth.len()));
    }
    Ok(PseudoLabels::from_predictions(zeroshot_labels(head, samples)?, truth))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub iters: usize,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            iters: 50,
            restarts: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub sse: f64,
    /// SSE after each Lloyd iteration of the winning restart.
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

fn nearest(x: &[f32], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp_seed(samples: &Matrix, k: usize, rng: &mut Rng) -> Result<Matrix> {
    let n = samples.rows();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = samples
        .iter_rows()
        .map(|x| sq_dist(x, samples.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateClustering(format!(
                "only {} distinct points for k = {k}",
                chosen.len()
            )));
        }
        let mut target = rng.next_f64() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        while d2[pick] <= 0.0 {
            pick -= 1;
        }
        chosen.push(pick);
        for (i, x) in samples.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, samples.row(pick)));
        }
    }
    Ok(samples.select_rows(&chosen))
}

fn lloyd(samples: &Matrix, mut centroids: Matrix, iters: usize) -> Clustering {
    let (n, d, k) = (samples.rows(), samples.cols(), centroids.rows());
    let mut assignments = vec![0usize; n];
    let mut history = Vec::new();
    for _ in 0..iters.max(1) {
        let mut sse = 0.0;
        for (i, x) in samples.iter_rows().enumerate() {
            let (j, dist) = nearest(x, &centroids);
            assignments[i] = j;
            sse += dist;
        }
        history.push(sse);
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (x, &j) in samples.iter_rows().zip(&assignments) {
            counts[j] += 1;
            for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(x) {
                *s += v as f64;
            }
        }
        let mut moved = false;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            for c in 0..d {
                let v = (sums[j * d + c] / counts[j] as f64) as f32;
                if v != centroids.get(j, c) {
                    moved = true;
                }
                centroids.set(j, c, v);
            }
        }
        if !moved {
            break;
        }
    }
    let sse = samples
        .iter_rows()
        .zip(&assignments)
        .map(|(x, &j)| sq_dist(x, centroids.row(j)))
        .sum();
    Clustering {
        assignments,
        centroids,
        sse,
        sse_history: history,
    }
}

/// Lloyd's algorithm from k-means++ seeds, best of `restarts` by
/// within-cluster SSE (earliest restart on ties).
pub fn kmeans(samples: &Matrix, k: usize, cfg: &KMeansConfig, rng: &mut Rng) -> Result<Clustering> {
    if k == 0 || samples.rows() < k {
        return Err(Error::DegenerateClustering(format!(
            "k = {k} with {} points",
            samples.rows()
        )));
    }
    let mut best: Option<Clustering> = None;
    for _ in 0..cfg.restarts.max(1) {
        let seeds = kmeans_pp_seed(samples, k, rng)?;
        let run = lloyd(samples, seeds, cfg.iters);
        if best.as_ref().map_or(true, |b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let mut counts = vec![0usize; k];
    for &a in &best.assignments {
        counts[a] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateClustering(format!("cluster {j} is empty")));
    }
    Ok(best)
}

/// K-means pseudo-labels: clusters (k = number of classes) are mapped to the
/// majority zero-shot label of their members, ties to the lowest class id.
pub fn pseudolabel_kmeans(
    head: &ZeroShotHead,
    samples: &Matrix,
    truth: &[usize],
    cfg: &KMeansConfig,
    rng: &mut Rng,
) -> Result<PseudoLabels> {
    if samples.rows() != truth.len() {
        return Err(Error::shape("pseudolabel_kmeans", samples.rows(), truth.len()));
    }
    let c = head.n_classes();
    let clustering = kmeans(&samples.normalize_rows()?, c, cfg, rng)?;
    let zs = zeroshot_labels(head, samples)?;
    let mut votes = vec![vec![0usize; c]; c];
    for (&cluster, &label) in clustering.assignments.iter().zip(&zs) {
        votes[cluster][label] += 1;
    }
    let mapping: Vec<usize> = votes.iter().map(|v| argmax(v)).collect();
    let predicted = clustering.assignments.iter().map(|&a| mapping[a]).collect();
    Ok(PseudoLabels::from_predictions(predicted, truth))
}

/// Which proxy drives sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoSource {
    #[default]
    Zeroshot,
    Kmeans,
}

/// Computes pseudo-labels over `indices` of `bundle` with the chosen source.
pub fn pseudolabels(
    bundle: &EmbeddingBundle,
    head: &ZeroShotHead,
    indices: &[usize],
    source: PseudoSource,
    seed: u64,
) -> Result<PseudoLabels> {
    let samples = bundle.samples.select_rows(indices);
    let truth: Vec<usize> = indices.iter().map(|&i| bundle.class_labels[i]).collect();
    match source {
        PseudoSource::Zeroshot => pseudolabel_zeroshot(head, &samples, &truth),
        PseudoSource::Kmeans => pseudolabel_kmeans(
            head,
            &samples,
            &truth,
            &KMeansConfig::default(),
            &mut Rng::derive(seed, 0x6b6d),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{GroupPrompts, Split};

    fn head2() -> ZeroShotHead {
        ZeroShotHead::new(&Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 0.01).unwrap()
    }

    #[test]
    fn exact_class_embedding_is_confident() {
        let h = head2();
        let p = zeroshot_predict(&h, &[1.0, 0.0]).unwrap();
        assert_eq!(p.label, 0);
        assert!(p.probs[0] >= 0.999);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let h = ZeroShotHead::new(
            &Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            1.0,
        )
        .unwrap();
        let p = zeroshot_predict(&h, &[0.7, 0.7]).unwrap();
        assert_eq!(p.label, 0);
        assert!((p.probs[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn prediction_is_scale_and_temperature_invariant() {
        let h = head2();
        let a = zeroshot_predict(&h, &[0.3, 0.2]).unwrap();
        let b = zeroshot_predict(&h, &[3.0, 2.0]).unwrap();
        assert_eq!(a, b);
        let hot = ZeroShotHead::new(h.class_matrix(), 5.0).unwrap();
        assert_eq!(zeroshot_predict(&hot, &[0.3, 0.2]).unwrap().label, a.label);
        assert!(zeroshot_predict(&h, &[1.0]).is_err());
    }

    #[test]
    fn batched_matches_loop() {
        let h = head2();
        let m = Matrix::from_vec(3, 2, vec![1.0, 0.1, 0.2, 0.9, -1.0, 0.5]).unwrap();
        let all = zeroshot_predict_all(&h, &m).unwrap();
        for (i, p) in all.iter().enumerate() {
            assert_eq!(*p, zeroshot_predict(&h, m.row(i)).unwrap());
        }
        assert!(zeroshot_predict_all(&h, &Matrix::zeros(0, 2)).unwrap().is_empty());
    }

    fn prompt_bundle(prompts: Vec<f32>, classes: Vec<usize>, groups: Vec<usize>) -> EmbeddingBundle {
        let n = classes.len();
        EmbeddingBundle {
            samples: Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            class_embeds: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            class_labels: vec![0],
            group_labels: vec![0],
            splits: vec![Split::Train],
            class_names: vec!["a".into(), "b".into()],
            group_names: vec!["x".into(), "y".into()],
            group_prompts: Some(GroupPrompts {
                embeds: Matrix::from_vec(n, 2, prompts).unwrap(),
                classes,
                groups,
            }),
        }
    }

    #[test]
    fn group_prompt_examples() {
        // prompts: (0,0) (0,1) (1,0) (1,1)
        let b = prompt_bundle(
            vec![1.0, 0.0, 0.8, 0.6, 0.0, 1.0, -0.6, 0.8],
            vec![0, 0, 1, 1],
            vec![0, 1, 0, 1],
        );
        assert_eq!(group_prompt_predict(&b, &[0.1, 1.0], 0.01).unwrap().label, 1);
        let orth = prompt_bundle(vec![0.0, 1.0, 0.0, 1.0], vec![0, 1], vec![0, 0]);
        assert_eq!(group_prompt_predict(&orth, &[1.0, 0.0], 0.01).unwrap().label, 0);
        let mut none = b.clone();
        none.group_prompts = None;
        assert!(matches!(
            group_prompt_predict(&none, &[1.0, 0.0], 0.01),
            Err(Error::MissingGroupPrompts)
        ));
    }

    #[test]
    fn dropping_losing_prompts_of_winner_keeps_label() {
        // Brute force over every subset of the winning class's prompts that
        // keeps its argmax prompt.
        let prompts = vec![1.0, 0.0, 0.8, 0.6, 0.0, 1.0, -0.6, 0.8];
        let classes = vec![0, 0, 1, 1];
        let groups = vec![0, 1, 0, 1];
        let mut g = Rng::new(8);
        for _ in 0..50 {
            let u = [g.normal() as f32, g.normal() as f32];
            let full = prompt_bundle(prompts.clone(), classes.clone(), groups.clone());
            let label = group_prompt_predict(&full, &u, 0.01).unwrap().label;
            let sims: Vec<f32> = (0..4).map(|i| cosine_sim(&u, &prompts[2 * i..2 * i + 2]).unwrap()).collect();
            let own: Vec<usize> = (0..4).filter(|&i| classes[i] == label).collect();
            let top = *own.iter().max_by(|&&a, &&b| sims[a].total_cmp(&sims[b]).then(b.cmp(&a))).unwrap();
            for mask in 0..(1 << own.len()) {
                let keep: Vec<usize> = (0..4)
                    .filter(|&i| {
                        classes[i] != label
                            || i == top
                            || own.iter().position(|&o| o == i).is_some_and(|k| mask & (1 << k) != 0)
                    })
                    .collect();
                let sub = prompt_bundle(
                    keep.iter().flat_map(|&i| prompts[2 * i..2 * i + 2].to_vec()).collect(),
                    keep.iter().map(|&i| classes[i]).collect(),
                    keep.iter().map(|&i| groups[i]).collect(),
                );
                assert_eq!(group_prompt_predict(&sub, &u, 0.01).unwrap().label, label);
            }
        }
    }

    #[test]
    fn single_group_prompts_degenerate_to_zeroshot() {
        let h = ZeroShotHead::new(
            &Matrix::from_vec(2, 2, vec![0.6, 0.8, 1.0, 0.2]).unwrap(),
            0.01,
        )
        .unwrap();
        let b = prompt_bundle(h.class_matrix().data().to_vec(), vec![0, 1], vec![0, 0]);
        let mut g = Rng::new(1);
        for _ in 0..100 {
            let u = [g.normal() as f32, g.normal() as f32];
            assert_eq!(
                group_prompt_predict(&b, &u, 0.01).unwrap(),
                zeroshot_predict(&h, &u).unwrap()
            );
        }
    }

    #[test]
    fn perfect_head_gives_all_true_mask() {
        let h = head2();
        let m = Matrix::from_vec(3, 2, vec![1.0, 0.1, 0.2, 0.9, 0.9, 0.3]).unwrap();
        let p = pseudolabel_zeroshot(&h, &m, &[0, 1, 0]).unwrap();
        assert_eq!(p.correct, vec![true; 3]);
        assert_eq!(p.correct.len(), 3);
        let q = pseudolabel_zeroshot(&h, &m, &[1, 1, 0]).unwrap();
        assert_eq!(q.n_incorrect(), 1);
    }

    fn blobs(seed: u64) -> (Matrix, Vec<usize>) {
        let mut g = Rng::new(seed);
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let center = if c == 0 { [5.0, 0.0] } else { [-5.0, 1.0] };
            data.push(center[0] + 0.3 * g.normal() as f32);
            data.push(center[1] + 0.3 * g.normal() as f32);
            truth.push(c);
        }
        (Matrix::from_vec(40, 2, data).unwrap(), truth)
    }

    // Adjusted Rand index from the contingency table.
    fn ari(a: &[usize], b: &[usize]) -> f64 {
        let ka = a.iter().max().unwrap() + 1;
        let kb = b.iter().max().unwrap() + 1;
        let mut table = vec![vec![0f64; kb]; ka];
        for (&x, &y) in a.iter().zip(b) {
            table[x][y] += 1.0;
        }
        let c2 = |n: f64| n * (n - 1.0) / 2.0;
        let sum_ij: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
        let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
        let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
        let total = c2(a.len() as f64);
        let expected = rows * cols / total;
        (sum_ij - expected) / (0.5 * (rows + cols) - expected)
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let (m, truth) = blobs(4);
        let c = kmeans(&m, 2, &KMeansConfig::default(), &mut Rng::new(0)).unwrap();
        assert!((ari(&c.assignments, &truth) - 1.0).abs() < 1e-12);
        for w in c.sse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let again = kmeans(&m, 2, &KMeansConfig::default(), &mut Rng::new(0)).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn kmeans_rejects_identical_points() {
        let m = Matrix::from_vec(5, 2, vec![1.0; 10]).unwrap();
        assert!(matches!(
            kmeans(&m, 2, &KMeansConfig::default(), &mut Rng::new(0)),
            Err(Error::DegenerateClustering(_))
        ));
    }

    #[test]
    fn kmeans_pseudolabels_follow_majority_zeroshot() {
        let (m, truth) = blobs(9);
        let h = ZeroShotHead::new(&Matrix::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.2]).unwrap(), 0.01).unwrap();
        let p = pseudolabel_kmeans(&h, &m, &truth, &KMeansConfig::default(), &mut Rng::new(2)).unwrap();
        assert_eq!(p.labels, truth);
        assert!(p.correct.iter().all(|&c| c));
    }
}
