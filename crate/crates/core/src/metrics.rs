//! Group-robustness evaluation: per-(class, group) accuracy, worst-group
//! accuracy and the robustness gap, plus the cross-group geometry
//! diagnostics and the adapter Lipschitz upper bound.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, spectral_norm, Matrix, Rng, NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub class: usize,
    pub group: usize,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub per_group: Vec<GroupAccuracy>,
    /// Sample-weighted over every evaluated row.
    pub average_accuracy: f64,
    pub worst_group_accuracy: f64,
    /// `average_accuracy - worst_group_accuracy`.
    pub gap: f64,
    /// Mean cross-group distance per class; `None` for single-group classes.
    #[serde(default)]
    pub alignment_per_class: Vec<Option<f64>>,
    /// Mean cross-group cosine per class; `None` for single-group classes.
    #[serde(default)]
    pub cross_group_cosine_per_class: Vec<Option<f64>>,
}

/// Accuracy per (class, group) cell with 0/1 loss.
pub fn evaluate_groups(predictions: &[usize], labels: &[usize], groups: &[usize]) -> Result<GroupReport> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::shape(
            "evaluate_groups",
            predictions.len(),
            format!("{} labels, {} groups", labels.len(), groups.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyGroup("no samples to evaluate".into()));
    }
    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
        let e = cells.entry((y, g)).or_default();
        e.0 += 1;
        e.1 += usize::from(p == y);
    }
    let per_group: Vec<GroupAccuracy> = cells
        .into_iter()
        .map(|((class, group), (n, correct))| GroupAccuracy {
            class,
            group,
            n,
            correct,
            accuracy: correct as f64 / n as f64,
        })
        .collect();
    let total_correct: usize = per_group.iter().map(|g| g.correct).sum();
    let average = total_correct as f64 / predictions.len() as f64;
    let worst = per_group
        .iter()
        .map(|g| g.accuracy)
        .fold(f64::INFINITY, f64::min);
    Ok(GroupReport {
        per_group,
        average_accuracy: average,
        worst_group_accuracy: worst,
        gap: average - worst,
        alignment_per_class: Vec::new(),
        cross_group_cosine_per_class: Vec::new(),
    })
}

/// Normalized rows of `embeddings` belonging to `class`, grouped.
fn class_rows(
    embeddings: &Matrix,
    labels: &[usize],
    groups: &[usize],
    class: usize,
) -> Result<Vec<(usize, Vec<f32>)>> {
    if embeddings.rows() != labels.len() || labels.len() != groups.len() {
        return Err(Error::shape("group diagnostics", embeddings.rows(), labels.len()));
    }
    let mut rows = Vec::new();
    for i in 0..labels.len() {
        if labels[i] == class {
            rows.push((groups[i], l2_normalize(embeddings.row(i), NORM_EPS)?));
        }
    }
    let mut distinct: Vec<usize> = rows.iter().map(|r| r.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InsufficientGroups(class));
    }
    Ok(rows)
}

fn mean_cross_group(rows: &[(usize, Vec<f32>)], pair: impl Fn(&[f32], &[f32]) -> f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if rows[i].0 != rows[j].0 {
                sum += pair(&rows[i].1, &rows[j].1);
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Mean Euclidean distance between l2-normalized embeddings of `class`
/// drawn from different groups.
pub fn alignment_loss(embeddings: &Matrix, labels: &[usize], groups: &[usize], class: usize) -> Result<f64> {
    let rows = class_rows(embeddings, labels, groups, class)?;
    Ok(mean_cross_group(&rows, |a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }))
}

/// Mean cosine similarity between embeddings of `class` drawn from
/// different groups.
pub fn cross_group_cosine(embeddings: &Matrix, labels: &[usize], groups: &[usize], class: usize) -> Result<f64> {
    let rows = class_rows(embeddings, labels, groups, class)?;
    Ok(mean_cross_group(&rows, |a, b| dot(a, b)))
}

/// Fills the per-class geometry diagnostics of `report` from `embeddings`.
pub fn attach_diagnostics(
    report: &mut GroupReport,
    embeddings: &Matrix,
    labels: &[usize],
    groups: &[usize],
    n_classes: usize,
) -> Result<()> {
    let mut align = Vec::with_capacity(n_classes);
    let mut cos = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        match alignment_loss(embeddings, labels, groups, c) {
            Ok(a) => {
                align.push(Some(a));
                cos.push(Some(cross_group_cosine(embeddings, labels, groups, c)?));
            }
            Err(Error::InsufficientGroups(_)) => {
                align.push(None);
                cos.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    report.alignment_per_class = align;
    report.cross_group_cosine_per_class = cos;
    Ok(())
}

/// Norm-product upper bound on the eval-mode adapter's Lipschitz constant:
/// `‖W2‖₂ · max_h |γ_h| / sqrt(running_var_h + eps) · ‖W1‖₂`.
///
/// This is an upper bound, not an estimate of the tight constant.
pub fn lipschitz_upper_bound(p: &AdapterParams) -> f32 {
    let mut rng = Rng::new(0x11b5);
    let w1 = spectral_norm(&p.w1, 500, &mut rng).unwrap_or(f32::INFINITY) as f64;
    let w2 = spectral_norm(&p.w2, 500, &mut rng).unwrap_or(f32::INFINITY) as f64;
    let bn = if p.batchnorm {
        p.bn_gamma
            .iter()
            .zip(&p.bn_running_var)
            .map(|(&g, &v)| (g as f64).abs() / (v as f64 + p.bn_eps as f64).sqrt())
            .fold(0.0, f64::max)
    } else {
        1.0
    };
    (w2 * bn * w1) as f32
}

/// One-line-per-method WG / Avg / Gap table, in percent.
pub fn render_table(rows: &[(&str, &GroupReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}", "Method", "WG", "Avg", "Gap");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.1}  {:>6.1}  {:>6.1}",
            name,
            100.0 * r.worst_group_accuracy,
            100.0 * r.average_accuracy,
            100.0 * r.gap
        );
    }
    out
}
