//! Ranking metrics, rank correlation and collapse diagnostics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TincError};
use crate::losses::EmbeddingBatch;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(TincError::ShapeMismatch {
            left: format!("{} scores", scores.len()),
            right: format!("{} labels", labels.len()),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TincError::NonFinite("scores"));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Area under the ROC curve as the normalised Mann–Whitney statistic:
/// P(score⁺ > score⁻) + ½·P(score⁺ = score⁻).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TincError::AurocUndefined("labels contain a single class"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    // Twice the U statistic is an integer, which keeps the division exact.
    let twice_u = 2.0 * rank_sum - (n_pos * (n_pos + 1)) as f64;
    Ok(twice_u / (2 * n_pos * n_neg) as f64)
}

/// Average precision: precision after each group of equal scores (taken in
/// descending order) weighted by the recall it adds.
pub fn prauc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(TincError::invalid("PRAUC undefined: no positive labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut group_pos = 0;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                group_pos += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += group_pos;
        if group_pos > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (group_pos as f64 / n_pos as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// Volume probability: the highest scan probability.
pub fn volume_score(scan_scores: &[f64]) -> Result<f64> {
    if scan_scores.is_empty() {
        return Err(TincError::invalid("volume has no scans"));
    }
    if scan_scores.iter().any(|s| !s.is_finite()) {
        return Err(TincError::NonFinite("scan scores"));
    }
    Ok(scan_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(TincError::invalid(format!(
            "spearman needs two equal-length series of >= 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(TincError::NonFinite("correlation input"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| TincError::invalid("spearman undefined for a constant series"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub per_dim_std: Vec<f64>,
    pub mean_std: f64,
    /// exp of the Shannon entropy of the normalised singular values of the
    /// centred embeddings; 1 for a fully collapsed batch.
    pub effective_rank: f64,
}

pub fn collapse_diagnostics(z: &EmbeddingBatch) -> Result<CollapseReport> {
    let (n, d) = (z.n(), z.d());
    if n < 2 {
        return Err(TincError::BatchTooSmall {
            term: "collapse diagnostics",
            rows: n,
        });
    }
    let zc = z.matrix().centered();
    let mut per_dim_std = vec![0.0; d];
    for r in 0..n {
        for (acc, v) in per_dim_std.iter_mut().zip(zc.row(r)) {
            *acc += v * v;
        }
    }
    per_dim_std.iter_mut().for_each(|s| *s = (*s / (n - 1) as f64).sqrt());
    let mean_std = per_dim_std.iter().sum::<f64>() / d as f64;
    let m = DMatrix::from_row_slice(n, d, zc.as_slice());
    let sv = m.singular_values();
    let total: f64 = sv.iter().sum();
    let effective_rank = if total > 0.0 {
        let h: f64 = sv
            .iter()
            .filter(|s| **s > 0.0)
            .map(|s| {
                let p = s / total;
                -p * p.ln()
            })
            .sum();
        h.exp().clamp(1.0, d as f64)
    } else {
        1.0
    };
    Ok(CollapseReport {
        per_dim_std,
        mean_std,
        effective_rank,
    })
}
