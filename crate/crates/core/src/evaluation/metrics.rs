// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{NxlError, Result};
use crate::evaluation::EvidenceVector;

fn check_lengths(evidence: &EvidenceVector, scores: &[f64]) -> Result<()> {
    if evidence.len() != scores.len() {
        return Err(NxlError::Shape(format!(
            "evidence length {} differs from score length {}",
            evidence.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(NxlError::NonFinite("attribution scores".into()));
    }
    Ok(())
}

/// Absolute scores divided by their sum; left as absolute values when the
/// sum is zero.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let abs: Vec<f64> = scores.iter().map(|s| s.abs()).collect();
    let total: f64 = abs.iter().sum();
    if total == 0.0 {
        return abs;
    }
    abs.into_iter().map(|s| s / total).collect()
}

/// `E . S'` with `S'` from [`normalize_scores`].
pub fn dot_alignment(evidence: &EvidenceVector, scores: &[f64]) -> Result<f64> {
    check_lengths(evidence, scores)?;
    Ok(normalize_scores(scores)
        .iter()
        .zip(evidence.bits())
        .filter(|(_, &e)| e)
        .map(|(s, _)| s)
        .sum())
}

/// Positions by descending score, ties to the lower index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// `AP = sum_k (R_k - R_{k-1}) P_k` over the score ranking.
pub fn average_precision(evidence: &EvidenceVector, scores: &[f64]) -> Result<f64> {
    check_lengths(evidence, scores)?;
    let positives = evidence.count_ones();
    if positives == 0 {
        return Err(NxlError::UndefinedMetric("average precision needs at least one evidence token".into()));
    }
    let bits = evidence.bits();
    let mut found = 0usize;
    let mut precision_sum = 0.0;
    for (k, p) in rank_by_score(scores).into_iter().enumerate() {
        if bits[p] {
            found += 1;
            // recall rises by 1/positives, precision is found/(k+1)
            precision_sum += found as f64 / (k + 1) as f64;
        }
    }
    // dividing once keeps a perfect ranking at exactly 1
    Ok(precision_sum / positives as f64)
}

/// Pearson correlation by the two-pass formula.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(NxlError::Shape(format!("pearson inputs of lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(NxlError::UndefinedMetric("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(NxlError::UndefinedMetric("pearson with zero variance".into()));
    }
    let r = sxy / (sxx * syy).sqrt();
    if !r.is_finite() {
        return Err(NxlError::UndefinedMetric("pearson is not finite".into()));
    }
    Ok(r)
}
