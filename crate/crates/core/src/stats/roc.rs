use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score.
fn sorted_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Twice the Mann–Whitney U count: 2·#(pos > neg) + #(pos = neg), exact in integers.
pub(crate) fn doubled_u(scores: &[f64], labels: &[bool]) -> u64 {
    let order = sorted_order(scores);
    let mut neg_below = 0u64;
    let mut twice_u = 0u64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        // -0.0 and 0.0 compare equal, so group on ==
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        twice_u += gp * (2 * neg_below + gn);
        neg_below += gn;
        i = j;
    }
    twice_u
}

/// ROC-AUC as the Mann–Whitney probability that a positive outscores a
/// negative, ties counting one half. O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    Ok(doubled_u(scores, labels) as f64 / (2 * pos * neg) as f64)
}

/// ROC points from (0,0) to (1,1), one per distinct score threshold.
///
/// A threshold whose tie group mixes both classes also contributes the midpoint
/// of its diagonal segment, the expected operating point under random tie-breaking.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check(scores, labels)?;
    let mut order = sorted_order(scores);
    order.reverse();
    let (p, n) = (pos as f64, neg as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        if gp > 0 && gn > 0 {
            pts.push(((fp as f64 + gn as f64 / 2.0) / n, (tp as f64 + gp as f64 / 2.0) / p));
        }
        tp += gp;
        fp += gn;
        pts.push((fp as f64 / n, tp as f64 / p));
    }
    Ok(pts)
}

/// Trapezoidal area under a polyline of ROC points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}
