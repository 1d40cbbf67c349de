//! Best-F1 metrics over a sweep of score thresholds. A point is predicted
//! anomalous when its score is at or above the threshold.

use crate::error::{Result, VaceError};

/// Inclusive `[start, end]` runs of ones.
pub fn ranges(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len() - 1));
    }
    out
}

fn check(scores: &[f64], labels: &[u8]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(VaceError::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(VaceError::Format("non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(VaceError::DegenerateLabels("F1 needs a positive label".into()));
    }
    Ok(positives)
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Maximum point-wise F1 over every distinct score used as a threshold.
pub fn point_f1(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let positives = check(scores, labels)? as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut best) = (0.0, 0.0, 0.0f64);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let group_ends = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if group_ends {
            best = best.max(f1(tp / (tp + fp), tp / positives));
        }
    }
    Ok(best)
}

fn overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo <= hi {
        hi - lo + 1
    } else {
        0
    }
}

/// Sum of overlaps and number of overlapping ranges of `others` for each
/// range in `ranges`, by a merge over both sorted lists.
fn overlaps(ranges: &[(usize, usize)], others: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut first = 0;
    ranges
        .iter()
        .map(|&r| {
            while first < others.len() && others[first].1 < r.0 {
                first += 1;
            }
            let mut total = 0;
            let mut count = 0;
            for &o in others[first..].iter().take_while(|o| o.0 <= r.1) {
                total += overlap(r, o);
                count += 1;
            }
            (total, count)
        })
        .collect()
}

/// Flat-bias range score with `1/x` fragmentation penalty, averaged over
/// `ranges`; zero when `ranges` is empty.
fn range_score(ranges: &[(usize, usize)], others: &[(usize, usize)]) -> f64 {
    if ranges.is_empty() {
        return 0.0;
    }
    let sum: f64 = ranges
        .iter()
        .zip(overlaps(ranges, others))
        .map(|(r, (total, count))| {
            if count == 0 {
                0.0
            } else {
                total as f64 / (r.1 - r.0 + 1) as f64 / count as f64
            }
        })
        .sum();
    sum / ranges.len() as f64
}

/// Range precision and recall of a predicted mask against labeled ranges.
pub fn range_precision_recall(predicted: &[bool], real: &[(usize, usize)]) -> (f64, f64) {
    let pred = ranges(predicted);
    (range_score(&pred, real), range_score(real, &pred))
}

/// Distinct thresholds in descending order, thinned to at most `limit`
/// evenly spaced values when a limit is given.
pub fn thresholds(scores: &[f64], limit: Option<usize>) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    match limit {
        Some(n) if n >= 2 && t.len() > n => {
            let last = t.len() - 1;
            (0..n).map(|i| t[i * last / (n - 1)]).collect()
        }
        _ => t,
    }
}

/// Maximum range-based F1 over the threshold sweep.
pub fn range_f1(scores: &[f64], labels: &[u8], max_thresholds: Option<usize>) -> Result<f64> {
    check(scores, labels)?;
    let real = ranges(&labels.iter().map(|&l| l == 1).collect::<Vec<_>>());
    let mut best = 0.0f64;
    for th in thresholds(scores, max_thresholds) {
        let predicted: Vec<bool> = scores.iter().map(|&s| s >= th).collect();
        let (p, r) = range_precision_recall(&predicted, &real);
        best = best.max(f1(p, r));
    }
    Ok(best)
}
