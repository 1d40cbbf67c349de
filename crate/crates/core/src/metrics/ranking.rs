//! Threshold-free ranking metrics with optional soft labels.
//!
//! A label `y` in `[0, 1]` contributes `y` of positive mass and `1 - y` of
//! negative mass, so binary labels reduce to the usual definitions.

use crate::error::{Result, VaceError};

fn check(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(VaceError::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(VaceError::EmptyInput("no scores to evaluate".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(VaceError::Format(format!("score {i} is not finite")));
    }
    if let Some(i) = labels.iter().position(|l| !(0.0..=1.0).contains(l)) {
        return Err(VaceError::Format(format!("label {i} lies outside [0, 1]")));
    }
    Ok(())
}

/// Groups of tied scores, in the order of `order`; each group is
/// `(positive mass, negative mass)`.
fn tie_groups(scores: &[f64], labels: &[f64], order: &[usize]) -> Vec<(f64, f64)> {
    let mut groups: Vec<(f64, f64)> = Vec::new();
    let mut prev: Option<f64> = None;
    for &i in order {
        let (pos, neg) = (labels[i], 1.0 - labels[i]);
        match (prev, groups.last_mut()) {
            (Some(p), Some(g)) if p == scores[i] => {
                g.0 += pos;
                g.1 += neg;
            }
            _ => groups.push((pos, neg)),
        }
        prev = Some(scores[i]);
    }
    groups
}

fn sorted_order(scores: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if descending {
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    } else {
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    }
    order
}

/// Probability that a positive outranks a negative, ties counting one half.
pub fn weighted_auc_roc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check(scores, labels)?;
    let groups = tie_groups(scores, labels, &sorted_order(scores, false));
    let (pos_total, neg_total) = groups.iter().fold((0.0, 0.0), |a, g| (a.0 + g.0, a.1 + g.1));
    if pos_total <= 0.0 || neg_total <= 0.0 {
        return Err(VaceError::DegenerateLabels("AUC-ROC needs both classes".into()));
    }
    let mut neg_below = 0.0;
    let mut area = 0.0;
    for (pos, neg) in groups {
        area += pos * (neg_below + 0.5 * neg);
        neg_below += neg;
    }
    Ok(area / (pos_total * neg_total))
}

/// Average precision: precision at every distinct threshold weighted by the
/// recall it adds.
pub fn weighted_auc_pr(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check(scores, labels)?;
    let groups = tie_groups(scores, labels, &sorted_order(scores, true));
    let pos_total: f64 = groups.iter().map(|g| g.0).sum();
    if pos_total <= 0.0 {
        return Err(VaceError::DegenerateLabels("AUC-PR needs a positive".into()));
    }
    let (mut tp, mut fp, mut ap) = (0.0, 0.0, 0.0);
    for (pos, neg) in groups {
        tp += pos;
        fp += neg;
        if pos > 0.0 {
            ap += pos / pos_total * (tp / (tp + fp));
        }
    }
    Ok(ap)
}

pub(crate) fn binary(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&l| f64::from(l)).collect()
}

pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    weighted_auc_roc(scores, &binary(labels))
}

pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    weighted_auc_pr(scores, &binary(labels))
}
