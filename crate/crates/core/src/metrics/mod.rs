//! Detection metrics on point-level scores.

mod ranking;
mod threshold;
mod vus;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaceError};

pub use ranking::{auc_pr, auc_roc, weighted_auc_pr, weighted_auc_roc};
pub use threshold::{point_f1, range_f1, range_precision_recall, ranges, thresholds};
pub use vus::{buffer_grid, metric_at_buffer, soft_labels, vus, VusMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub vus_max_buffer: usize,
    pub vus_grid: usize,
    /// Cap on the range-F1 threshold sweep; `None` tries every distinct score.
    pub max_thresholds: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            vus_max_buffer: 48,
            vus_grid: 9,
            max_thresholds: Some(1000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub vus_roc: f64,
    pub vus_pr: f64,
    pub point_f1: f64,
    pub range_f1: f64,
}

impl EvalResult {
    pub fn values(&self) -> [f64; 6] {
        [
            self.auc_roc,
            self.auc_pr,
            self.vus_roc,
            self.vus_pr,
            self.point_f1,
            self.range_f1,
        ]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            auc_roc: v[0],
            auc_pr: v[1],
            vus_roc: v[2],
            vus_pr: v[3],
            point_f1: v[4],
            range_f1: v[5],
        }
    }

    /// Element-wise mean; `None` for an empty slice.
    pub fn mean(results: &[EvalResult]) -> Option<EvalResult> {
        if results.is_empty() {
            return None;
        }
        let mut acc = [0.0; 6];
        for r in results {
            acc.iter_mut().zip(r.values()).for_each(|(a, v)| *a += v);
        }
        Some(Self::from_values(acc.map(|a| a / results.len() as f64)))
    }
}

pub fn evaluate(scores: &[f64], labels: &[u8], config: &MetricsConfig) -> Result<EvalResult> {
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(VaceError::DegenerateLabels(
            "evaluation needs both normal and anomalous points".into(),
        ));
    }
    let (l, g) = (config.vus_max_buffer, config.vus_grid);
    Ok(EvalResult {
        auc_roc: auc_roc(scores, labels)?,
        auc_pr: auc_pr(scores, labels)?,
        vus_roc: vus(scores, labels, VusMode::Roc, l, g)?,
        vus_pr: vus(scores, labels, VusMode::Pr, l, g)?,
        point_f1: point_f1(scores, labels)?,
        range_f1: range_f1(scores, labels, config.max_thresholds)?,
    })
}
