//! Volume under the surface: ranking metrics averaged over a family of
//! soft labelings that widen each anomalous range by a buffer `l`.

use serde::{Deserialize, Serialize};

use super::ranking::{weighted_auc_pr, weighted_auc_roc};
use crate::error::{Result, VaceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VusMode {
    Roc,
    Pr,
}

/// Distance from every index to the nearest labeled point; `None` when
/// there is no positive label.
fn distance_to_positive(labels: &[u8]) -> Option<Vec<usize>> {
    if !labels.contains(&1) {
        return None;
    }
    let n = labels.len();
    let mut d = vec![usize::MAX; n];
    let mut last = None;
    for i in 0..n {
        if labels[i] == 1 {
            last = Some(i);
        }
        if let Some(l) = last {
            d[i] = i - l;
        }
    }
    last = None;
    for i in (0..n).rev() {
        if labels[i] == 1 {
            last = Some(i);
        }
        if let Some(l) = last {
            d[i] = d[i].min(l - i);
        }
    }
    Some(d)
}

/// Labels that ramp linearly from 1 at a range edge to 0 at distance `l`.
pub fn soft_labels(labels: &[u8], buffer: usize) -> Vec<f64> {
    let Some(dist) = distance_to_positive(labels) else {
        return vec![0.0; labels.len()];
    };
    dist.iter()
        .map(|&d| match d {
            0 => 1.0,
            _ if buffer == 0 => 0.0,
            _ => (1.0 - d as f64 / buffer as f64).max(0.0),
        })
        .collect()
}

/// Integer buffers `round(i * max / (grid - 1))`, deduplicated.
pub fn buffer_grid(max_buffer: usize, grid: usize) -> Vec<usize> {
    if max_buffer == 0 {
        return vec![0];
    }
    let g = grid.max(2);
    let mut out: Vec<usize> = (0..g)
        .map(|i| ((i * max_buffer) as f64 / (g - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

pub fn metric_at_buffer(scores: &[f64], labels: &[u8], buffer: usize, mode: VusMode) -> Result<f64> {
    let soft = soft_labels(labels, buffer);
    match mode {
        VusMode::Roc => weighted_auc_roc(scores, &soft),
        VusMode::Pr => weighted_auc_pr(scores, &soft),
    }
}

/// Trapezoid average of the metric over the buffer grid.
pub fn vus(scores: &[f64], labels: &[u8], mode: VusMode, max_buffer: usize, grid: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(VaceError::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let buffers = buffer_grid(max_buffer, grid);
    let values = buffers
        .iter()
        .map(|&b| metric_at_buffer(scores, labels, b, mode))
        .collect::<Result<Vec<f64>>>()?;
    if buffers.len() == 1 {
        return Ok(values[0]);
    }
    let area: f64 = buffers
        .windows(2)
        .zip(values.windows(2))
        .map(|(b, v)| (b[1] - b[0]) as f64 * 0.5 * (v[0] + v[1]))
        .sum();
    Ok(area / (buffers[buffers.len() - 1] - buffers[0]) as f64)
}
