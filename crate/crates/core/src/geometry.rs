//! Spectral diagnostics of an embedding cloud: how many directions of the
//! embedding space actually carry variance.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaceError};
use crate::matrix::Matrix;

/// Eigenvalues below this are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Eigenvalues of the population covariance, clamped at zero and sorted in
/// descending order.
pub fn covariance_spectrum(z: &Matrix) -> Result<Vec<f64>> {
    if z.rows() < 2 {
        return Err(VaceError::InsufficientData(format!(
            "a spectrum needs at least 2 embeddings, got {}",
            z.rows()
        )));
    }
    if !z.is_finite() {
        return Err(VaceError::Format("non-finite embeddings".into()));
    }
    let (_, cov) = z.covariance();
    let sym = (&cov + cov.transpose()) * 0.5;
    let mut eig: Vec<f64> = sym
        .symmetric_eigenvalues()
        .iter()
        .map(|&l| if l < EIGEN_FLOOR { 0.0 } else { l })
        .collect();
    eig.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

fn total(eigs: &[f64]) -> Result<f64> {
    let s: f64 = eigs.iter().map(|&l| l.max(0.0)).sum();
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(VaceError::UndefinedSpectrum)
    }
}

/// Equal mass on `n` directions has both ranks exactly `n`; summing the
/// ratios in floating point would miss that by a few ulps.
fn uniform_count(eigs: &[f64]) -> Option<f64> {
    let mut positive = eigs.iter().filter(|&&l| l > 0.0);
    let first = *positive.next()?;
    positive
        .all(|&l| l == first)
        .then(|| eigs.iter().filter(|&&l| l > 0.0).count() as f64)
}

/// Participation ratio `(sum l)^2 / sum l^2`.
pub fn pr_effective_rank(eigs: &[f64]) -> Result<f64> {
    let s = total(eigs)?;
    if let Some(n) = uniform_count(eigs) {
        return Ok(n);
    }
    let sq: f64 = eigs.iter().map(|&l| l.max(0.0).powi(2)).sum();
    Ok(s * s / sq)
}

/// Exponential of the Shannon entropy of the normalized spectrum.
pub fn entropy_effective_rank(eigs: &[f64]) -> Result<f64> {
    let s = total(eigs)?;
    if let Some(n) = uniform_count(eigs) {
        return Ok(n);
    }
    let positive: Vec<f64> = eigs.iter().copied().filter(|&l| l > 0.0).collect();
    let h: f64 = positive
        .iter()
        .map(|&l| {
            let p = l / s;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub dim: usize,
    pub rho_pr: f64,
    pub rho_h: f64,
    /// `rho_pr / dim`
    pub rho_pr_norm: f64,
    pub rho_h_norm: f64,
    /// Share of directions holding at least a uniform share of variance.
    pub active_fraction: f64,
    pub top1_fraction: f64,
    pub eigenvalues: Vec<f64>,
}

pub fn geometry_report(z: &Matrix) -> Result<GeometryReport> {
    let eigenvalues = covariance_spectrum(z)?;
    geometry_from_spectrum(eigenvalues)
}

pub fn geometry_from_spectrum(eigenvalues: Vec<f64>) -> Result<GeometryReport> {
    let dim = eigenvalues.len();
    let s = total(&eigenvalues)?;
    let rho_pr = pr_effective_rank(&eigenvalues)?;
    let rho_h = entropy_effective_rank(&eigenvalues)?;
    let uniform = 1.0 / dim as f64;
    let active = eigenvalues
        .iter()
        .filter(|&&l| l / s >= uniform * (1.0 - 1e-12))
        .count();
    Ok(GeometryReport {
        dim,
        rho_pr,
        rho_h,
        rho_pr_norm: rho_pr / dim as f64,
        rho_h_norm: rho_h / dim as f64,
        active_fraction: active as f64 / dim as f64,
        top1_fraction: eigenvalues[0] / s,
        eigenvalues,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRow {
    pub series: String,
    pub variant: String,
    pub seed: Option<u64>,
    pub rho_pr_norm: f64,
    pub rho_h_norm: f64,
    pub active_fraction: f64,
    pub top1_fraction: f64,
}

impl GeometryRow {
    pub fn new(series: &str, variant: &str, seed: Option<u64>, report: &GeometryReport) -> Self {
        Self {
            series: series.to_string(),
            variant: variant.to_string(),
            seed,
            rho_pr_norm: report.rho_pr_norm,
            rho_h_norm: report.rho_h_norm,
            active_fraction: report.active_fraction,
            top1_fraction: report.top1_fraction,
        }
    }
}

pub fn write_geometry_csv<W: Write>(rows: &[GeometryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| VaceError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| VaceError::Format(e.to_string()))
}

pub fn read_geometry_csv<R: Read>(reader: R) -> Result<Vec<GeometryRow>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(|e| VaceError::Format(e.to_string())))
        .collect()
}
