//! Geometric anomaly scores over patch embeddings.
//!
//! The positional score is the squared Mahalanobis distance of a test
//! embedding to a Gaussian fitted on the training embeddings. The
//! directional score compares the test trajectory's forward velocity with a
//! bank of unit-norm training velocity prototypes found by spherical
//! mini-batch k-means. Both are standardized over the test set and combined
//! as `s_p * (1 + w * s_d)`.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VaceError};
use crate::matrix::{dot, norm, Matrix};
use crate::training::normalized_difference;

/// Ridge added to the covariance before inversion.
pub const COVARIANCE_EPS: f64 = 1e-6;
/// Standard deviations below this standardize to all zeros.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
    /// `(sigma + eps * I)^-1`
    pub precision: Matrix,
    pub eps: f64,
}

fn to_matrix(m: &DMatrix<f64>) -> Matrix {
    let (r, c) = m.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            out.set(i, j, m[(i, j)]);
        }
    }
    out
}

/// Population-covariance Gaussian; the precision comes from a Cholesky
/// solve of the regularized covariance.
pub fn fit_gaussian(z_train: &Matrix) -> Result<GaussianFit> {
    fit_gaussian_with(z_train, COVARIANCE_EPS)
}

pub fn fit_gaussian_with(z_train: &Matrix, eps: f64) -> Result<GaussianFit> {
    if z_train.rows() < 2 {
        return Err(VaceError::InsufficientData(format!(
            "a Gaussian fit needs at least 2 embeddings, got {}",
            z_train.rows()
        )));
    }
    let (mu, sigma) = z_train.covariance();
    let d = sigma.nrows();
    let regularized = &sigma + DMatrix::<f64>::identity(d, d) * eps;
    let mut precision = match regularized.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => {
            // rounding can push a near-singular matrix off the PD cone
            let eig = regularized.symmetric_eigen();
            let inv = eig.eigenvalues.map(|l| 1.0 / l.max(eps));
            &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
        }
    };
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (precision[(i, j)] + precision[(j, i)]);
            precision[(i, j)] = v;
            precision[(j, i)] = v;
        }
    }
    Ok(GaussianFit {
        mu,
        sigma: to_matrix(&sigma),
        precision: to_matrix(&precision),
        eps,
    })
}

/// Squared Mahalanobis distance `(z - mu)^T P (z - mu)`.
pub fn positional_score(z: &[f64], fit: &GaussianFit) -> f64 {
    let diff: Vec<f64> = z.iter().zip(&fit.mu).map(|(a, b)| a - b).collect();
    let q: f64 = fit
        .precision
        .iter_rows()
        .zip(&diff)
        .map(|(row, di)| di * dot(row, &diff))
        .sum();
    q.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub k_cap: usize,
    /// Prototype count as a fraction of the training velocities.
    pub fraction: f64,
    pub k_np: usize,
    pub batch_size: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub eps_vel: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            k_cap: 500,
            fraction: 0.1,
            k_np: 3,
            batch_size: 1024,
            max_iter: 100,
            tol: 1e-6,
            eps_vel: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityBank {
    /// `K x d_z`, unit-norm rows.
    pub prototypes: Matrix,
    pub k_np: usize,
    pub delta: usize,
}

impl VelocityBank {
    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.rows() == 0
    }
}

/// Unit forward velocities `normalize(z_{t+delta} - z_t)`; differences with
/// norm at or below `eps` are dropped.
pub fn forward_velocities(z: &Matrix, delta: usize, eps: f64) -> Vec<Vec<f64>> {
    if z.rows() <= delta {
        return Vec::new();
    }
    (0..z.rows() - delta)
        .filter_map(|t| {
            let (v, n) = normalized_difference(z.row(t), z.row(t + delta), eps);
            (n > eps).then_some(v)
        })
        .collect()
}

pub fn bank_size(n_velocities: usize, config: &BankConfig) -> usize {
    let k = (config.fraction * n_velocities as f64).floor() as usize;
    k.min(config.k_cap).max(1).min(n_velocities.max(1))
}

pub fn build_velocity_bank(z_train: &Matrix, delta: usize, seed: u64, config: &BankConfig) -> Result<VelocityBank> {
    if delta == 0 || z_train.rows() <= delta {
        return Err(VaceError::InsufficientData(format!(
            "{} embeddings cannot form velocities at offset {delta}",
            z_train.rows()
        )));
    }
    let velocities = forward_velocities(z_train, delta, config.eps_vel);
    if velocities.is_empty() {
        return Err(VaceError::InsufficientData("no usable training velocity".into()));
    }
    let k = bank_size(velocities.len(), config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = spherical_kmeans(&velocities, k, config, &mut rng);
    Ok(VelocityBank {
        prototypes: Matrix::from_rows(&centroids)?,
        k_np: config.k_np,
        delta,
    })
}

fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dot(c, v);
        if d > best_dot {
            best_dot = d;
            best = i;
        }
    }
    best
}

/// k-means++ seeding under cosine distance on a sample of the data.
fn kmeanspp<R: Rng>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let sample_size = data.len().min(k.saturating_mul(3).max(1024));
    let mut sample: Vec<usize> = index::sample(rng, data.len(), sample_size).into_vec();
    sample.sort_unstable();
    let first = sample[rng.random_range(0..sample.len())];
    let mut centroids = vec![data[first].clone()];
    let mut dist: Vec<f64> = sample
        .iter()
        .map(|&i| (1.0 - dot(&data[i], &centroids[0])).max(0.0))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = sample.len() - 1;
            for (j, &d) in dist.iter().enumerate() {
                if r < d {
                    chosen = j;
                    break;
                }
                r -= d;
            }
            sample[chosen]
        } else {
            sample[rng.random_range(0..sample.len())]
        };
        let c = data[pick].clone();
        for (d, &i) in dist.iter_mut().zip(&sample) {
            *d = d.min((1.0 - dot(&data[i], &c)).max(0.0));
        }
        centroids.push(c);
    }
    centroids
}

/// Mini-batch k-means on unit vectors with per-centroid learning rates;
/// centroids are projected back onto the sphere after every update.
pub fn spherical_kmeans<R: Rng>(data: &[Vec<f64>], k: usize, config: &BankConfig, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = kmeanspp(data, k, rng);
    let dim = data[0].len();
    let mut counts = vec![0usize; k];
    let full_batch = data.len() <= config.batch_size;
    for _ in 0..config.max_iter {
        let batch: Vec<usize> = if full_batch {
            (0..data.len()).collect()
        } else {
            let mut b = index::sample(rng, data.len(), config.batch_size).into_vec();
            b.sort_unstable();
            b
        };
        let mut sums = vec![vec![0.0; dim]; k];
        let mut batch_counts = vec![0usize; k];
        for &i in &batch {
            let c = nearest(&centroids, &data[i]);
            batch_counts[c] += 1;
            sums[c].iter_mut().zip(&data[i]).for_each(|(s, x)| *s += x);
        }
        let old = centroids.clone();
        for c in 0..k {
            let m = batch_counts[c];
            if m == 0 {
                continue;
            }
            counts[c] += m;
            let eta = m as f64 / counts[c] as f64;
            let mut updated: Vec<f64> = centroids[c]
                .iter()
                .zip(&sums[c])
                .map(|(x, s)| x + eta * (s / m as f64 - x))
                .collect();
            if normalize_in_place(&mut updated) {
                centroids[c] = updated;
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] == 0 {
                centroids[c] = data[rng.random_range(0..data.len())].clone();
                reseeded = true;
            }
        }
        let movement = centroids
            .iter()
            .zip(&old)
            .map(|(a, b)| norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        if !reseeded && movement < config.tol {
            break;
        }
    }
    centroids
}

/// Mean of `1 - <v, c>` over the `k_np` prototypes closest to `v` in cosine
/// distance.
pub fn directional_score(v: &[f64], bank: &VelocityBank) -> f64 {
    let mut dots: Vec<f64> = bank.prototypes.iter_rows().map(|c| dot(v, c)).collect();
    let k = bank.k_np.clamp(1, dots.len().max(1));
    dots.sort_unstable_by(|a, b| b.total_cmp(a));
    dots[..k].iter().map(|d| 1.0 - d).sum::<f64>() / k as f64
}

/// Per-patch directional scores over a test trajectory, or `None` when the
/// trajectory is too short for a forward difference. The final `delta`
/// positions reuse the last computable score.
pub fn directional_scores(z_test: &Matrix, bank: &VelocityBank, eps_vel: f64) -> Option<Vec<f64>> {
    let m = z_test.rows();
    let delta = bank.delta;
    if m <= delta || bank.is_empty() {
        return None;
    }
    let mut out: Vec<f64> = (0..m - delta)
        .map(|t| {
            let (v, _) = normalized_difference(z_test.row(t), z_test.row(t + delta), eps_vel);
            directional_score(&v, bank)
        })
        .collect();
    let last = *out.last().expect("at least one velocity");
    out.resize(m, last);
    Some(out)
}

/// Zero-mean unit-variance rescaling (population std); near-constant input
/// maps to zeros.
pub fn standardize(x: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < STD_FLOOR {
        (vec![0.0; x.len()], mean, std)
    } else {
        (x.iter().map(|v| (v - mean) / std).collect(), mean, std)
    }
}

/// `s_p * (1 + w * s_d)` on already standardized components.
pub fn compose(sp: f64, sd: f64, w: f64) -> f64 {
    sp * (1.0 + w * sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub s_p: Vec<f64>,
    /// Raw directional scores; empty when directional scoring is off.
    pub s_d: Vec<f64>,
    pub s: Vec<f64>,
    pub point_scores: Vec<f64>,
    pub sp_stats: NormStats,
    pub sd_stats: Option<NormStats>,
    pub warnings: Vec<String>,
}

/// Standardizes and composes per-patch components. `s_d = None` reduces to
/// the standardized positional score.
pub fn compose_scores(s_p: Vec<f64>, s_d: Option<Vec<f64>>, w: f64) -> ScoreSeries {
    let (sp_std, sp_mean, sp_sd) = standardize(&s_p);
    let (s, s_d, sd_stats) = match s_d {
        Some(sd) => {
            let (sd_std, m, sdev) = standardize(&sd);
            let s = sp_std.iter().zip(&sd_std).map(|(&a, &b)| compose(a, b, w)).collect();
            (s, sd, Some(NormStats { mean: m, std: sdev }))
        }
        None => (sp_std, Vec::new(), None),
    };
    ScoreSeries {
        s_p,
        s_d,
        s,
        point_scores: Vec::new(),
        sp_stats: NormStats {
            mean: sp_mean,
            std: sp_sd,
        },
        sd_stats,
        warnings: Vec::new(),
    }
}

/// Full positional + directional scoring of a test trajectory.
pub fn score_test(
    z_test: &Matrix,
    fit: &GaussianFit,
    bank: &VelocityBank,
    w: f64,
    eps_vel: f64,
) -> Result<ScoreSeries> {
    if z_test.rows() < 2 {
        return Err(VaceError::InsufficientData(
            "scoring needs at least 2 test patches".into(),
        ));
    }
    let s_p: Vec<f64> = z_test.iter_rows().map(|z| positional_score(z, fit)).collect();
    Ok(score_with_positional(z_test, s_p, Some(bank), w, eps_vel))
}

pub(crate) fn score_with_positional(
    z_test: &Matrix,
    s_p: Vec<f64>,
    bank: Option<&VelocityBank>,
    w: f64,
    eps_vel: f64,
) -> ScoreSeries {
    let mut warnings = Vec::new();
    let s_d = bank.and_then(|b| {
        let sd = directional_scores(z_test, b, eps_vel);
        if sd.is_none() {
            warnings.push(format!(
                "test trajectory of {} patches is too short for offset {}; directional score disabled",
                z_test.rows(),
                b.delta
            ));
        }
        sd
    });
    let mut out = compose_scores(s_p, s_d, w);
    out.warnings = warnings;
    out
}

/// Point score at `t` is the mean of every patch score whose window covers
/// `t`.
pub fn patch_to_point(scores: &[f64], patch_len: usize, test_len: usize) -> Result<Vec<f64>> {
    if patch_len == 0 || test_len < patch_len || scores.len() != test_len - patch_len + 1 {
        return Err(VaceError::Dimension(format!(
            "{} patch scores do not tile {test_len} timesteps with patch length {patch_len}",
            scores.len()
        )));
    }
    Ok((0..test_len)
        .map(|t| {
            let lo = (t + 1).saturating_sub(patch_len);
            let hi = t.min(scores.len() - 1);
            scores[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub embeddings: Matrix,
    pub k: usize,
}

impl MemoryBank {
    pub const DEFAULT_K: usize = 5;
    pub const DEFAULT_CAP: usize = 10_000;

    /// Stores the training embeddings, subsampled uniformly to `cap` rows.
    pub fn build(z_train: &Matrix, k: usize, cap: usize, seed: u64) -> Result<Self> {
        if z_train.rows() == 0 {
            return Err(VaceError::InsufficientData("empty memory bank".into()));
        }
        let embeddings = if z_train.rows() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = index::sample(&mut rng, z_train.rows(), cap).into_vec();
            idx.sort_unstable();
            let rows: Vec<&[f64]> = idx.iter().map(|&i| z_train.row(i)).collect();
            Matrix::from_rows(&rows)?
        } else {
            z_train.clone()
        };
        Ok(Self { embeddings, k })
    }
}

/// Mean Euclidean distance to the `k` nearest stored embeddings.
pub fn memory_bank_score(z: &[f64], bank: &MemoryBank) -> f64 {
    let mut d: Vec<f64> = bank
        .embeddings
        .iter_rows()
        .map(|e| e.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let k = bank.k.clamp(1, d.len());
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    }
    let mut nearest = d[..k].to_vec();
    nearest.sort_unstable_by(|a, b| a.total_cmp(b));
    nearest.iter().sum::<f64>() / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub t: usize,
    pub s_p: Option<f64>,
    pub s_d: Option<f64>,
    pub s: Option<f64>,
    pub point_score: f64,
    pub label: Option<u8>,
}

/// One row per test timestep; patch-level columns are blank past the last
/// patch start.
pub fn write_scores_csv<W: Write>(scores: &ScoreSeries, labels: Option<&[u8]>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (t, &point_score) in scores.point_scores.iter().enumerate() {
        let row = ScoreRow {
            t,
            s_p: scores.s_p.get(t).copied(),
            s_d: scores.s_d.get(t).copied(),
            s: scores.s.get(t).copied(),
            point_score,
            label: labels.and_then(|l| l.get(t).copied()),
        };
        w.serialize(row).map_err(|e| VaceError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| VaceError::Format(e.to_string()))?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(reader: R) -> Result<Vec<ScoreRow>> {
    let rows: Vec<ScoreRow> = csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(|e| VaceError::Format(e.to_string())))
        .collect::<Result<_>>()?;
    for (i, r) in rows.iter().enumerate() {
        if !r.point_score.is_finite() {
            return Err(VaceError::Parse {
                row: i + 1,
                column: "point_score".into(),
                message: "non-finite score".into(),
            });
        }
        if r.label.is_some_and(|l| l > 1) {
            return Err(VaceError::Parse {
                row: i + 1,
                column: "label".into(),
                message: "label must be 0 or 1".into(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    const TOL: f64 = 1e-12;

    fn bank(rows: &[Vec<f64>], k_np: usize) -> VelocityBank {
        VelocityBank {
            prototypes: Matrix::from_rows(rows).unwrap(),
            k_np,
            delta: 1,
        }
    }

    #[test]
    fn two_point_fit() {
        let fit = fit_gaussian(&Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(fit.mu, vec![1.0, 0.0]);
        assert_eq!(fit.sigma.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert!((fit.precision.get(0, 0) - 1.0 / (1.0 + 1e-6)).abs() < TOL);
        assert!((fit.precision.get(1, 1) - 1e6).abs() < 1e-6);
        assert!(fit.precision.get(0, 1).abs() < TOL);
    }

    #[test]
    fn degenerate_fit_and_errors() {
        let fit = fit_gaussian(&Matrix::from_rows(&[[3.0, 1.0], [3.0, 1.0], [3.0, 1.0]]).unwrap()).unwrap();
        assert!(fit.sigma.as_slice().iter().all(|&v| v == 0.0));
        assert!((fit.precision.get(0, 0) - 1e6).abs() < 1e-6);
        assert!(matches!(
            fit_gaussian(&Matrix::from_rows(&[[1.0]]).unwrap()),
            Err(VaceError::InsufficientData(_))
        ));
    }

    #[test]
    fn positional_closed_forms() {
        let mut fit =
            fit_gaussian(&Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]]).unwrap()).unwrap();
        // sigma = diag(0.5, 2)
        assert_eq!(positional_score(&fit.mu.clone(), &fit), 0.0);
        let expected = 1.0 / (0.5 + 1e-6) + 4.0 / (2.0 + 1e-6);
        assert!((positional_score(&[1.0, 2.0], &fit) - expected).abs() < 1e-9);
        fit.precision = Matrix::from_rows(&[[1.0 / (1.0 + 1e-6), 0.0], [0.0, 0.25 / (1.0 + 0.25e-6)]]).unwrap();
        fit.mu = vec![0.0, 0.0];
        let s = positional_score(&[1.0, 2.0], &fit);
        assert!((s - 2.0).abs() < 1e-5);
    }

    #[test]
    fn directional_examples() {
        let b = bank(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1);
        assert_eq!(directional_score(&[1.0, 0.0], &b), 0.0);
        let b3 = bank(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], 2);
        assert_eq!(directional_score(&[1.0, 0.0, 0.0], &b3), 1.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let b2 = bank(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        assert!((directional_score(&[h, h], &b2) - (1.0 - h)).abs() < TOL);
        assert!((directional_score(&[h, h], &b2) - 0.2929).abs() < 1e-4);
    }

    #[test]
    fn single_direction_bank() {
        let u = [0.6, 0.8];
        let rows: Vec<Vec<f64>> = (0..200).map(|t| vec![t as f64 * u[0], t as f64 * u[1]]).collect();
        let z = Matrix::from_rows(&rows).unwrap();
        let bank = build_velocity_bank(&z, 3, 7, &BankConfig::default()).unwrap();
        assert_eq!(bank.len(), bank_size(197, &BankConfig::default()));
        for c in bank.prototypes.iter_rows() {
            assert!((c[0] - u[0]).abs() < 1e-9 && (c[1] - u[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn bank_size_rule() {
        let cfg = BankConfig::default();
        assert_eq!(bank_size(3, &cfg), 1);
        assert_eq!(bank_size(1457, &cfg), 145);
        assert_eq!(bank_size(100_000, &cfg), 500);
    }

    #[test]
    fn bank_needs_velocities() {
        let z = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(
            build_velocity_bank(&z, 1, 0, &BankConfig::default()),
            Err(VaceError::InsufficientData(_))
        ));
    }

    #[test]
    fn composition_cases() {
        let out = compose_scores(vec![0.0, 1.0, 2.0], Some(vec![0.0, 0.0, 2.0]), 1.0);
        // s_p standardized: mean 1, std sqrt(2/3)
        let sp_sd = (2.0f64 / 3.0).sqrt();
        let sp = [-1.0 / sp_sd, 0.0, 1.0 / sp_sd];
        // s_d: mean 2/3, population std sqrt(8/9)
        let sd_sd = (8.0f64 / 9.0).sqrt();
        let sd = [-(2.0 / 3.0) / sd_sd, -(2.0 / 3.0) / sd_sd, (4.0 / 3.0) / sd_sd];
        for i in 0..3 {
            assert!((out.s[i] - sp[i] * (1.0 + sd[i])).abs() < TOL);
        }
        let zero_w = compose_scores(vec![0.0, 1.0, 2.0], Some(vec![0.0, 0.0, 2.0]), 0.0);
        let plain = compose_scores(vec![0.0, 1.0, 2.0], None, 1.0);
        assert_eq!(zero_w.s, plain.s);
        let flat = compose_scores(vec![0.0, 1.0, 2.0], Some(vec![0.3; 3]), 1.0);
        assert_eq!(flat.s, plain.s);
    }

    #[test]
    fn short_test_trajectory_disables_direction() {
        let z = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let fit = fit_gaussian(&z).unwrap();
        let b = VelocityBank {
            prototypes: Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
            k_np: 3,
            delta: 5,
        };
        let out = score_test(&z, &fit, &b, 1.0, 1e-6).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.s_d.is_empty());
    }

    #[test]
    fn last_delta_positions_reuse_final_score() {
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![(t * t) as f64, t as f64]).collect();
        let z = Matrix::from_rows(&rows).unwrap();
        let b = VelocityBank {
            prototypes: Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            k_np: 1,
            delta: 3,
        };
        let sd = directional_scores(&z, &b, 1e-6).unwrap();
        assert_eq!(sd.len(), 10);
        assert_eq!(sd[7], sd[6]);
        assert_eq!(sd[9], sd[6]);
    }

    #[test]
    fn coverage_averaging() {
        assert_eq!(patch_to_point(&[1.0, 3.0], 2, 3).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(
            patch_to_point(&[1.0, 2.0, 3.0, 4.0], 3, 6).unwrap(),
            vec![1.0, 1.5, 2.0, 3.0, 3.5, 4.0]
        );
        assert!(matches!(patch_to_point(&[1.0], 3, 6), Err(VaceError::Dimension(_))));
    }

    #[test]
    fn memory_bank_examples() {
        let b = MemoryBank::build(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap(), 1, 10, 0).unwrap();
        assert_eq!(memory_bank_score(&[3.0, 4.0], &b), 5.0);
        let b = MemoryBank::build(&Matrix::from_rows(&[[1.0, 2.0], [5.0, 5.0]]).unwrap(), 1, 10, 0).unwrap();
        assert_eq!(memory_bank_score(&[1.0, 2.0], &b), 0.0);
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64]).collect();
        let capped = MemoryBank::build(&Matrix::from_rows(&rows).unwrap(), 5, 20, 3).unwrap();
        assert_eq!(capped.embeddings.rows(), 20);
    }

    #[test]
    fn scores_csv_round_trips() {
        let mut s = compose_scores(vec![1.0, 2.0, 4.0], Some(vec![0.1, 0.2, 0.3]), 1.0);
        s.point_scores = patch_to_point(&s.s, 2, 4).unwrap();
        let labels = [0u8, 1, 0, 0];
        let mut buf = Vec::new();
        write_scores_csv(&s, Some(&labels), &mut buf).unwrap();
        let rows = read_scores_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].s, None);
        assert_eq!(rows[1].s, Some(s.s[1]));
        let back: Vec<f64> = rows.iter().map(|r| r.point_score).collect();
        assert_eq!(back, s.point_scores);
        assert_eq!(rows.iter().map(|r| r.label.unwrap()).collect::<Vec<_>>(), labels);
    }

    fn rotation(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        a.qr().q()
    }

    proptest! {
        #[test]
        fn positional_is_nonnegative_and_translation_invariant(
            seed in 0u64..1000,
            shift in proptest::collection::vec(-50.0f64..50.0, 3),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let test: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            let test_moved: Vec<f64> = test.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let a = positional_score(&test, &fit_gaussian(&Matrix::from_rows(&rows).unwrap()).unwrap());
            let b = positional_score(&test_moved, &fit_gaussian(&Matrix::from_rows(&moved).unwrap()).unwrap());
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }

        #[test]
        fn directional_is_bounded_and_rotation_invariant(seed in 0u64..1000, k_np in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let unit = |rng: &mut ChaCha8Rng| {
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                normalize_in_place(&mut v);
                v
            };
            let protos: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng)).collect();
            let v = unit(&mut rng);
            let q = rotation(d, seed + 1);
            let rot = |x: &[f64]| -> Vec<f64> {
                (q.clone() * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec()
            };
            let base = directional_score(&v, &bank(&protos, k_np));
            let rotated_protos: Vec<Vec<f64>> = protos.iter().map(|p| rot(p)).collect();
            let turned = directional_score(&rot(&v), &bank(&rotated_protos, k_np));
            prop_assert!((0.0..=2.0).contains(&base));
            prop_assert!((base - turned).abs() < 1e-9);
        }

        #[test]
        fn composition_is_monotone_in_position(sd in -3.0f64..3.0, w in 0.0f64..2.0, a in -5.0f64..5.0, gap in 1e-3f64..5.0) {
            prop_assume!(1.0 + w * sd > 1e-6);
            prop_assert!(compose(a + gap, sd, w) > compose(a, sd, w));
        }

        #[test]
        fn all_ones_cover_to_all_ones(p in 1usize..20, extra in 0usize..50) {
            let test_len = p + extra;
            let ones = vec![1.0; test_len - p + 1];
            prop_assert!(patch_to_point(&ones, p, test_len).unwrap().iter().all(|&v| v == 1.0));
        }
    }
}
