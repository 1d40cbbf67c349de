use rand::Rng;
use rayon::prelude::*;

use super::{BatchStats, CHUNK};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Zero-padded "same" temporal convolution.
///
/// Output channel `o` reads `fan_in` input channels: just `o / multiplier`
/// for a depthwise layer, every input channel for a full one. Weights are
/// laid out `[out][fan_in][kernel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub fan_in: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn depthwise<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        debug_assert_eq!(out_channels % in_channels, 0);
        Self::with_fan_in(in_channels, out_channels, kernel, 1, rng)
    }

    pub fn full<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        Self::with_fan_in(in_channels, out_channels, kernel, in_channels, rng)
    }

    fn with_fan_in<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in * kernel) as f64).sqrt();
        let weight = (0..out_channels * fan_in * kernel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            fan_in,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn source(&self, o: usize, j: usize) -> usize {
        if self.fan_in == self.in_channels {
            j
        } else {
            o / (self.out_channels / self.in_channels)
        }
    }

    /// Valid output index range for kernel tap `k` (so `t + k - pad` stays
    /// inside `[0, p)`).
    #[inline]
    fn tap_range(&self, k: usize, p: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        let lo = pad.saturating_sub(k);
        let hi = (p + pad).saturating_sub(k).min(p);
        (lo, hi)
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64], p: usize) {
        let pad = self.kernel / 2;
        for o in 0..self.out_channels {
            let yo = &mut y[o * p..(o + 1) * p];
            yo.iter_mut().for_each(|v| *v = self.bias[o]);
            for j in 0..self.fan_in {
                let src = &x[self.source(o, j) * p..][..p];
                let w = &self.weight[(o * self.fan_in + j) * self.kernel..][..self.kernel];
                for (k, &wk) in w.iter().enumerate() {
                    let (lo, hi) = self.tap_range(k, p);
                    if lo >= hi {
                        continue;
                    }
                    let shift = lo + k - pad;
                    for (yv, &xv) in yo[lo..hi].iter_mut().zip(&src[shift..shift + hi - lo]) {
                        *yv += wk * xv;
                    }
                }
            }
        }
    }

    pub fn accumulate_param_grads(&self, x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64], p: usize) {
        let pad = self.kernel / 2;
        for o in 0..self.out_channels {
            let dyo = &dy[o * p..(o + 1) * p];
            db[o] += dyo.iter().sum::<f64>();
            for j in 0..self.fan_in {
                let src = &x[self.source(o, j) * p..][..p];
                let base = (o * self.fan_in + j) * self.kernel;
                for k in 0..self.kernel {
                    let (lo, hi) = self.tap_range(k, p);
                    if lo >= hi {
                        continue;
                    }
                    let shift = lo + k - pad;
                    dw[base + k] += dyo[lo..hi]
                        .iter()
                        .zip(&src[shift..shift + hi - lo])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
        }
    }

    pub fn input_grad(&self, dy: &[f64], dx: &mut [f64], p: usize) {
        let pad = self.kernel / 2;
        dx.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..self.out_channels {
            let dyo = &dy[o * p..(o + 1) * p];
            for j in 0..self.fan_in {
                let s = self.source(o, j);
                let w = &self.weight[(o * self.fan_in + j) * self.kernel..][..self.kernel];
                let dxs = &mut dx[s * p..(s + 1) * p];
                for (k, &wk) in w.iter().enumerate() {
                    let (lo, hi) = self.tap_range(k, p);
                    if lo >= hi {
                        continue;
                    }
                    let shift = lo + k - pad;
                    for (dxv, &g) in dxs[shift..shift + hi - lo].iter_mut().zip(&dyo[lo..hi]) {
                        *dxv += wk * g;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn apply_running(&self, y: &mut [f64], p: usize) {
        for (c, yc) in y.chunks_mut(p).enumerate() {
            let scale = self.gamma[c] / (self.running_var[c] + BN_EPS).sqrt();
            let shift = self.beta[c] - self.running_mean[c] * scale;
            yc.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }

    /// Normalizes every patch in `y` (`B * C * P`) with batch statistics.
    pub(crate) fn apply_batch(&self, y: &mut [f64], stats: &BatchStats, p: usize) {
        let per = self.channels() * p;
        y.par_chunks_mut(per).for_each(|patch| {
            for (c, yc) in patch.chunks_mut(p).enumerate() {
                let inv = 1.0 / (stats.var[c] + BN_EPS).sqrt();
                let (g, b, m) = (self.gamma[c], self.beta[c], stats.mean[c]);
                yc.iter_mut().for_each(|v| *v = g * (*v - m) * inv + b);
            }
        });
    }

    /// Returns `(dL/dpre, dL/dgamma, dL/dbeta)` for train-mode normalization.
    pub(crate) fn backward_batch(
        &self,
        pre: &[f64],
        d_out: &[f64],
        stats: &BatchStats,
        p: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let channels = self.channels();
        let per = channels * p;
        let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = pre
            .par_chunks(per * CHUNK)
            .zip(d_out.par_chunks(per * CHUNK))
            .map(|(y, g)| {
                let mut dg = vec![0.0; channels];
                let mut dbt = vec![0.0; channels];
                for (yb, gb) in y.chunks(per).zip(g.chunks(per)) {
                    for c in 0..channels {
                        let m = stats.mean[c];
                        for (yv, gv) in yb[c * p..(c + 1) * p].iter().zip(&gb[c * p..(c + 1) * p]) {
                            dg[c] += gv * (yv - m) * inv[c];
                            dbt[c] += gv;
                        }
                    }
                }
                (dg, dbt)
            })
            .collect();
        let mut d_gamma = vec![0.0; channels];
        let mut d_beta = vec![0.0; channels];
        for (dg, dbt) in partials {
            d_gamma.iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
            d_beta.iter_mut().zip(&dbt).for_each(|(a, b)| *a += b);
        }
        let n = stats.count as f64;
        let mut d_pre = vec![0.0; pre.len()];
        d_pre
            .par_chunks_mut(per)
            .zip(pre.par_chunks(per))
            .zip(d_out.par_chunks(per))
            .for_each(|((dp, y), g)| {
                for c in 0..channels {
                    let k = self.gamma[c] * inv[c];
                    let (m, mb, mg) = (stats.mean[c], d_beta[c] / n, d_gamma[c] / n);
                    for t in c * p..(c + 1) * p {
                        let xhat = (y[t] - m) * inv[c];
                        dp[t] = k * (g[t] - mb - xhat * mg);
                    }
                }
            });
        (d_pre, d_gamma, d_beta)
    }

    /// Running variance tracks the unbiased batch variance.
    pub(crate) fn update_running(&mut self, stats: &BatchStats, momentum: Option<f64>) {
        let n = stats.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            let var = stats.var[c] * unbias;
            match momentum {
                Some(m) => {
                    self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
                    self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var;
                }
                None => {
                    self.running_mean[c] = stats.mean[c];
                    self.running_var[c] = var;
                }
            }
        }
    }
}

/// Convolution, optional batch normalization, optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: ConvLayer,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

impl Block {
    pub fn new(conv: ConvLayer, batchnorm: bool, relu: bool) -> Self {
        let norm = batchnorm.then(|| BatchNorm::new(conv.out_channels));
        Self { conv, norm, relu }
    }
}
