//! Channel-aware patch encoder.
//!
//! A stack of depthwise temporal convolutions lifts each input channel into
//! `c_e` feature maps of its own before a pointwise (1x1) convolution mixes
//! them into `d_z` maps, which are averaged over time into the embedding.
//! Every convolution is followed by batch normalization when enabled; the
//! depthwise stages also apply a ReLU.
//!
//! Activations are stored channel-major per patch (`[channel][time]`), and
//! the backward pass is written out by hand against the cached forward
//! activations. Batch statistics are reduced over fixed-size patch chunks in
//! index order so results do not depend on the thread count.

mod checkpoint;
mod config;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{decode_params, encode_params, params_from_json, params_to_json};
pub use config::{EncoderConfig, EncoderVariant};
pub use layers::{BatchNorm, Block, ConvLayer, BN_EPS, BN_MOMENTUM};

use crate::error::{Result, VaceError};
use crate::matrix::Matrix;
use crate::patching::Patch;

/// Patches per reduction chunk; fixed so reductions are order-stable.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learnable-parameter category, used to decide which tensors receive
/// weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl Role {
    pub fn decays(self) -> bool {
        matches!(self, Role::Weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// Depthwise stages followed by the pointwise head (always last).
    pub blocks: Vec<Block>,
    pub training: bool,
}

/// One gradient vector per learnable tensor, in [`EncoderParams::learnable`]
/// order.
pub type Gradients = Vec<Vec<f64>>;

/// Per-channel statistics observed on one train-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population variance.
    pub var: Vec<f64>,
    pub count: usize,
}

struct BlockCache {
    /// Pre-normalization conv output, `B * C * P`.
    pre: Vec<f64>,
    /// Block output after normalization and activation, `B * C * P`.
    out: Vec<f64>,
    stats: Option<BatchStats>,
}

pub(crate) struct ForwardCache {
    input: Vec<f64>,
    blocks: Vec<BlockCache>,
    pub(crate) embeddings: Matrix,
}

impl ForwardCache {
    pub(crate) fn batch_stats(&self) -> Vec<Option<BatchStats>> {
        self.blocks.iter().map(|b| b.stats.clone()).collect()
    }
}

pub fn init_encoder(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.feature_maps();
    let mut blocks = Vec::with_capacity(config.kernel_sizes.len() + 1);
    for (l, &k) in config.kernel_sizes.iter().enumerate() {
        let conv = if l == 0 {
            match config.variant {
                EncoderVariant::ChannelAware => ConvLayer::depthwise(config.channels, c, k, &mut rng),
                EncoderVariant::SharedKernel => ConvLayer::full(config.channels, c, k, &mut rng),
            }
        } else {
            ConvLayer::depthwise(c, c, k, &mut rng)
        };
        blocks.push(Block::new(conv, config.batchnorm, true));
    }
    let head = ConvLayer::full(c, config.d_z, 1, &mut rng);
    blocks.push(Block::new(head, config.batchnorm, false));
    Ok(EncoderParams {
        config: config.clone(),
        blocks,
        training: true,
    })
}

impl EncoderParams {
    /// Learnable tensors with their names and roles, in a fixed order.
    pub fn learnable(&self) -> Vec<(String, Role, &[f64])> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let tag = self.block_tag(i);
            out.push((format!("{tag}.weight"), Role::Weight, b.conv.weight.as_slice()));
            out.push((format!("{tag}.bias"), Role::Bias, b.conv.bias.as_slice()));
            if let Some(bn) = &b.norm {
                out.push((format!("{tag}.bn.gamma"), Role::NormScale, bn.gamma.as_slice()));
                out.push((format!("{tag}.bn.beta"), Role::NormShift, bn.beta.as_slice()));
            }
        }
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<(Role, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            out.push((Role::Weight, &mut b.conv.weight));
            out.push((Role::Bias, &mut b.conv.bias));
            if let Some(bn) = &mut b.norm {
                out.push((Role::NormScale, &mut bn.gamma));
                out.push((Role::NormShift, &mut bn.beta));
            }
        }
        out
    }

    pub(crate) fn block_tag(&self, i: usize) -> String {
        if i + 1 == self.blocks.len() {
            "head".to_string()
        } else {
            format!("conv{i}")
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.learnable().iter().map(|(_, _, t)| vec![0.0; t.len()]).collect()
    }

    /// Checks every tensor shape against the configuration.
    pub fn audit_shapes(&self) -> Result<()> {
        let reference = init_encoder(&self.config)?;
        if reference.blocks.len() != self.blocks.len() {
            return Err(VaceError::Dimension(format!(
                "{} blocks, configuration implies {}",
                self.blocks.len(),
                reference.blocks.len()
            )));
        }
        for (i, (a, b)) in self.blocks.iter().zip(&reference.blocks).enumerate() {
            let same = a.conv.in_channels == b.conv.in_channels
                && a.conv.out_channels == b.conv.out_channels
                && a.conv.kernel == b.conv.kernel
                && a.conv.fan_in == b.conv.fan_in
                && a.conv.weight.len() == b.conv.weight.len()
                && a.conv.bias.len() == b.conv.bias.len()
                && a.relu == b.relu
                && match (&a.norm, &b.norm) {
                    (Some(x), Some(y)) => {
                        x.gamma.len() == y.gamma.len()
                            && x.beta.len() == y.beta.len()
                            && x.running_mean.len() == y.running_mean.len()
                            && x.running_var.len() == y.running_var.len()
                            && x.running_var.iter().all(|&v| v > 0.0)
                    }
                    (None, None) => true,
                    _ => false,
                };
            if !same {
                return Err(VaceError::Dimension(format!(
                    "block {} does not match the configured shape",
                    self.block_tag(i)
                )));
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[Patch]) -> Result<()> {
        for p in batch {
            if p.len() != self.config.patch_len || p.channels() != self.config.channels {
                return Err(VaceError::Dimension(format!(
                    "patch is {}x{}, encoder expects {}x{}",
                    p.len(),
                    p.channels(),
                    self.config.patch_len,
                    self.config.channels
                )));
            }
        }
        Ok(())
    }

    /// Encodes a batch into `B x d_z` embeddings. Train mode normalizes with
    /// batch statistics and folds them into the running statistics.
    pub fn forward(&mut self, batch: &[Patch], mode: Mode) -> Result<Matrix> {
        match mode {
            Mode::Eval => self.embed(batch),
            Mode::Train => {
                let cache = self.forward_train(batch)?;
                self.update_running(&cache.batch_stats(), Some(BN_MOMENTUM));
                Ok(cache.embeddings)
            }
        }
    }

    /// Eval-mode encoding; read-only, parallel over patches.
    pub fn embed(&self, batch: &[Patch]) -> Result<Matrix> {
        self.check_batch(batch)?;
        let p = self.config.patch_len;
        let d_z = self.config.d_z;
        let rows: Vec<f64> = batch
            .par_iter()
            .flat_map_iter(|patch| {
                let mut act = channel_major(patch);
                for block in &self.blocks {
                    let mut y = vec![0.0; block.conv.out_channels * p];
                    block.conv.forward(&act, &mut y, p);
                    if let Some(bn) = &block.norm {
                        bn.apply_running(&mut y, p);
                    }
                    if block.relu {
                        relu(&mut y);
                    }
                    act = y;
                }
                pool(&act, d_z, p)
            })
            .collect();
        Matrix::from_vec(batch.len(), d_z, rows)
    }

    /// Intermediate activations entering the pointwise head, channel-major
    /// (`C * P`), eval mode.
    pub fn probe_features(&self, patch: &Patch) -> Result<Vec<f64>> {
        self.check_batch(std::slice::from_ref(patch))?;
        let p = self.config.patch_len;
        let mut act = channel_major(patch);
        for block in &self.blocks[..self.blocks.len() - 1] {
            let mut y = vec![0.0; block.conv.out_channels * p];
            block.conv.forward(&act, &mut y, p);
            if let Some(bn) = &block.norm {
                bn.apply_running(&mut y, p);
            }
            if block.relu {
                relu(&mut y);
            }
            act = y;
        }
        Ok(act)
    }

    /// Train-mode forward pass that leaves running statistics untouched.
    pub(crate) fn forward_train(&self, batch: &[Patch]) -> Result<ForwardCache> {
        self.check_batch(batch)?;
        if batch.is_empty() {
            return Err(VaceError::EmptyInput("empty batch".into()));
        }
        let p = self.config.patch_len;
        let input: Vec<f64> = batch.iter().flat_map(channel_major).collect();
        let mut caches: Vec<BlockCache> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let prev: &[f64] = caches.last().map_or(&input, |c| &c.out);
            let in_sz = block.conv.in_channels * p;
            let out_sz = block.conv.out_channels * p;
            let mut pre = vec![0.0; batch.len() * out_sz];
            pre.par_chunks_mut(out_sz)
                .zip(prev.par_chunks(in_sz))
                .for_each(|(y, x)| block.conv.forward(x, y, p));
            let mut out = pre.clone();
            let stats = match &block.norm {
                Some(bn) => {
                    let stats = channel_stats(&pre, block.conv.out_channels, p);
                    bn.apply_batch(&mut out, &stats, p);
                    Some(stats)
                }
                None => None,
            };
            if block.relu {
                relu(&mut out);
            }
            caches.push(BlockCache { pre, out, stats });
        }
        let d_z = self.config.d_z;
        let last = &caches.last().expect("head block").out;
        let rows: Vec<f64> = last.chunks(d_z * p).flat_map(|a| pool(a, d_z, p)).collect();
        Ok(ForwardCache {
            input,
            blocks: caches,
            embeddings: Matrix::from_vec(batch.len(), d_z, rows)?,
        })
    }

    /// Reverse-mode gradients of a scalar loss given `dL/dz` for every
    /// embedding in the cached batch.
    pub(crate) fn backward(&self, cache: &ForwardCache, dz: &Matrix) -> Gradients {
        let p = self.config.patch_len;
        let batch = dz.rows();
        let d_z = self.config.d_z;
        let mut grads = Vec::new();

        // gradient w.r.t. the head output map: pooling spreads dz evenly in time
        let mut d_out = vec![0.0; batch * d_z * p];
        for (b, chunk) in d_out.chunks_mut(d_z * p).enumerate() {
            for j in 0..d_z {
                let g = dz.get(b, j) / p as f64;
                chunk[j * p..(j + 1) * p].iter_mut().for_each(|v| *v = g);
            }
        }

        for (i, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let c_out = block.conv.out_channels;
            if block.relu {
                for (g, &o) in d_out.iter_mut().zip(&bc.out) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let mut block_grads = Vec::with_capacity(4);
            let d_pre = match (&block.norm, &bc.stats) {
                (Some(bn), Some(stats)) => {
                    let (d_pre, d_gamma, d_beta) = bn.backward_batch(&bc.pre, &d_out, stats, p);
                    block_grads.push(d_gamma);
                    block_grads.push(d_beta);
                    d_pre
                }
                _ => d_out,
            };
            let input: &[f64] = if i == 0 { &cache.input } else { &cache.blocks[i - 1].out };
            let in_sz = block.conv.in_channels * p;
            let out_sz = c_out * p;
            let partials: Vec<(Vec<f64>, Vec<f64>)> = d_pre
                .par_chunks(out_sz * CHUNK)
                .zip(input.par_chunks(in_sz * CHUNK))
                .map(|(dy, x)| {
                    let mut dw = vec![0.0; block.conv.weight.len()];
                    let mut db = vec![0.0; c_out];
                    for (dy_b, x_b) in dy.chunks(out_sz).zip(x.chunks(in_sz)) {
                        block.conv.accumulate_param_grads(x_b, dy_b, &mut dw, &mut db, p);
                    }
                    (dw, db)
                })
                .collect();
            let mut dw = vec![0.0; block.conv.weight.len()];
            let mut db = vec![0.0; c_out];
            for (pw, pb) in partials {
                add_assign(&mut dw, &pw);
                add_assign(&mut db, &pb);
            }
            if i > 0 {
                let mut d_in = vec![0.0; batch * in_sz];
                d_in.par_chunks_mut(in_sz)
                    .zip(d_pre.par_chunks(out_sz))
                    .for_each(|(dx, dy)| block.conv.input_grad(dy, dx, p));
                d_out = d_in;
            } else {
                d_out = Vec::new();
            }
            // learnable order within a block: weight, bias, gamma, beta
            let mut ordered = vec![dw, db];
            ordered.extend(block_grads);
            grads.push(ordered);
        }
        grads.reverse();
        grads.into_iter().flatten().collect()
    }

    /// Folds batch statistics into the running statistics. `None` replaces
    /// them outright (a cumulative average over a single batch).
    pub fn update_running(&mut self, stats: &[Option<BatchStats>], momentum: Option<f64>) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            if let (Some(bn), Some(s)) = (&mut block.norm, s) {
                bn.update_running(s, momentum);
            }
        }
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }
}

impl EncoderParams {
    /// Train-mode statistics of every normalized block over `patches`,
    /// computed one block at a time.
    pub(crate) fn streaming_statistics(&self, patches: &[Patch]) -> Result<Vec<Option<BatchStats>>> {
        self.check_batch(patches)?;
        if patches.is_empty() {
            return Err(VaceError::EmptyInput("no patches".into()));
        }
        let mut acts: Vec<Vec<f64>> = patches.par_iter().map(channel_major).collect();
        let p = self.config.patch_len;
        let mut stats = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let c_out = block.conv.out_channels;
            let pre: Vec<Vec<f64>> = acts
                .par_iter()
                .map(|x| {
                    let mut y = vec![0.0; c_out * p];
                    block.conv.forward(x, &mut y, p);
                    y
                })
                .collect();
            let s = block.norm.as_ref().map(|_| stats_over(&pre, c_out, p));
            acts = pre;
            if let (Some(bn), Some(s)) = (&block.norm, &s) {
                acts.par_iter_mut().for_each(|y| {
                    for (c, yc) in y.chunks_mut(p).enumerate() {
                        let inv = 1.0 / (s.var[c] + BN_EPS).sqrt();
                        yc.iter_mut()
                            .for_each(|v| *v = bn.gamma[c] * (*v - s.mean[c]) * inv + bn.beta[c]);
                    }
                });
            }
            if block.relu {
                acts.par_iter_mut()
                    .for_each(|y| y.iter_mut().for_each(|v| *v = v.max(0.0)));
            }
            stats.push(s);
        }
        Ok(stats)
    }
}

pub fn count_params(params: &EncoderParams) -> usize {
    params.learnable().iter().map(|(_, _, t)| t.len()).sum()
}

fn channel_major(patch: &Patch) -> Vec<f64> {
    let (p, d) = (patch.len(), patch.channels());
    let mut out = vec![0.0; p * d];
    for t in 0..p {
        for (c, &v) in patch.values.row(t).iter().enumerate() {
            out[c * p + t] = v;
        }
    }
    out
}

fn pool(act: &[f64], channels: usize, p: usize) -> Vec<f64> {
    (0..channels)
        .map(|j| act[j * p..(j + 1) * p].iter().sum::<f64>() / p as f64)
        .collect()
}

fn relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

fn add_assign(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

fn stats_over(per_patch: &[Vec<f64>], channels: usize, p: usize) -> BatchStats {
    channel_stats(&per_patch.concat(), channels, p)
}

/// Per-channel population mean and variance over batch and time.
fn channel_stats(pre: &[f64], channels: usize, p: usize) -> BatchStats {
    let per = channels * p;
    let batch = pre.len() / per;
    let n = (batch * p) as f64;
    let sums: Vec<Vec<f64>> = pre
        .par_chunks(per * CHUNK)
        .map(|chunk| {
            let mut s = vec![0.0; channels];
            for y in chunk.chunks(per) {
                for (c, sc) in s.iter_mut().enumerate() {
                    *sc += y[c * p..(c + 1) * p].iter().sum::<f64>();
                }
            }
            s
        })
        .collect();
    let mut mean = vec![0.0; channels];
    for s in &sums {
        add_assign(&mut mean, s);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let sq: Vec<Vec<f64>> = pre
        .par_chunks(per * CHUNK)
        .map(|chunk| {
            let mut s = vec![0.0; channels];
            for y in chunk.chunks(per) {
                for (c, sc) in s.iter_mut().enumerate() {
                    let m = mean[c];
                    *sc += y[c * p..(c + 1) * p].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
            }
            s
        })
        .collect();
    let mut var = vec![0.0; channels];
    for s in &sq {
        add_assign(&mut var, s);
    }
    var.iter_mut().for_each(|v| *v /= n);
    BatchStats {
        mean,
        var,
        count: batch * p,
    }
}

#[cfg(test)]
mod tests;
