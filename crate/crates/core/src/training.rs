//! Velocity-consistency pretext training.
//!
//! For an offset `delta`, every anchor `t` contributes the backward velocity
//! `normalize(z_t - z_{t-delta})` and the forward velocity
//! `normalize(z_{t+delta} - z_t)`; the loss is the mean of
//! `1 - <v_b, v_f>` over anchors. Normalization divides by
//! `max(eps_vel, norm)`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{BatchStats, EncoderParams, Gradients, BN_MOMENTUM};
use crate::error::{Result, VaceError};
use crate::matrix::{dot, norm, Matrix};
use crate::patching::{Patch, PatchSet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_anchors: usize,
    pub delta: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub eps_vel: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            batch_anchors: 512,
            delta: 48,
            lr: 1e-3,
            weight_decay: 1e-4,
            lambda_start: 1.0,
            lambda_end: 0.1,
            eps_vel: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(VaceError::Config("delta must be at least 1".into()));
        }
        if self.batch_anchors == 0 {
            return Err(VaceError::Config("batch_anchors must be at least 1".into()));
        }
        if !(self.lambda_end > 0.0 && self.lambda_start >= self.lambda_end) {
            return Err(VaceError::Config(
                "loss weights must satisfy lambda_start >= lambda_end > 0".into(),
            ));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let steps = self.steps.max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * (t as f64 - 1.0) / steps).cos())
    }

    /// Linearly decaying loss weight for 1-based step `t`.
    pub fn lambda_at(&self, t: usize) -> f64 {
        if self.steps <= 1 {
            return self.lambda_start;
        }
        let frac = (t as f64 - 1.0) / (self.steps as f64 - 1.0);
        self.lambda_start + (self.lambda_end - self.lambda_start) * frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityPair {
    pub backward: Vec<f64>,
    pub forward: Vec<f64>,
    pub anchor: usize,
}

/// `(to - from) / max(eps, ||to - from||)`, together with the raw norm.
pub fn normalized_difference(from: &[f64], to: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let diff: Vec<f64> = to.iter().zip(from).map(|(a, b)| a - b).collect();
    let n = norm(&diff);
    let s = n.max(eps);
    (diff.into_iter().map(|v| v / s).collect(), n)
}

pub fn compute_velocities(z: &Matrix, delta: usize, eps_vel: f64) -> Result<Vec<VelocityPair>> {
    let n = z.rows();
    if delta == 0 || n <= 2 * delta {
        return Err(VaceError::InsufficientTrajectory { len: n, delta });
    }
    Ok((delta..n - delta)
        .map(|t| VelocityPair {
            backward: normalized_difference(z.row(t - delta), z.row(t), eps_vel).0,
            forward: normalized_difference(z.row(t), z.row(t + delta), eps_vel).0,
            anchor: t,
        })
        .collect())
}

pub fn velocity_loss(pairs: &[VelocityPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(VaceError::EmptyInput("no velocity pairs".into()));
    }
    Ok(pairs.iter().map(|p| 1.0 - dot(&p.backward, &p.forward)).sum::<f64>() / pairs.len() as f64)
}

/// Velocity loss of the eval-mode trajectory over a whole patch set.
pub fn trajectory_loss(params: &EncoderParams, patches: &PatchSet, delta: usize, eps_vel: f64) -> Result<f64> {
    let z = params.embed(&patches.patches)?;
    velocity_loss(&compute_velocities(&z, delta, eps_vel)?)
}

/// Jacobian-vector product of `u -> u / max(eps, ||u||)` evaluated at `u`
/// with output `v`, applied to upstream gradient `g`.
fn normalize_vjp(v: &[f64], raw_norm: f64, eps: f64, g: &[f64]) -> Vec<f64> {
    if raw_norm > eps {
        let vg = dot(v, g);
        g.iter().zip(v).map(|(gi, vi)| (gi - vi * vg) / raw_norm).collect()
    } else {
        g.iter().map(|gi| gi / eps).collect()
    }
}

/// Loss and `dL/dz` for a batch laid out as `[prev..., center..., next...]`.
pub fn velocity_loss_grad(z: &Matrix, eps_vel: f64) -> (f64, Matrix) {
    let anchors = z.rows() / 3;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let mut loss = 0.0;
    let scale = 1.0 / anchors as f64;
    for a in 0..anchors {
        let (ip, ic, inx) = (a, anchors + a, 2 * anchors + a);
        let (vb, nb) = normalized_difference(z.row(ip), z.row(ic), eps_vel);
        let (vf, nf) = normalized_difference(z.row(ic), z.row(inx), eps_vel);
        loss += 1.0 - dot(&vb, &vf);
        let g_vb: Vec<f64> = vf.iter().map(|x| -x * scale).collect();
        let g_vf: Vec<f64> = vb.iter().map(|x| -x * scale).collect();
        let g_ub = normalize_vjp(&vb, nb, eps_vel, &g_vb);
        let g_uf = normalize_vjp(&vf, nf, eps_vel, &g_vf);
        for j in 0..z.cols() {
            grad.set(ip, j, grad.get(ip, j) - g_ub[j]);
            grad.set(ic, j, grad.get(ic, j) + g_ub[j] - g_uf[j]);
            grad.set(inx, j, grad.get(inx, j) + g_uf[j]);
        }
    }
    (loss * scale, grad)
}

#[derive(Debug, Clone)]
pub struct LossAndGradients {
    /// Velocity loss before loss weighting.
    pub loss: f64,
    /// Gradients of `lambda_t * loss`.
    pub grads: Gradients,
    pub batch_stats: Vec<Option<BatchStats>>,
}

/// Encodes every `(x_{t-delta}, x_t, x_{t+delta})` triple in a single
/// train-mode batch and backpropagates `lambda_t * L_vel`.
pub fn loss_and_gradients(
    params: &EncoderParams,
    triples: &[[&Patch; 3]],
    config: &TrainConfig,
    step: usize,
) -> Result<LossAndGradients> {
    if triples.is_empty() {
        return Err(VaceError::EmptyInput("no anchors".into()));
    }
    let batch: Vec<Patch> = (0..3).flat_map(|k| triples.iter().map(move |t| t[k].clone())).collect();
    let cache = params.forward_train(&batch)?;
    let (loss, mut dz) = velocity_loss_grad(&cache.embeddings, config.eps_vel);
    if !loss.is_finite() {
        return Err(VaceError::NumericFailure { step });
    }
    let lambda = config.lambda_at(step.max(1));
    dz.as_mut_slice().iter_mut().for_each(|g| *g *= lambda);
    let grads = params.backward(&cache, &dz);
    Ok(LossAndGradients {
        loss,
        grads,
        batch_stats: cache.batch_stats(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Gradients,
    pub v: Gradients,
}

impl AdamWState {
    pub fn zeros_like(grads: &Gradients) -> Self {
        Self {
            m: grads.iter().map(|g| vec![0.0; g.len()]).collect(),
            v: grads.iter().map(|g| vec![0.0; g.len()]).collect(),
        }
    }
}

/// One AdamW update of a single tensor with decoupled weight decay.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] *= 1.0 - lr * weight_decay;
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Applies one optimizer step. `grads` already carry the loss weight;
/// weight decay applies to convolution weights only.
pub fn adamw_step(
    params: &mut EncoderParams,
    grads: &Gradients,
    state: &mut AdamWState,
    step: usize,
    config: &TrainConfig,
) {
    let lr = config.lr_at(step);
    for (i, (role, tensor)) in params.learnable_mut().into_iter().enumerate() {
        let wd = if role.decays() { config.weight_decay } else { 0.0 };
        adamw_update(tensor, &grads[i], &mut state.m[i], &mut state.v[i], step, lr, wd);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lambda_t: f64,
    pub lr_t: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub trace: Vec<TraceRow>,
}

/// Runs `config.steps` optimizer steps on anchors sampled with replacement,
/// then refreshes the running statistics with one train-mode pass over all
/// patches and switches the encoder to eval mode.
pub fn train(mut params: EncoderParams, patches: &PatchSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let n = patches.len();
    let delta = config.delta;
    if n <= 2 * delta {
        return Err(VaceError::InsufficientTrajectory { len: n, delta });
    }
    params.set_training(true);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamWState::zeros_like(&params.zero_gradients());
    let mut trace = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let triples: Vec<[&Patch; 3]> = (0..config.batch_anchors)
            .map(|_| {
                let t = rng.random_range(delta..n - delta);
                [
                    &patches.patches[t - delta],
                    &patches.patches[t],
                    &patches.patches[t + delta],
                ]
            })
            .collect();
        let out = loss_and_gradients(&params, &triples, config, step)?;
        if out.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(VaceError::NumericFailure { step });
        }
        params.update_running(&out.batch_stats, Some(BN_MOMENTUM));
        adamw_step(&mut params, &out.grads, &mut state, step, config);
        trace.push(TraceRow {
            step,
            lambda_t: config.lambda_at(step),
            lr_t: config.lr_at(step),
            loss: out.loss,
        });
    }
    refresh_statistics(&mut params, &patches.patches)?;
    params.set_training(false);
    Ok(TrainOutcome { params, trace })
}

/// Replaces running statistics with the batch statistics of `patches`.
pub fn refresh_statistics(params: &mut EncoderParams, patches: &[Patch]) -> Result<()> {
    if params.config.batchnorm {
        let stats = params.streaming_statistics(patches)?;
        params.update_running(&stats, None);
    }
    Ok(())
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in trace {
        w.serialize(row).map_err(|e| VaceError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| VaceError::Format(e.to_string()))?;
    Ok(())
}

pub fn read_trace_csv<R: std::io::Read>(reader: R) -> Result<Vec<TraceRow>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(|e| VaceError::Format(e.to_string())))
        .collect()
}
