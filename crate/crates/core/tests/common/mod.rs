//! Oracles and fixtures shared by the integration tests and the acceptance
//! harness. Oracles here are written independently of the library code they
//! check: brute-force enumeration rather than sorted sweeps.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vace::encoder::{init_encoder, EncoderConfig, EncoderVariant, Role};
use vace::patching::Patch;
use vace::training::{loss_and_gradients, TrainConfig};
use vace::Matrix;

pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut hits = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    hits += 1.0;
                } else if scores[i] == scores[j] {
                    hits += 0.5;
                }
            }
        }
    }
    hits / pairs
}

/// Sum over distinct thresholds of (recall gain) x (precision at that
/// threshold), each prefix counted from scratch.
pub fn prefix_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for th in thresholds {
        let tp = (0..scores.len()).filter(|&i| scores[i] >= th && labels[i] == 1).count() as f64;
        let predicted = scores.iter().filter(|&&s| s >= th).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / predicted;
        prev_recall = recall;
    }
    ap
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn exhaustive_point_f1(scores: &[f64], labels: &[u8]) -> f64 {
    let mut best = 0.0f64;
    for &th in scores {
        let tp = (0..scores.len()).filter(|&i| scores[i] >= th && labels[i] == 1).count() as f64;
        let fp = (0..scores.len()).filter(|&i| scores[i] >= th && labels[i] == 0).count() as f64;
        let fn_ = (0..scores.len()).filter(|&i| scores[i] < th && labels[i] == 1).count() as f64;
        best = best.max(f1(tp / (tp + fp), tp / (tp + fn_)));
    }
    best
}

fn index_ranges(mask: &[bool]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            if i > 0 && mask[i - 1] {
                out.last_mut().expect("open range").push(i);
            } else {
                out.push(vec![i]);
            }
        }
    }
    out
}

fn range_side(ranges: &[Vec<usize>], others: &[Vec<usize>]) -> f64 {
    if ranges.is_empty() {
        return 0.0;
    }
    let total: f64 = ranges
        .iter()
        .map(|r| {
            let hits: Vec<usize> = others
                .iter()
                .map(|o| r.iter().filter(|i| o.contains(i)).count())
                .filter(|&c| c > 0)
                .collect();
            if hits.is_empty() {
                0.0
            } else {
                hits.iter().sum::<usize>() as f64 / r.len() as f64 / hits.len() as f64
            }
        })
        .sum();
    total / ranges.len() as f64
}

pub fn exhaustive_range_f1(scores: &[f64], labels: &[u8]) -> f64 {
    let real = index_ranges(&labels.iter().map(|&l| l == 1).collect::<Vec<_>>());
    let mut best = 0.0f64;
    for &th in scores {
        let pred = index_ranges(&scores.iter().map(|&s| s >= th).collect::<Vec<_>>());
        best = best.max(f1(range_side(&pred, &real), range_side(&real, &pred)));
    }
    best
}

/// Random scores on a coarse grid so ties are common, and labels holding
/// both classes.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    loop {
        let n = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0u8..12)) / 3.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

pub fn random_patch(rng: &mut ChaCha8Rng, patch_len: usize, channels: usize) -> Patch {
    let data = (0..patch_len * channels).map(|_| rng.random_range(-2.0..2.0)).collect();
    Patch {
        values: Matrix::from_vec(patch_len, channels, data).expect("shape"),
        start_index: 0,
        norm_stats: vec![],
    }
}

pub struct GradientCase {
    pub channels: usize,
    pub variant: EncoderVariant,
    pub batchnorm: bool,
    pub seed: u64,
}

/// Ten tiny encoders covering one to three channels, both layer-one
/// variants, with and without normalization.
pub fn gradient_cases() -> Vec<GradientCase> {
    (0..10)
        .map(|i| GradientCase {
            channels: 1 + i % 3,
            variant: if i % 2 == 0 {
                EncoderVariant::ChannelAware
            } else {
                EncoderVariant::SharedKernel
            },
            batchnorm: (i / 2) % 2 == 0,
            seed: 100 + i as u64,
        })
        .collect()
}

/// Relative error below this denominator is measured in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Largest relative error between backprop gradients of `lambda * L` and
/// central differences with step `h`.
pub fn gradient_check(case: &GradientCase, h: f64) -> f64 {
    let config = EncoderConfig {
        channels: case.channels,
        patch_len: 8,
        d_z: 4,
        c_e: 2,
        kernel_sizes: vec![3, 5, 3, 1],
        variant: case.variant,
        batchnorm: case.batchnorm,
        seed: case.seed,
    };
    let mut params = init_encoder(&config).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    // zero biases put dead channels exactly on a ReLU kink, where central
    // differences see half a one-sided slope; move every parameter off init
    for (role, tensor) in params.learnable_mut() {
        for v in tensor.iter_mut() {
            *v = match role {
                Role::Weight => *v,
                Role::NormScale => rng.random_range(0.5..1.5),
                Role::Bias | Role::NormShift => rng.random_range(-0.2..0.2),
            };
        }
    }
    let patches: Vec<Patch> = (0..9).map(|_| random_patch(&mut rng, 8, case.channels)).collect();
    let triples: Vec<[&Patch; 3]> = (0..3)
        .map(|a| [&patches[a], &patches[3 + a], &patches[6 + a]])
        .collect();
    let train = TrainConfig {
        steps: 10,
        ..TrainConfig::default()
    };
    let step = 4;
    let lambda = train.lambda_at(step);
    let analytic = loss_and_gradients(&params, &triples, &train, step)
        .expect("gradients")
        .grads;

    let mut worst = 0.0f64;
    let n_tensors = analytic.len();
    for t in 0..n_tensors {
        for i in 0..analytic[t].len() {
            let mut eval = |delta: f64| {
                let original = {
                    let mut tensors = params.learnable_mut();
                    let v = tensors[t].1[i];
                    tensors[t].1[i] = v + delta;
                    v
                };
                let loss = loss_and_gradients(&params, &triples, &train, step).expect("loss").loss;
                params.learnable_mut()[t].1[i] = original;
                lambda * loss
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[t][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// A trajectory along a fixed unit direction with uniform speed.
pub fn collinear_trajectory(n: usize, direction: &[f64]) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|t| direction.iter().map(|d| 1.5 + 0.7 * t as f64 * d).collect())
        .collect();
    Matrix::from_rows(&rows).expect("rows")
}
