use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_patch(rng: &mut ChaCha8Rng, p: usize, d: usize) -> Patch {
    let data = (0..p * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    Patch {
        values: Matrix::from_vec(p, d, data).unwrap(),
        start_index: 0,
        norm_stats: vec![],
    }
}

fn tiny_config(d: usize, variant: EncoderVariant, batchnorm: bool) -> EncoderConfig {
    EncoderConfig {
        channels: d,
        patch_len: 8,
        d_z: 4,
        c_e: 2,
        kernel_sizes: vec![3, 5, 3, 1],
        variant,
        batchnorm,
        seed: 11,
    }
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let cfg = EncoderConfig::new(3, 96);
    let a = init_encoder(&cfg).unwrap();
    let b = init_encoder(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.blocks[0].conv.out_channels, 24);
    for block in &a.blocks {
        assert!(block.conv.bias.iter().all(|&v| v == 0.0));
        let bn = block.norm.as_ref().unwrap();
        assert!(bn.gamma.iter().all(|&v| v == 1.0));
        assert!(bn.running_var.iter().all(|&v| v == 1.0));
        let bound = (6.0 / (block.conv.fan_in * block.conv.kernel) as f64).sqrt();
        assert!(block.conv.weight.iter().all(|w| w.abs() <= bound));
    }
    a.audit_shapes().unwrap();
}

#[test]
fn identity_kernel_gives_temporal_mean() {
    let cfg = EncoderConfig {
        channels: 1,
        patch_len: 6,
        d_z: 2,
        c_e: 1,
        kernel_sizes: vec![1],
        variant: EncoderVariant::ChannelAware,
        batchnorm: false,
        seed: 0,
    };
    let mut params = init_encoder(&cfg).unwrap();
    params.blocks[0].conv.weight = vec![1.0];
    params.blocks[1].conv.weight = vec![1.0, 1.0];
    let xs = [0.5, 1.5, 2.0, 3.0, 4.0, 1.0];
    let patch = Patch {
        values: Matrix::from_vec(6, 1, xs.to_vec()).unwrap(),
        start_index: 0,
        norm_stats: vec![],
    };
    let z = params.forward(&[patch], Mode::Eval).unwrap();
    let mean = xs.iter().sum::<f64>() / 6.0;
    assert!((z.get(0, 0) - mean).abs() < 1e-15);
    assert!((z.get(0, 1) - mean).abs() < 1e-15);
}

#[test]
fn eval_forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = init_encoder(&tiny_config(2, EncoderVariant::ChannelAware, true)).unwrap();
    let batch: Vec<Patch> = (0..5).map(|_| random_patch(&mut rng, 8, 2)).collect();
    let a = params.embed(&batch).unwrap();
    let b = params.embed(&batch).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_forward_is_batch_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = init_encoder(&tiny_config(3, EncoderVariant::ChannelAware, true)).unwrap();
    let batch: Vec<Patch> = (0..4).map(|_| random_patch(&mut rng, 8, 3)).collect();
    let order = [2usize, 0, 3, 1];
    let permuted: Vec<Patch> = order.iter().map(|&i| batch[i].clone()).collect();
    let a = params.forward_train(&batch).unwrap().embeddings;
    let b = params.forward_train(&permuted).unwrap().embeddings;
    for (k, &i) in order.iter().enumerate() {
        for j in 0..4 {
            assert!((a.get(i, j) - b.get(k, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn train_mode_updates_running_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = init_encoder(&tiny_config(1, EncoderVariant::ChannelAware, true)).unwrap();
    let batch: Vec<Patch> = (0..3).map(|_| random_patch(&mut rng, 8, 1)).collect();
    let before = params.clone();
    params.forward(&batch, Mode::Train).unwrap();
    assert_ne!(before.blocks[0].norm, params.blocks[0].norm);
    let after = params.clone();
    params.forward(&batch, Mode::Eval).unwrap();
    assert_eq!(after, params);
}

#[test]
fn rejects_mismatched_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = init_encoder(&tiny_config(2, EncoderVariant::ChannelAware, true)).unwrap();
    let bad = random_patch(&mut rng, 8, 3);
    assert!(matches!(params.embed(&[bad]), Err(VaceError::Dimension(_))));
}

#[test]
fn param_count_closed_form() {
    let cfg = EncoderConfig {
        channels: 2,
        patch_len: 8,
        d_z: 4,
        c_e: 2,
        kernel_sizes: vec![3, 3, 3, 3],
        variant: EncoderVariant::ChannelAware,
        batchnorm: true,
        seed: 1,
    };
    // C = D * c_e = 4 maps; four depthwise stages of C*k weights + C biases,
    // head of d_z*C weights + d_z biases, and (gamma, beta) per normalized map.
    let c = 4;
    let expected = 4 * (c * 3 + c) + (4 * c + 4) + 2 * (4 * c + 4);
    assert_eq!(expected, 124);
    let params = init_encoder(&cfg).unwrap();
    assert_eq!(count_params(&params), expected);

    let reseeded = init_encoder(&EncoderConfig {
        seed: 99,
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(count_params(&reseeded), expected);
    let wider = init_encoder(&EncoderConfig { c_e: 4, ..cfg }).unwrap();
    assert!(count_params(&wider) > expected);
}

#[test]
fn shared_kernel_budget_is_close() {
    let aware = init_encoder(&EncoderConfig::new(3, 96)).unwrap();
    let shared = init_encoder(&EncoderConfig {
        variant: EncoderVariant::SharedKernel,
        ..EncoderConfig::new(3, 96)
    })
    .unwrap();
    let (a, s) = (count_params(&aware) as f64, count_params(&shared) as f64);
    assert!((s - a).abs() / a <= 0.2, "{a} vs {s}");
}

#[test]
fn channels_stay_separate_until_the_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = tiny_config(3, EncoderVariant::ChannelAware, false);
    let params = init_encoder(&cfg).unwrap();
    let patch = random_patch(&mut rng, 8, 3);
    let base = params.probe_features(&patch).unwrap();
    let group = cfg.c_e * cfg.patch_len;
    for c in 0..3 {
        let mut zeroed = patch.clone();
        for t in 0..8 {
            zeroed.values.set(t, c, 0.0);
        }
        let probed = params.probe_features(&zeroed).unwrap();
        for g in 0..3 {
            let same = base[g * group..(g + 1) * group] == probed[g * group..(g + 1) * group];
            if g == c {
                assert!(probed[g * group..(g + 1) * group].iter().all(|&v| v == 0.0));
            } else {
                assert!(same, "zeroing channel {c} changed group {g}");
            }
        }
    }
}

#[test]
fn outputs_are_finite_and_continuous() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for variant in [EncoderVariant::ChannelAware, EncoderVariant::SharedKernel] {
        let params = init_encoder(&tiny_config(2, variant, true)).unwrap();
        let x = random_patch(&mut rng, 8, 2);
        let z = params.embed(std::slice::from_ref(&x)).unwrap();
        assert!(z.is_finite());
        let mut prev = f64::INFINITY;
        for eps in [1e-1, 1e-3, 1e-5, 1e-7] {
            let mut y = x.clone();
            y.values.as_mut_slice().iter_mut().for_each(|v| *v += eps);
            let zy = params.embed(&[y]).unwrap();
            let dist = crate::matrix::norm(&z.row(0).iter().zip(zy.row(0)).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(dist <= prev + 1e-15);
            assert!(dist < 1e3 * eps);
            prev = dist;
        }
        let huge = Patch {
            values: Matrix::from_vec(8, 2, vec![1e6; 16]).unwrap(),
            start_index: 0,
            norm_stats: vec![],
        };
        assert!(params.embed(&[huge]).unwrap().is_finite());
    }
}

#[test]
fn checkpoint_round_trips() {
    let params = init_encoder(&tiny_config(2, EncoderVariant::SharedKernel, true)).unwrap();
    let bytes = encode_params(&params);
    let back = decode_params(&bytes).unwrap();
    assert_eq!(back, params);
    assert_eq!(encode_params(&back), bytes);
    let json = params_to_json(&params);
    assert_eq!(params_from_json(&json).unwrap(), params);

    assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_params(&extra).is_err());
    assert!(decode_params(b"nonsense").is_err());
}

#[test]
fn audit_rejects_wrong_shapes() {
    let mut params = init_encoder(&tiny_config(2, EncoderVariant::ChannelAware, true)).unwrap();
    params.blocks[1].conv.weight.pop();
    assert!(params.audit_shapes().is_err());
}
