use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::downstream::ecapa::SeRes2Block;
use crate::gradcheck::{check_grad, check_grad_smooth, check_params};
use crate::nn::ops::Mode;
use crate::nn::param::Params;
use crate::nn::testutil::rand_tensor;
use crate::upstream::SourceTag;
use crate::Error;

fn seq(id: &str, t: Tensor<f64>) -> FeatureSequence<f64> {
    FeatureSequence::new(id, SourceTag::Toy, t).unwrap()
}

fn batch(rng: &mut ChaCha8Rng, lengths: &[usize], c: usize) -> Frames<f64> {
    let seqs: Vec<Tensor<f64>> = lengths.iter().map(|&l| rand_tensor(rng, &[l, c])).collect();
    let refs: Vec<&Tensor<f64>> = seqs.iter().collect();
    Frames::from_sequences(&refs).unwrap()
}

/// Weighted sum of outputs so that every output element carries gradient.
fn probe_loss(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn mean_pool_examples() {
    let x = seq("u", Tensor::new(&[2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap());
    assert_eq!(mean_pool(&x, None).unwrap().vector.data(), &[2.0, 4.0]);
    let one = seq("u", Tensor::new(&[1, 3], vec![0.5, -1.0, 7.0]).unwrap());
    assert_eq!(mean_pool(&one, None).unwrap().vector.data(), &[0.5, -1.0, 7.0]);
    assert_eq!(mean_pool(&x, Some(&[true, false])).unwrap().vector.data(), &[1.0, 3.0]);
    assert!(matches!(mean_pool(&x, Some(&[false, false])), Err(Error::Data(_))));
    assert!(matches!(mean_pool(&x, Some(&[true])), Err(Error::Dimension(_))));
}

#[test]
fn batched_mean_pool_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = batch(&mut rng, &[3, 7, 1, 5], 6);
    let pooled = masked_mean(&x).unwrap();
    for b in 0..4 {
        let single = mean_pool(&seq("u", x.sequence(b)), None).unwrap();
        for (a, e) in pooled.row(b).iter().zip(single.vector.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn mean_pool_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = batch(&mut rng, &[4, 2], 3);
    let w = rand_tensor(&mut rng, &[2, 3]);
    let mut pool = MeanPool::new();
    pool.forward(&x).unwrap();
    let dx = pool.backward(&w).unwrap();
    let geometry = x.clone();
    let err = check_grad(&Tensor::new(&[x.data().len()], x.data().to_vec()).unwrap(), &Tensor::new(&[dx.data().len()], dx.data().to_vec()).unwrap(), |t| {
        let mut f = geometry.with_data(3, t.data().to_vec()).unwrap();
        f.zero_padding();
        probe_loss(&masked_mean(&f).unwrap(), &w)
    });
    assert!(err < 1e-8, "{err}");
}

fn tiny() -> EcapaConfig {
    EcapaConfig {
        channels: 8,
        res2_scale: 2,
        se_bottleneck: 4,
        attention_channels: 4,
        embedding_dim: 4,
        kernel_sizes: [3, 3, 3, 3],
        ..EcapaConfig::default()
    }
}

#[test]
fn default_embedding_dim() {
    let model = Ecapa::<f32>::new(6, EcapaConfig::default(), 0).unwrap();
    let x = seq("u", Tensor::from_fn(&[9, 6], |i| (i as f64 * 0.37).sin())).data().cast::<f32>();
    let fs = FeatureSequence::new("u", SourceTag::Toy, x).unwrap();
    assert_eq!(ecapa_embed(&fs, &model).unwrap().dim(), 192);
}

#[test]
fn config_validation() {
    assert!(EcapaConfig::default().validate().is_ok());
    assert!(EcapaConfig::small().validate().is_ok());
    let bad = EcapaConfig {
        channels: 10,
        res2_scale: 4,
        ..EcapaConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("divisible")));
    let even = EcapaConfig {
        kernel_sizes: [5, 2, 3, 3],
        ..EcapaConfig::default()
    };
    assert!(even.validate().is_err());
}

#[test]
fn constant_input_has_zero_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let asp = AttentiveStatsPool::<f64>::new(&mut rng, 5, 4);
    let frame = rand_tensor(&mut rng, &[1, 5]);
    let h = Frames::single(&Tensor::from_fn(&[12, 5], |i| frame.data()[i % 5])).unwrap();
    let pooled = asp.infer(&h).unwrap();
    for i in 0..5 {
        assert!((pooled.row(0)[i] - frame.data()[i]).abs() < 1e-9);
        assert!(pooled.row(0)[5 + i].abs() < 1e-5);
    }
}

#[test]
fn attention_sums_to_one_over_valid_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let asp = AttentiveStatsPool::<f64>::new(&mut rng, 6, 3);
    let h = batch(&mut rng, &[5, 9, 2], 6);
    let alpha = asp.attention(&h).unwrap();
    for b in 0..3 {
        for c in 0..6 {
            let s: f64 = (0..h.lengths()[b]).map(|t| alpha.frame(b, t)[c]).sum();
            assert!((s - 1.0).abs() < 1e-6);
            for t in h.lengths()[b]..h.time() {
                assert_eq!(alpha.frame(b, t)[c], 0.0);
            }
        }
    }
}

#[test]
fn attentive_pooling_gradients() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut asp = AttentiveStatsPool::<f64>::new(&mut rng, 3, 4);
        let h = batch(&mut rng, &[4, 6], 3);
        let w = rand_tensor(&mut rng, &[2, 6]);
        asp.forward(&h, Mode::Train).unwrap();
        let dh = asp.backward(&w).unwrap();
        let base = asp.clone();
        let geometry = h.clone();
        let flat = |f: &Frames<f64>| Tensor::new(&[f.data().len()], f.data().to_vec()).unwrap();
        let err = check_grad(&flat(&h), &flat(&dh), |t| {
            let mut f = geometry.with_data(3, t.data().to_vec()).unwrap();
            f.zero_padding();
            probe_loss(&base.clone().forward(&f, Mode::Train).unwrap(), &w)
        });
        assert!(err < 1e-5, "input, seed {seed}: {err}");
        let params = check_params(&asp, None, false, &mut rng, |m| probe_loss(&m.forward(&h, Mode::Train).unwrap(), &w));
        assert!(params.overall < 1e-5, "params, seed {seed}: {:?}", params.tensors);
    }
}

#[test]
fn se_and_res2_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = tiny();
    let mut blk = SeRes2Block::<f64>::new(&mut rng, &cfg, 3, 2);
    let x = batch(&mut rng, &[5, 3], 8);
    let w = rand_tensor(&mut rng, &[2 * 5 * 8]);
    let loss = |y: &Frames<f64>| y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
    let y = blk.forward(&x, Mode::Train).unwrap();
    let mut dy = y.with_data(8, w.data().to_vec()).unwrap();
    dy.zero_padding();
    let dx = blk.backward(&dy).unwrap();
    let base = blk.clone();
    let geometry = x.clone();
    let flat = |f: &Frames<f64>| Tensor::new(&[f.data().len()], f.data().to_vec()).unwrap();
    let err = check_grad(&flat(&x), &flat(&dx), |t| {
        let mut f = geometry.with_data(8, t.data().to_vec()).unwrap();
        f.zero_padding();
        loss(&base.clone().forward(&f, Mode::Train).unwrap())
    });
    assert!(err < 1e-5, "input: {err}");
    let params = check_params(&blk, None, false, &mut rng, |m| loss(&m.forward(&x, Mode::Train).unwrap()));
    assert!(params.overall < 1e-5, "{:?}", params.tensors);
}

#[test]
fn small_ecapa_end_to_end_gradient() {
    // many ReLUs: a few probes straddle kinks and are excluded by the oracle
    for seed in 0..6u64 {
        for mode in [Mode::Train, Mode::Eval] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = Ecapa::<f64>::new(5, EcapaConfig::small(), seed).unwrap();
            let x = batch(&mut rng, &[7, 4], 5);
            let w = rand_tensor(&mut rng, &[2, 8]);
            let y = model.forward(&x, mode).unwrap();
            assert_eq!(y.shape(), &[2, 8]);
            let dx = model.backward(&w).unwrap();
            let base = model.clone();
            let geometry = x.clone();
            let flat = |f: &Frames<f64>| Tensor::new(&[f.data().len()], f.data().to_vec()).unwrap();
            let check = check_grad_smooth(&flat(&x), &flat(&dx), |t| {
                let mut f = geometry.with_data(5, t.data().to_vec()).unwrap();
                f.zero_padding();
                probe_loss(&base.clone().forward(&f, mode).unwrap(), &w)
            });
            assert!(check.error < 1e-3, "input, seed {seed} {mode:?}: {check:?}");
            assert!(check.checked * 4 >= check.checked + check.skipped, "{check:?}");
            let params = check_params(&model, Some(4), true, &mut rng, |m| {
                probe_loss(&m.forward(&x, mode).unwrap(), &w)
            });
            assert!(params.overall < 1e-3, "seed {seed} {mode:?}: {:?}", params.tensors);
            assert!(params.checked * 4 >= params.checked + params.skipped);
        }
    }
}

#[test]
fn ecapa_padding_equivalence_in_eval_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut model = Ecapa::<f64>::new(4, tiny(), 1).unwrap();
    // populate running statistics so eval mode is non-trivial
    let warm = batch(&mut rng, &[6, 9, 4], 4);
    for _ in 0..3 {
        model.forward(&warm, Mode::Train).unwrap();
    }
    let x = batch(&mut rng, &[3, 10, 6, 1], 4);
    let batched = model.infer(&x).unwrap();
    for b in 0..4 {
        let single = model.infer(&Frames::single(&x.sequence(b)).unwrap()).unwrap();
        for (a, e) in batched.row(b).iter().zip(single.data()) {
            assert!((a - e).abs() < 1e-9, "utterance {b}");
        }
    }
    assert_eq!(model.infer(&x).unwrap(), batched);
}

#[test]
fn parameter_names_are_hierarchical() {
    let model = Ecapa::<f32>::new(4, EcapaConfig::small(), 0).unwrap();
    let set = model.export();
    for name in [
        "stem.conv.weight",
        "block1.res2.0.bn.running_var",
        "block3.se.fc2.bias",
        "mfa.bn.gamma",
        "asp.tdnn.conv.weight",
        "asp.conv.weight",
        "fc.weight",
    ] {
        assert!(set.get(name).is_some(), "{name}");
    }
    assert_eq!(set.get("asp.tdnn.conv.weight").unwrap().shape(), &[8, 144, 1]);
}

#[test]
fn late_fusion_and_classifier() {
    let a = UtteranceEmbedding::new("u", Tensor::from_fn(&[192], |i| i as f64)).unwrap();
    let b = UtteranceEmbedding::new("u", Tensor::from_fn(&[192], |i| -(i as f64))).unwrap();
    let f = late_fuse(&a, &b).unwrap();
    assert_eq!(f.dim(), 384);
    let zero = UtteranceEmbedding::new("u", Tensor::zeros(&[192])).unwrap();
    assert_eq!(&late_fuse(&a, &zero).unwrap().vector.data()[..192], a.vector.data());
    let other = UtteranceEmbedding::new("v", Tensor::zeros(&[192])).unwrap();
    assert!(matches!(late_fuse(&a, &other), Err(Error::Data(_))));

    // classifier on the fused vector == separate halves summed, minus one bias
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = rand_tensor(&mut rng, &[4, 384]);
    let bias = rand_tensor(&mut rng, &[4]);
    let full = Linear::from_parts(w.clone(), bias.clone()).unwrap();
    let split = |lo: usize| {
        let rows: Vec<Vec<f64>> = (0..4).map(|r| w.row(r)[lo..lo + 192].to_vec()).collect();
        Linear::from_parts(Tensor::from_rows(&rows).unwrap(), bias.clone()).unwrap()
    };
    let joint = classify(&f, &full).unwrap();
    let la = classify(&a, &split(0)).unwrap();
    let lb = classify(&b, &split(192)).unwrap();
    for k in 0..4 {
        let sum = la.data()[k] + lb.data()[k] - bias.data()[k];
        assert!((joint.data()[k] - sum).abs() < 1e-9);
    }
}

#[test]
fn classify_examples() {
    let e = UtteranceEmbedding::new("u", Tensor::from_fn(&[3], |i| i as f32 + 0.5)).unwrap();
    let cls = Linear::from_parts(Tensor::zeros(&[4, 3]), Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    assert_eq!(argmax(classify(&e, &cls).unwrap().data()), 0);

    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = rand_tensor(&mut rng, &[4, 3]).cast::<f32>();
    let base = Linear::from_parts(w.clone(), Tensor::zeros(&[4])).unwrap();
    let doubled = Linear::from_parts(w.map(|v| 2.0 * v), Tensor::zeros(&[4])).unwrap();
    let logits = classify(&e, &base).unwrap();
    assert_eq!(argmax(logits.data()), argmax(classify(&e, &doubled).unwrap().data()));
    let p = crate::nn::ops::softmax(&logits, 0).unwrap();
    assert!((p.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);

    let wrong = UtteranceEmbedding::new("u", Tensor::zeros(&[5])).unwrap();
    assert!(matches!(classify(&wrong, &cls), Err(Error::Dimension(_))));
}

