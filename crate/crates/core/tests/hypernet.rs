use dlf_core::basenet::{forward_assembled, Stage};
use dlf_core::hypernet::{fingerprint, multipath_expand};
use dlf_core::{BaseNetConfig, Error, HyperConfig, LearnedSlotSpec, WeightLearningNet, WeightSet};
use dlf_tensor::{kernels::conv2d, Conv2dParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gamma(r: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| r.gen_range(0.0..1.0)).collect()
}

fn flat(w: &WeightSet<f64>) -> Vec<f64> {
    let mut v = Vec::new();
    for (i, k) in w.conv.iter().enumerate() {
        v.extend_from_slice(k.data());
        if let Some(n) = &w.norm[i] {
            v.extend_from_slice(n.scale.data());
            v.extend_from_slice(n.shift.data());
        }
    }
    v
}

fn single_kernel_net(m: usize, r: &mut ChaCha8Rng) -> WeightLearningNet<f64> {
    let mut base = BaseNetConfig::plain(1, 1, 3);
    base.input_channels = 1;
    base.output_channels = 1;
    WeightLearningNet::new(base, HyperConfig::new(LearnedSlotSpec::ConvAt(1), m), r).unwrap()
}

#[test]
fn zero_gamma_yields_bias() {
    let mut r = rng(1);
    let net = WeightLearningNet::<f64>::new(BaseNetConfig::tiny(), HyperConfig::new(LearnedSlotSpec::AllConv, 2), &mut r).unwrap();
    let w = net.predict_weights(&[0.0, 0.0]).unwrap();
    for h in net.heads() {
        let l = h.slot.layer();
        assert_eq!(w.conv[l - 1].data(), h.layers[0].bias.data());
    }
}

#[test]
fn predicted_weights_are_affine_in_gamma() {
    let mut r = rng(2);
    let net = WeightLearningNet::<f64>::new(BaseNetConfig::tiny(), HyperConfig::new(LearnedSlotSpec::AllConv, 3), &mut r).unwrap();
    let (ga, gb) = (gamma(&mut r, 3), gamma(&mut r, 3));
    let sum: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a + b).collect();
    let a = flat(&net.predict_weights(&ga).unwrap());
    let b = flat(&net.predict_weights(&gb).unwrap());
    let z = flat(&net.predict_weights(&[0.0; 3]).unwrap());
    let s = flat(&net.predict_weights(&sum).unwrap());
    for i in 0..s.len() {
        let lhs = a[i] + b[i] - z[i];
        assert!((lhs - s[i]).abs() <= 1e-12 * (1.0 + s[i].abs()), "element {i}");
    }
}

#[test]
fn single_slot_matches_hand_matrix_vector_product() {
    let mut r = rng(3);
    let mut net = single_kernel_net(2, &mut r);
    let a: Vec<f64> = (0..18).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..9).map(|_| r.gen_range(-1.0..1.0)).collect();
    {
        let mut p = net.parameters_mut();
        *p[0] = Tensor::new([9, 2], a.clone()).unwrap();
        *p[1] = Tensor::new([9], b.clone()).unwrap();
    }
    let g = [0.3, -1.7];
    let w = net.predict_weights(&g).unwrap();
    assert_eq!(w.conv[0].shape(), &[1, 1, 3, 3]);
    for i in 0..9 {
        let want = a[2 * i] * g[0] + a[2 * i + 1] * g[1] + b[i];
        assert!((w.conv[0].data()[i] - want).abs() < 1e-15);
    }
}

#[test]
fn gamma_length_is_checked() {
    let mut r = rng(4);
    let net = single_kernel_net(2, &mut r);
    assert!(matches!(net.predict_weights(&[0.1]), Err(Error::Dimension(_))));
}

#[test]
fn cheap_mode_predicts_last_norm_only() {
    let mut r = rng(5);
    let base = BaseNetConfig::default();
    let hyper = HyperConfig::new(LearnedSlotSpec::NormAt(19), 2);
    let slots = hyper.validate(&base).unwrap();
    assert_eq!(slots.iter().map(|s| s.len).sum::<usize>(), 128);
    let net = WeightLearningNet::<f32>::new(base, hyper, &mut r).unwrap();
    let (scale, shift) = net.predict_cheap(&[0.0, 0.0]).unwrap();
    let b = net.heads()[0].layers[0].bias.data();
    assert_eq!(scale.data(), &b[..64]);
    assert_eq!(shift.data(), &b[64..]);

    let wa = net.predict_weights(&[0.2, 0.9]).unwrap();
    let wb = net.predict_weights(&[0.7, 0.1]).unwrap();
    for i in 0..20 {
        assert_eq!(wa.conv[i], wb.conv[i], "conv {}", i + 1);
        if i != 18 {
            assert_eq!(wa.norm[i], wb.norm[i], "norm {}", i + 1);
        }
    }
    assert_ne!(wa.norm[18], wb.norm[18]);
}

#[test]
fn cheap_prediction_needs_norm_slot() {
    let mut r = rng(6);
    let net = single_kernel_net(1, &mut r);
    assert!(matches!(net.predict_cheap(&[0.5]), Err(Error::Contract(_))));
}

#[test]
fn slot_partition_keeps_shared_weights_fixed() {
    let mut r = rng(7);
    for spec in [
        LearnedSlotSpec::ConvAt(4),
        LearnedSlotSpec::ConvChannel1At(2),
        LearnedSlotSpec::ConvChannel2At(6),
        LearnedSlotSpec::AllNorm,
    ] {
        let net = WeightLearningNet::<f64>::new(BaseNetConfig::tiny(), HyperConfig::new(spec, 1), &mut r).unwrap();
        let predicted: usize = net.heads().iter().map(|h| h.slot.len).sum();
        let a = flat(&net.predict_weights(&[0.1]).unwrap());
        let b = flat(&net.predict_weights(&[0.9]).unwrap());
        let changed = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert!(changed > 0 && changed <= predicted, "{spec:?}: {changed} of {predicted}");
    }
}

#[test]
fn cached_forward_is_bitwise_equal_to_full_forward() {
    let mut r = rng(8);
    let net = WeightLearningNet::<f32>::new(BaseNetConfig::default(), HyperConfig::new(LearnedSlotSpec::NormAt(19), 2), &mut r).unwrap();
    let input = Tensor::from_fn([1, 4, 32, 32], |_| r.gen_range(0.0f32..1.0));
    let cache = net.build_cache(&input).unwrap();
    assert_eq!(cache.start(), Stage::Norm(19));
    for _ in 0..10 {
        let g = [r.gen_range(0.0f32..1.0), r.gen_range(0.0f32..1.0)];
        let full = net.forward(&g, &input).unwrap();
        let cached = net.cached_forward(&cache, &g, fingerprint(&input)).unwrap();
        assert_eq!(cached.layers_recomputed, 2);
        assert_eq!(full.data(), cached.output.data());
    }
}

#[test]
fn cached_forward_handles_residual_and_kernel_slots() {
    let mut r = rng(9);
    for spec in [LearnedSlotSpec::ConvAt(5), LearnedSlotSpec::NormAt(4), LearnedSlotSpec::ConvChannel2At(7)] {
        let net = WeightLearningNet::<f32>::new(BaseNetConfig::tiny(), HyperConfig::new(spec, 1), &mut r).unwrap();
        let input = Tensor::from_fn([1, 4, 16, 16], |_| r.gen_range(0.0f32..1.0));
        let cache = net.build_cache(&input).unwrap();
        let g = [0.37f32];
        let full = net.forward(&g, &input).unwrap();
        let cached = net.cached_forward(&cache, &g, fingerprint(&input)).unwrap();
        assert_eq!(full.data(), cached.output.data(), "{spec:?}");
    }
}

#[test]
fn full_forward_matches_base_network_with_predicted_weights() {
    let mut r = rng(10);
    let net = WeightLearningNet::<f64>::new(BaseNetConfig::tiny(), HyperConfig::new(LearnedSlotSpec::AllConv, 2), &mut r).unwrap();
    let input = Tensor::from_fn([1, 4, 8, 8], |_| r.gen_range(0.0..1.0));
    let g = [0.4, 0.6];
    let w = net.predict_weights(&g).unwrap();
    assert_eq!(net.forward(&g, &input).unwrap(), forward_assembled(net.base(), &w, &input).unwrap());
}

#[test]
fn stale_caches_are_rejected() {
    let mut r = rng(11);
    let mut net = WeightLearningNet::<f32>::new(BaseNetConfig::tiny(), HyperConfig::new(LearnedSlotSpec::NormAt(7), 1), &mut r).unwrap();
    let input = Tensor::from_fn([1, 4, 8, 8], |_| r.gen_range(0.0f32..1.0));
    let other = Tensor::from_fn([1, 4, 8, 8], |_| r.gen_range(0.0f32..1.0));
    let cache = net.build_cache(&input).unwrap();
    assert!(matches!(net.cached_forward(&cache, &[0.5], fingerprint(&other)), Err(Error::CacheInvalid(_))));
    let copy = net.clone();
    assert!(matches!(copy.cached_forward(&cache, &[0.5], fingerprint(&input)), Err(Error::CacheInvalid(_))));
    net.parameters_mut()[0].data_mut()[0] += 1.0;
    assert!(matches!(net.cached_forward(&cache, &[0.5], fingerprint(&input)), Err(Error::CacheInvalid(_))));
}

#[test]
fn multipath_hand_example() {
    let mut base = BaseNetConfig::plain(1, 1, 1);
    base.input_channels = 1;
    base.output_channels = 1;
    let layer = base.layer(1);
    let a = Tensor::new([1, 1, 1, 1], vec![3.0f64]).unwrap();
    let b = Tensor::new([1, 1, 1, 1], vec![1.0f64]).unwrap();
    let x = Tensor::new([1, 1, 1, 1], vec![1.0f64]).unwrap();
    let y = multipath_expand(&layer, &[a], &b, &[2.0], &x).unwrap();
    assert_eq!(y.data(), &[7.0]);
}

#[test]
fn multipath_at_zero_gamma_is_offset_convolution() {
    let mut r = rng(12);
    let net = WeightLearningNet::<f32>::new(BaseNetConfig::tiny(), HyperConfig::new(LearnedSlotSpec::ConvAt(2), 3), &mut r).unwrap();
    let layer = net.base().layer(2);
    let (bases, offset) = net.kernel_bases(0, &[0.0; 3]).unwrap();
    let x = Tensor::from_fn([1, 16, 6, 6], |_| r.gen_range(-1.0f32..1.0));
    let y = multipath_expand(&layer, &bases, &offset, &[0.0; 3], &x).unwrap();
    assert_eq!(y, conv2d(&x, &offset, Conv2dParams::same(3, 1)).unwrap());
}

#[test]
fn slot_specs_round_trip_through_json() {
    for spec in [LearnedSlotSpec::AllConv, LearnedSlotSpec::NormAt(19), LearnedSlotSpec::ConvChannel1At(3)] {
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<LearnedSlotSpec>(&s).unwrap(), spec);
    }
    assert_eq!(serde_json::to_string(&LearnedSlotSpec::NormAt(19)).unwrap(), r#"{"mode":"norm_at","layer":19}"#);
}

#[test]
fn oversized_deep_heads_are_rejected() {
    let hyper = HyperConfig {
        depth: 2,
        ..HyperConfig::new(LearnedSlotSpec::AllConv, 2)
    };
    assert!(matches!(hyper.validate(&BaseNetConfig::default()), Err(Error::Config(_))));
    let narrow = HyperConfig { hidden: Some(16), ..hyper };
    assert!(narrow.validate(&BaseNetConfig::default()).is_ok());
}

#[test]
fn deep_identity_heads_start_equal_to_affine_heads() {
    let mut r = rng(13);
    let hyper = HyperConfig {
        depth: 2,
        relu: false,
        ..HyperConfig::new(LearnedSlotSpec::ConvAt(2), 2)
    };
    let net = WeightLearningNet::<f64>::new(BaseNetConfig::tiny(), hyper, &mut r).unwrap();
    let h = &net.heads()[0];
    let g = [0.25, 0.5];
    let w = net.predict_weights(&g).unwrap();
    let d = &h.layers[0];
    let n = h.slot.len;
    for i in 0..n {
        let want = d.weight.data()[2 * i] * g[0] + d.weight.data()[2 * i + 1] * g[1] + d.bias.data()[i];
        assert!((w.conv[1].data()[i] - want).abs() < 1e-12);
    }
}
