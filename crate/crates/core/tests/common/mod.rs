#![allow(dead_code)]

pub mod oracles;

use dlf_core::{BaseNetConfig, HyperConfig, LearnedSlotSpec};
use rand::seq::SliceRandom;
use rand::Rng;

/// Random valid layout: optional resampling pair with an optional
/// residual range between them, random kernel, dilation and norms.
pub fn random_architecture(rng: &mut impl Rng) -> BaseNetConfig {
    let depth = rng.gen_range(2..=9);
    let mut cfg = BaseNetConfig::plain(depth, rng.gen_range(2..=5), *[1, 3, 5].choose(rng).unwrap());
    cfg.dilation = rng.gen_range(1..=3);
    cfg.input_channels = rng.gen_range(1..=4);
    cfg.output_channels = rng.gen_range(1..=3);
    if depth >= 3 && rng.gen_bool(0.6) {
        let d = rng.gen_range(1..depth);
        let u = rng.gen_range(d + 1..=depth);
        cfg.downsample_layer = Some(d);
        cfg.upsample_layer = Some(u);
        if u - d >= 3 && rng.gen_bool(0.7) {
            let a = d + 1;
            let pairs = (u - a) / 2;
            cfg.residual_layers = Some((a, a + 2 * rng.gen_range(1..=pairs) - 1));
        }
    }
    cfg.norm_after = (1..=depth).filter(|_| rng.gen_bool(0.5)).collect();
    cfg.conv_bias = rng.gen_bool(0.3);
    cfg.validate().expect("generated layout is valid");
    cfg
}

/// Random single-slot or all-slot hypernet configuration for `base`.
pub fn random_hyper(base: &BaseNetConfig, rng: &mut impl Rng) -> HyperConfig {
    let layer = rng.gen_range(1..=base.depth);
    let slots = match rng.gen_range(0..6) {
        0 => LearnedSlotSpec::AllConv,
        1 if !base.norm_after.is_empty() => LearnedSlotSpec::AllNorm,
        2 if !base.norm_after.is_empty() => LearnedSlotSpec::NormAt(*base.norm_after.choose(rng).unwrap()),
        3 => LearnedSlotSpec::ConvChannel1At(layer),
        4 => LearnedSlotSpec::ConvChannel2At(layer),
        _ => LearnedSlotSpec::ConvAt(layer),
    };
    HyperConfig::new(slots, rng.gen_range(1..=3))
}
