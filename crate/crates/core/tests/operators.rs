mod common;

use common::oracles;
use dlf_core::operators::filters::gaussian_kernel;
use dlf_core::operators::l0::{l0_objective, l0_smooth_trace};
use dlf_core::operators::{
    add_gaussian_noise, degrade_sr, edge_map, gaussian_blur, joint_bilateral, l0_smooth, noise_field, normalize_gamma,
    rgf_smooth, sample_parameter, wls_smooth, wls_solve, GammaCodec, OperatorKind, OperatorSpec, RGF_SIGMA_R,
};
use dlf_core::{Error, Image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _, _| r.gen_range(0.0..1.0)).unwrap()
}

fn max_diff(a: &Image, b: &Image) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn edge_map_of_constant_image_is_zero() {
    let img = Image::constant(5, 7, [0.2, 0.5, 0.9]).unwrap();
    assert!(edge_map(&img).data().iter().all(|&v| v == 0.0));
}

#[test]
fn edge_map_hand_example() {
    let row = [0.0, 1.0, 0.0];
    let img = Image::from_fn(1, 3, |_, _, x| row[x]).unwrap();
    let e = edge_map(&img);
    assert_eq!(e.shape(), &[1, 1, 3]);
    assert_eq!(e.data()[1], 1.5);
}

#[test]
fn edge_map_is_zero_only_where_neighbors_agree() {
    let img = random_image(6, 6, 1).quantize8();
    let e = edge_map(&img);
    for y in 0..6 {
        for x in 0..6 {
            let flat = (0..3).all(|c| {
                let v = img.get(c, y, x);
                [(0, -1), (0, 1), (-1, 0), (1, 0)]
                    .iter()
                    .all(|&(dy, dx)| img.get(c, oracles::clamp(y as isize + dy, 6), oracles::clamp(x as isize + dx, 6)) == v)
            });
            let v = e.data()[y * 6 + x];
            assert!(v >= 0.0);
            assert_eq!(v == 0.0, flat);
        }
    }
}

#[test]
fn smoothers_preserve_constant_images() {
    let img = Image::constant(16, 16, [0.3, 0.6, 0.1]).unwrap();
    for lambda in [0.002, 0.2] {
        assert!(max_diff(&l0_smooth(&img, lambda).unwrap(), &img) < 1e-6);
    }
    for lambda in [0.1, 10.0] {
        assert!(max_diff(&wls_smooth(&img, lambda, 1.2).unwrap(), &img) < 1e-6);
    }
    assert!(max_diff(&rgf_smooth(&img, 3.0, 0.1, 4).unwrap(), &img) < 1e-6);
    assert_eq!(gaussian_blur(&img, 1.3).unwrap(), img);
}

#[test]
fn l0_with_tiny_lambda_is_near_identity() {
    let img = random_image(24, 24, 2);
    assert!(max_diff(&l0_smooth(&img, 1e-6).unwrap(), &img) < 1e-3);
}

#[test]
fn l0_rejects_non_positive_lambda() {
    let img = random_image(8, 8, 3);
    assert!(matches!(l0_smooth(&img, 0.0), Err(Error::Parameter { .. })));
    assert!(matches!(l0_smooth(&img, -1.0), Err(Error::Parameter { .. })));
}

#[test]
fn l0_objective_is_non_increasing() {
    for seed in 0..5 {
        let img = random_image(32, 32, 10 + seed);
        let orig = img.planes_f64();
        for lambda in [0.002, 0.02, 0.2] {
            let t = l0_smooth_trace(&img, lambda).unwrap();
            assert!(!t.iterates.is_empty());
            let mut prev = oracles::objective(&orig, &orig, 32, 32, lambda);
            for (k, s) in t.iterates.iter().enumerate() {
                let f = oracles::objective(s, &orig, 32, 32, lambda);
                assert!((f - l0_objective(s, &orig, 32, 32, lambda)).abs() <= 1e-9 * f.max(1.0));
                assert!(f <= prev + 1e-9 * prev.max(1.0), "seed {seed} λ {lambda} iteration {k}: {f} > {prev}");
                prev = f;
            }
        }
    }
}

#[test]
fn wls_residual_is_below_tolerance() {
    for (seed, lambda) in [(20, 0.1), (21, 1.0), (22, 10.0)] {
        let img = random_image(32, 32, seed);
        let sol = wls_solve(&img, lambda, 1.2).unwrap();
        for (c, (u, g)) in sol.planes.iter().zip(img.planes_f64()).enumerate() {
            let au = oracles::wls_apply(&img, lambda, 1.2, u);
            let r: f64 = au.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let n: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(r / n <= 1e-6, "λ {lambda} channel {c}: {}", r / n);
        }
    }
}

#[test]
fn wls_with_zero_lambda_is_identity() {
    let img = random_image(9, 11, 23);
    assert_eq!(wls_smooth(&img, 0.0, 1.2).unwrap(), img);
}

#[test]
fn rgf_first_iteration_matches_nested_loop_oracle() {
    let img = random_image(8, 8, 30);
    let (sigma_s, sigma_r) = (2.0, 0.1);
    let guide = gaussian_blur(&img, sigma_s).unwrap();
    let want = oracles::joint_bilateral(&img, &guide, sigma_s, sigma_r);
    let got = rgf_smooth(&img, sigma_s, sigma_r, 1).unwrap();
    for c in 0..3 {
        for p in 0..64 {
            assert!((got.plane(c)[p] as f64 - want[c][p]).abs() <= 1e-6);
        }
    }
}

#[test]
fn rgf_with_infinite_range_is_gaussian_blur() {
    let img = random_image(12, 12, 31);
    let a = rgf_smooth(&img, 2.0, f64::INFINITY, 1).unwrap();
    let b = gaussian_blur(&img, 2.0).unwrap();
    assert!(max_diff(&a, &b) <= 1e-4);
}

#[test]
fn rgf_rejects_bad_sigmas() {
    let img = random_image(4, 4, 32);
    assert!(matches!(rgf_smooth(&img, 0.0, 0.1, 4), Err(Error::Parameter { .. })));
    assert!(matches!(rgf_smooth(&img, 1.0, -0.1, 4), Err(Error::Parameter { .. })));
}

#[test]
fn gaussian_kernel_is_normalized() {
    for s in [0.3, 1.0, 2.7] {
        let k = gaussian_kernel(s);
        assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn narrow_gaussian_is_near_identity() {
    let img = random_image(10, 10, 33);
    assert!(max_diff(&gaussian_blur(&img, 0.01).unwrap(), &img) <= 1e-4);
}

#[test]
fn separable_blur_matches_direct_2d_sum() {
    let img = random_image(9, 13, 34);
    let sigma = 1.3;
    let taps = oracles::gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let got = gaussian_blur(&img, sigma).unwrap();
    for c in 0..3 {
        for y in 0..9 {
            for x in 0..13 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        acc += taps[(dy + r) as usize]
                            * taps[(dx + r) as usize]
                            * img.get(c, oracles::clamp(y as isize + dy, 9), oracles::clamp(x as isize + dx, 13)) as f64;
                    }
                }
                assert!((got.get(c, y, x) as f64 - acc).abs() <= 1e-7);
            }
        }
    }
}

#[test]
fn joint_bilateral_with_self_guide_preserves_constants() {
    let img = Image::constant(6, 6, [0.4, 0.4, 0.4]).unwrap();
    assert!(max_diff(&joint_bilateral(&img, &img, 1.0, 0.1).unwrap(), &img) < 1e-6);
}

#[test]
fn sr_degradation_preserves_constants_and_size() {
    let img = Image::constant(12, 12, [0.25, 0.5, 0.75]).unwrap();
    for s in [2, 3, 4] {
        let d = degrade_sr(&img, s).unwrap();
        assert_eq!((d.height(), d.width()), (12, 12));
        assert!(max_diff(&d, &img) < 1e-6);
    }
}

#[test]
fn sr_rejects_indivisible_sizes() {
    let img = random_image(10, 10, 35);
    assert!(matches!(degrade_sr(&img, 3), Err(Error::Contract(_))));
}

/// Catmull-Rom cubic written out for the hand example.
fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

#[test]
fn sr_scale_two_on_ramp_matches_hand_weights() {
    // Horizontal ramp 0, 1/3, 2/3, 1: every row is the same, so the
    // vertical passes leave it untouched and only the 1-D weights matter.
    let ramp = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let img = Image::from_fn(4, 4, |_, _, x| ramp[x] as f32).unwrap();
    let at = |i: isize, v: &[f64]| v[i.clamp(0, v.len() as isize - 1) as usize];
    let src: Vec<f64> = ramp.iter().map(|&v| v as f32 as f64).collect();

    // 4 → 2: the kernel is stretched by 2, sample centers at 0.5 and 2.5.
    let down: Vec<f64> = [0.5, 2.5]
        .iter()
        .map(|&c: &f64| {
            let js = (c - 4.0).floor() as isize..=(c + 4.0).ceil() as isize;
            let ws: Vec<(isize, f64)> = js.map(|j| (j, 0.5 * catmull_rom(0.5 * (c - j as f64)))).collect();
            let norm: f64 = ws.iter().map(|w| w.1).sum();
            ws.iter().map(|&(j, w)| w * at(j, &src)).sum::<f64>() / norm
        })
        .collect();
    // 2 → 4: sample centers at (i + 0.5) / 2 − 0.5.
    let up: Vec<f64> = (0..4)
        .map(|i| {
            let c = (i as f64 + 0.5) / 2.0 - 0.5;
            let js = (c - 2.0).floor() as isize..=(c + 2.0).ceil() as isize;
            let ws: Vec<(isize, f64)> = js.map(|j| (j, catmull_rom(c - j as f64))).collect();
            let norm: f64 = ws.iter().map(|w| w.1).sum();
            ws.iter().map(|&(j, w)| w * at(j, &down)).sum::<f64>() / norm
        })
        .collect();
    let got = degrade_sr(&img, 2).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            let want = up[x].clamp(0.0, 1.0) as f32;
            assert!((got.get(0, y, x) - want).abs() <= 1e-6, "({y}, {x}): {} vs {want}", got.get(0, y, x));
        }
    }
}

#[test]
fn zero_noise_is_identity() {
    let img = random_image(5, 5, 36);
    assert_eq!(add_gaussian_noise(&img, 0.0, 7).unwrap(), img);
}

#[test]
fn noise_is_seed_deterministic() {
    let img = random_image(8, 8, 37);
    assert_eq!(add_gaussian_noise(&img, 25.0, 9).unwrap(), add_gaussian_noise(&img, 25.0, 9).unwrap());
    assert_ne!(add_gaussian_noise(&img, 25.0, 9).unwrap(), add_gaussian_noise(&img, 25.0, 10).unwrap());
}

#[test]
fn negative_noise_is_rejected() {
    let img = random_image(4, 4, 38);
    assert!(matches!(add_gaussian_noise(&img, -1.0, 0), Err(Error::Parameter { .. })));
}

#[test]
fn noise_standard_deviation_matches() {
    let n = 3 * 200 * 200;
    let field = noise_field(n, 25.0, 123).unwrap();
    let img = Image::constant(200, 200, [0.5; 3]).unwrap();
    let noisy = add_gaussian_noise(&img, 25.0, 123).unwrap();
    let mean = field.iter().sum::<f64>() / n as f64;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!((std / (25.0 / 255.0) - 1.0).abs() < 0.05, "std {std}");
    // mid-gray with σ = 25 almost never clamps, so the image agrees with the field
    for (i, (&v, &e)) in noisy.data().iter().zip(&field).enumerate().take(1000) {
        let want = (0.5 + e).clamp(0.0, 1.0) as f32;
        assert_eq!(v, want, "sample {i}");
    }
}

#[test]
fn normalization_examples() {
    let l0 = OperatorSpec::lookup("l0").unwrap();
    assert_eq!(normalize_gamma(&l0, &[0.002]).unwrap().values(), &[0.0]);
    assert!((normalize_gamma(&l0, &[0.2]).unwrap().values()[0] - 1.0).abs() < 1e-15);
    assert!((normalize_gamma(&l0, &[0.02]).unwrap().values()[0] - 0.5).abs() < 1e-12);
    let rgf = OperatorSpec::lookup("rgf").unwrap();
    assert!((normalize_gamma(&rgf, &[3.25]).unwrap().values()[0] - 0.25).abs() < 1e-15);
    assert!(matches!(normalize_gamma(&rgf, &[0.5]), Err(Error::Parameter { .. })));
    assert!(matches!(normalize_gamma(&rgf, &[11.0]), Err(Error::Parameter { .. })));
}

#[test]
fn log_sampling_splits_at_geometric_midpoint() {
    let l0 = OperatorSpec::lookup("l0").unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(40);
    let draws: Vec<f64> = (0..10_000).map(|_| sample_parameter(&l0, &mut r)[0]).collect();
    assert!(draws.iter().all(|&v| (0.002..=0.2).contains(&v)));
    let below = draws.iter().filter(|&&v| v < 0.02).count() as f64 / 1e4;
    assert!((below - 0.5).abs() <= 0.02, "{below}");
    let mut r2 = ChaCha8Rng::seed_from_u64(40);
    let again: Vec<f64> = (0..100).map(|_| sample_parameter(&l0, &mut r2)[0]).collect();
    assert_eq!(&draws[..100], &again[..]);
}

#[test]
fn registry_ids_are_distinct_and_in_range() {
    let reg = dlf_core::operators::registry();
    let codec = GammaCodec::new(reg.clone()).unwrap();
    assert!(codec.joint);
    assert_eq!(codec.dim(), 2);
    for s in &reg {
        assert!(s.operator_id > 0.0 && s.operator_id <= 1.0);
    }
    let g = codec.encode("rgf", &[3.25]).unwrap();
    assert_eq!(g.values()[0], 0.3);
    assert!((g.values()[1] - 0.25).abs() < 1e-15);
    let single = GammaCodec::new(vec![OperatorSpec::builtin(OperatorKind::Gaussian)]).unwrap();
    assert_eq!(single.dim(), 1);
    assert!(matches!(GammaCodec::new(vec![reg[0].clone(), reg[0].clone()]), Err(Error::Config(_))));
}

#[test]
fn unknown_operator_is_reported() {
    assert!(matches!(OperatorSpec::lookup("wmf"), Err(Error::UnknownOperator(_))));
}

#[test]
fn rgf_default_range_kernel() {
    assert_eq!(RGF_SIGMA_R, 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn oracle_outputs_stay_in_unit_range(seed in 0u64..1000, which in 0usize..6) {
        let img = random_image(12, 24, seed);
        let spec = &dlf_core::operators::registry()[which];
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let raw = sample_parameter(spec, &mut r);
        let out = spec.apply(&img, &raw, seed).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sampled_parameters_lie_in_range(seed in 0u64..10_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for spec in dlf_core::operators::registry() {
            let raw = sample_parameter(&spec, &mut r);
            prop_assert!(spec.check_raw(&raw).is_ok());
            let g = normalize_gamma(&spec, &raw).unwrap();
            prop_assert!(g.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
