//! Degradations for restoration operators: bicubic down/up sampling and
//! additive Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, param_err, Result};
use crate::image::Image;

/// Catmull-Rom cubic (a = −0.5).
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Taps `(source index, weight)` for each output sample when resizing an
/// axis of length `n_in` to `n_out`. Sample centers are aligned; when
/// shrinking, the kernel is widened by the scale factor (antialiasing).
/// Weights are normalized and borders are replicated.
pub fn resize_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_out as f64 / n_in as f64;
    let (stretch, support) = if scale < 1.0 { (scale, 2.0 / scale) } else { (1.0, 2.0) };
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| {
                    let wt = stretch * cubic(stretch * (center - j as f64));
                    (j.clamp(0, n_in as isize - 1) as usize, wt)
                })
                .filter(|&(_, wt)| wt != 0.0)
                .collect();
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= sum;
            }
            taps
        })
        .collect()
}

fn resize_plane(p: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let tx = resize_taps(w, ow);
    let ty = resize_taps(h, oh);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for (x, taps) in tx.iter().enumerate() {
            tmp[y * ow + x] = taps.iter().map(|&(j, wt)| wt * p[y * w + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (y, taps) in ty.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().map(|&(j, wt)| wt * tmp[j * ow + x]).sum();
        }
    }
    out
}

/// Bicubic resize to `height × width`. Intermediate values are not clamped;
/// only the final image is.
pub fn resize_bicubic(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(contract("resize to an empty image"));
    }
    let (h, w) = (img.height(), img.width());
    let planes: Vec<Vec<f64>> = img.planes_f64().iter().map(|p| resize_plane(p, h, w, height, width)).collect();
    Image::from_planes(height, width, &planes)
}

/// Bicubic downsampling by `scale` followed by bicubic upsampling back to
/// the original size, both in f64 without intermediate rounding.
pub fn degrade_sr(img: &Image, scale: usize) -> Result<Image> {
    if scale == 0 {
        return Err(param_err("scale", "must be positive"));
    }
    let (h, w) = (img.height(), img.width());
    if h % scale != 0 || w % scale != 0 {
        return Err(contract(format!("{h}x{w} is not divisible by scale {scale}")));
    }
    let (lh, lw) = (h / scale, w / scale);
    let planes: Vec<Vec<f64>> = img
        .planes_f64()
        .iter()
        .map(|p| {
            let low = resize_plane(p, h, w, lh, lw);
            resize_plane(&low, lh, lw, h, w)
        })
        .collect();
    Image::from_planes(h, w, &planes)
}

/// `n` i.i.d. samples of `N(0, (sigma/255)²)` from a seeded ChaCha8 stream.
pub fn noise_field(n: usize, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(param_err("sigma", format!("must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let dist = Normal::new(0.0, sigma / 255.0).map_err(|e| param_err("sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

/// `I + N(0, (sigma/255)²)` per element, clamped to [0, 1].
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    let noise = noise_field(img.data().len(), sigma, seed)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let data = img.data().iter().zip(&noise).map(|(&v, n)| (v as f64 + n) as f32).collect();
    Image::new(img.height(), img.width(), data)
}
