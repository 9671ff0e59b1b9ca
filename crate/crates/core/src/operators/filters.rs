//! Local filters: edge map, Gaussian blur, joint bilateral and rolling
//! guidance.

use dlf_tensor::Tensor;

use crate::error::{param_err, Result};
use crate::image::Image;

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Mean absolute difference to the four neighbors, summed over channels,
/// with replicated borders. Returns `[1, H, W]`.
pub fn edge_map(img: &Image) -> Tensor<f32> {
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0f32; h * w];
    for c in 0..3 {
        let p = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let v = p[y * w + x] as f64;
                let at = |yy: isize, xx: isize| p[clamp_index(yy, h) * w + clamp_index(xx, w)] as f64;
                let (yi, xi) = (y as isize, x as isize);
                let s = (v - at(yi, xi - 1)).abs()
                    + (v - at(yi, xi + 1)).abs()
                    + (v - at(yi - 1, xi)).abs()
                    + (v - at(yi + 1, xi)).abs();
                out[y * w + x] += (s / 4.0) as f32;
            }
        }
    }
    Tensor::new([1, h, w], out).expect("edge map shape")
}

/// Normalized 1-D Gaussian taps on `-r..=r` with `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn check_sigma(name: &str, sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(param_err(name, format!("must be positive and finite, got {sigma}")))
    }
}

/// Separable Gaussian filtering of one plane with replicated borders.
pub(crate) fn blur_plane(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * p[y * w + clamp_index(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[clamp_index(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    check_sigma("sigma", sigma)?;
    let taps = gaussian_kernel(sigma);
    let (h, w) = (img.height(), img.width());
    let planes: Vec<Vec<f64>> = img.planes_f64().iter().map(|p| blur_plane(p, h, w, &taps)).collect();
    Image::from_planes(h, w, &planes)
}

/// Bilateral filter of `input` whose range weights come from `guide`:
/// spatial weight `g(dx)·g(dy)` over the `ceil(3σs)` window, range weight
/// `exp(-‖J(p) - J(q)‖² / 2σr²)` on the RGB distance in the guide.
/// `sigma_r = ∞` gives plain Gaussian blur.
pub fn joint_bilateral(input: &Image, guide: &Image, sigma_s: f64, sigma_r: f64) -> Result<Image> {
    check_sigma("sigma_s", sigma_s)?;
    if !(sigma_r > 0.0) {
        return Err(param_err("sigma_r", format!("must be positive, got {sigma_r}")));
    }
    let (h, w) = (input.height(), input.width());
    if (guide.height(), guide.width()) != (h, w) {
        return Err(crate::error::contract("guide and input sizes differ"));
    }
    let taps = gaussian_kernel(sigma_s);
    let r = (taps.len() / 2) as isize;
    let inp = input.planes_f64();
    let gd = guide.planes_f64();
    let inv = if sigma_r.is_finite() { 1.0 / (2.0 * sigma_r * sigma_r) } else { 0.0 };
    let mut out = vec![vec![0.0; h * w]; 3];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut acc = [0.0f64; 3];
            let mut norm = 0.0;
            for (ky, ty) in taps.iter().enumerate() {
                let yy = clamp_index(y as isize + ky as isize - r, h);
                for (kx, tx) in taps.iter().enumerate() {
                    let q = yy * w + clamp_index(x as isize + kx as isize - r, w);
                    let d2: f64 = (0..3).map(|c| (gd[c][p] - gd[c][q]).powi(2)).sum();
                    let wt = ty * tx * (-d2 * inv).exp();
                    norm += wt;
                    for c in 0..3 {
                        acc[c] += wt * inp[c][q];
                    }
                }
            }
            for c in 0..3 {
                out[c][p] = acc[c] / norm;
            }
        }
    }
    Image::from_planes(h, w, &out)
}

/// Rolling guidance: `J0 = Gaussian(I)`, then `iters` joint bilateral
/// passes of `I` guided by the previous result.
pub fn rgf_smooth(img: &Image, sigma_s: f64, sigma_r: f64, iters: usize) -> Result<Image> {
    let mut j = gaussian_blur(img, sigma_s)?;
    for _ in 0..iters {
        j = joint_bilateral(img, &j, sigma_s, sigma_r)?;
    }
    Ok(j)
}
