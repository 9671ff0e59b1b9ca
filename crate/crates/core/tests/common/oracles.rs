//! Independent reference implementations shared by the test targets.

use dlf_core::operators::wls::{LUMA_EPS, WEIGHT_EPS};
use dlf_core::Image;

pub fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Independent evaluation of `‖S − I‖² + λ·C(S)` with circular differences.
pub fn objective(s: &[Vec<f64>], i: &[Vec<f64>], h: usize, w: usize, lambda: f64) -> f64 {
    let mut data = 0.0;
    for c in 0..3 {
        for p in 0..h * w {
            data += (s[c][p] - i[c][p]) * (s[c][p] - i[c][p]);
        }
    }
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            let mut mag = 0.0;
            for ch in s {
                mag += (ch[y * w + (x + 1) % w] - ch[y * w + x]).abs();
                mag += (ch[((y + 1) % h) * w + x] - ch[y * w + x]).abs();
            }
            if mag > 1e-8 {
                count += 1;
            }
        }
    }
    data + lambda * count as f64
}

/// `(Id + λL) u` built from scratch: log-luminance weights on the four
/// neighbor edges, Neumann borders.
pub fn wls_apply(img: &Image, lambda: f64, alpha: f64, u: &[f64]) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let lum: Vec<f64> = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            let l = 0.2126 * img.get(0, y, x) as f64 + 0.7152 * img.get(1, y, x) as f64 + 0.0722 * img.get(2, y, x) as f64;
            (l + LUMA_EPS).ln()
        })
        .collect();
    let weight = |a: usize, b: usize| lambda / ((lum[a] - lum[b]).abs().powf(alpha) + WEIGHT_EPS);
    let mut out = u.to_vec();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut nbrs = Vec::new();
            if x > 0 {
                nbrs.push(p - 1);
            }
            if x + 1 < w {
                nbrs.push(p + 1);
            }
            if y > 0 {
                nbrs.push(p - w);
            }
            if y + 1 < h {
                nbrs.push(p + w);
            }
            for q in nbrs {
                out[p] += weight(p, q) * (u[p] - u[q]);
            }
        }
    }
    out
}

pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// One joint bilateral pass by direct summation: separable Gaussian
/// spatial taps, range kernel on the guide, replicated borders.
pub fn joint_bilateral(img: &Image, guide: &Image, sigma_s: f64, sigma_r: f64) -> Vec<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    let taps = gaussian_taps(sigma_s);
    let r = (taps.len() / 2) as isize;
    let mut out = vec![vec![0.0f64; h * w]; 3];
    for y in 0..h {
        for x in 0..w {
            let mut num = [0.0; 3];
            let mut den = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qy, qx) = (clamp(y as isize + dy, h), clamp(x as isize + dx, w));
                    let d2: f64 = (0..3).map(|c| (guide.get(c, y, x) as f64 - guide.get(c, qy, qx) as f64).powi(2)).sum();
                    let wt = taps[(dy + r) as usize] * taps[(dx + r) as usize] * (-d2 / (2.0 * sigma_r * sigma_r)).exp();
                    den += wt;
                    for c in 0..3 {
                        num[c] += wt * img.get(c, qy, qx) as f64;
                    }
                }
            }
            for c in 0..3 {
                out[c][y * w + x] = num[c] / den;
            }
        }
    }
    out
}
