//! Training images: procedural generation and folder loading.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::image::Image;
use crate::operators::filters::{blur_plane, gaussian_kernel};

/// Synthetic scene: a smooth color gradient overlaid with flat shapes,
/// optional checkerboard texture and low-pass noise.
pub fn procedural_image(height: usize, width: usize, rng: &mut impl Rng) -> Result<Image> {
    let n = height * width;
    let mut planes: Vec<Vec<f64>> = vec![vec![0.0; n]; 3];
    let c0: [f64; 3] = rng.gen();
    let gx: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
    let gy: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
    for (c, p) in planes.iter_mut().enumerate() {
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
                p[y * width + x] = c0[c] + gx[c] * (u - 0.5) + gy[c] * (v - 0.5);
            }
        }
    }
    for _ in 0..rng.gen_range(2..7) {
        let color: [f64; 3] = rng.gen();
        let cy = rng.gen_range(0.0..height as f64);
        let cx = rng.gen_range(0.0..width as f64);
        let ry = rng.gen_range(0.1..0.4) * height as f64;
        let rx = rng.gen_range(0.1..0.4) * width as f64;
        let disc = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        planes[c][y * width + x] = color[c];
                    }
                }
            }
        }
    }
    if rng.gen_bool(0.4) {
        let cell = rng.gen_range(2..9);
        let amp = rng.gen_range(0.03..0.15);
        for p in planes.iter_mut() {
            for y in 0..height {
                for x in 0..width {
                    let s = if (y / cell + x / cell) % 2 == 0 { amp } else { -amp };
                    p[y * width + x] += s;
                }
            }
        }
    }
    let sigma = rng.gen_range(0.5..2.0);
    let amp = rng.gen_range(0.02..0.12);
    let taps = gaussian_kernel(sigma);
    for p in planes.iter_mut() {
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let smooth = blur_plane(&noise, height, width, &taps);
        for (v, s) in p.iter_mut().zip(smooth) {
            *v += amp * s * 2.0;
        }
    }
    Image::from_planes(height, width, &planes)
}

pub fn procedural_corpus(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| procedural_image(height, width, &mut rng)).collect()
}

/// Loads every PNG in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Image>> {
    let io = |source| Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(contract(format!("no PNG images in {}", dir.display())));
    }
    paths.iter().map(|p| Image::load(p)).collect()
}
