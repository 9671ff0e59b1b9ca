//! L0 gradient minimization by half-quadratic splitting.
//!
//! Differences are circular. Each outer iteration thresholds the auxiliary
//! gradients, solves the quadratic subproblem in the Fourier domain and
//! raises β by κ. Plain splitting does not decrease the true objective
//! `‖S − I‖² + λ·C(S)` monotonically, so every iteration also forms the
//! piecewise-constant candidate given by the region means of `I` over the
//! zero pattern of the auxiliary gradients, and the returned iterate is the
//! best candidate seen so far.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{param_err, Result};
use crate::image::Image;

pub const BETA_MAX: f64 = 1e5;
pub const KAPPA: f64 = 2.0;
/// Gradient magnitudes at or below this count as zero in the objective.
pub const GRADIENT_FLOOR: f64 = 1e-8;

/// Accepted iterates, one per outer iteration, as f64 planes.
#[derive(Clone, Debug)]
pub struct L0Trace {
    pub height: usize,
    pub width: usize,
    pub iterates: Vec<Vec<Vec<f64>>>,
}

pub fn l0_smooth(img: &Image, lambda: f64) -> Result<Image> {
    let t = l0_smooth_trace(img, lambda)?;
    let last = t.iterates.last().cloned().unwrap_or_else(|| img.planes_f64());
    Image::from_planes(t.height, t.width, &last)
}

/// `Σ (S − I)² + λ · #{p : Σ_c |∂x S| + |∂y S| > floor}`.
pub fn l0_objective(s: &[Vec<f64>], i: &[Vec<f64>], h: usize, w: usize, lambda: f64) -> f64 {
    let data: f64 = s.iter().zip(i).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2))).sum();
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (r, d) = (y * w + (x + 1) % w, ((y + 1) % h) * w + x);
            let mag: f64 = s.iter().map(|c| (c[r] - c[p]).abs() + (c[d] - c[p]).abs()).sum();
            if mag > GRADIENT_FLOOR {
                count += 1;
            }
        }
    }
    data + lambda * count as f64
}

struct Fft2 {
    h: usize,
    w: usize,
    row_f: Arc<dyn Fft<f64>>,
    row_i: Arc<dyn Fft<f64>>,
    col_f: Arc<dyn Fft<f64>>,
    col_i: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            h,
            w,
            row_f: p.plan_fft_forward(w),
            row_i: p.plan_fft_inverse(w),
            col_f: p.plan_fft_forward(h),
            col_i: p.plan_fft_inverse(h),
        }
    }

    fn run(&self, data: &mut [Complex<f64>], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (row, col) = if inverse { (&self.row_i, &self.col_i) } else { (&self.row_f, &self.col_f) };
        row.process(data);
        let mut t = vec![Complex::default(); h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = data[y * w + x];
            }
        }
        col.process(&mut t);
        let scale = if inverse { 1.0 / (h * w) as f64 } else { 1.0 };
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = t[x * h + y] * scale;
            }
        }
    }

    fn forward(&self, real: &[f64]) -> Vec<Complex<f64>> {
        let mut d: Vec<Complex<f64>> = real.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.run(&mut d, false);
        d
    }
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb)] = ra.min(rb);
    }
}

/// Region means of `i` over the components joined by zero auxiliary
/// gradients.
fn snap(i: &[Vec<f64>], hz: &[bool], vz: &[bool], h: usize, w: usize) -> Vec<Vec<f64>> {
    let n = h * w;
    let mut parent: Vec<usize> = (0..n).collect();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if hz[p] {
                union(&mut parent, p, y * w + (x + 1) % w);
            }
            if vz[p] {
                union(&mut parent, p, ((y + 1) % h) * w + x);
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|p| find(&mut parent, p)).collect();
    let mut count = vec![0usize; n];
    for &r in &roots {
        count[r] += 1;
    }
    i.iter()
        .map(|c| {
            let mut sum = vec![0.0; n];
            for (p, &r) in roots.iter().enumerate() {
                sum[r] += c[p];
            }
            roots.iter().map(|&r| sum[r] / count[r] as f64).collect()
        })
        .collect()
}

pub fn l0_smooth_trace(img: &Image, lambda: f64) -> Result<L0Trace> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(param_err("lambda", format!("must be positive, got {lambda}")));
    }
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let input = img.planes_f64();
    let fft = Fft2::new(h, w);
    let f_in: Vec<Vec<Complex<f64>>> = input.iter().map(|c| fft.forward(c)).collect();
    let tau = std::f64::consts::TAU;
    let den_grad: Vec<f64> = (0..n)
        .map(|p| {
            let (ky, kx) = ((p / w) as f64, (p % w) as f64);
            (2.0 - 2.0 * (tau * kx / w as f64).cos()) + (2.0 - 2.0 * (tau * ky / h as f64).cos())
        })
        .collect();

    let mut s = input.clone();
    let mut best = input.clone();
    let mut best_obj = l0_objective(&best, &input, h, w, lambda);
    let mut iterates = Vec::new();
    let mut beta = 2.0 * lambda;
    while beta < BETA_MAX {
        let mut hx: Vec<Vec<f64>> = s.iter().map(|c| (0..n).map(|p| c[(p / w) * w + (p % w + 1) % w] - c[p]).collect()).collect();
        let mut vy: Vec<Vec<f64>> = s.iter().map(|c| (0..n).map(|p| c[((p / w + 1) % h) * w + p % w] - c[p]).collect()).collect();
        let mut zero = vec![false; n];
        for (p, z) in zero.iter_mut().enumerate() {
            let e: f64 = (0..3).map(|c| hx[c][p].powi(2) + vy[c][p].powi(2)).sum();
            if e <= lambda / beta {
                *z = true;
                for c in 0..3 {
                    hx[c][p] = 0.0;
                    vy[c][p] = 0.0;
                }
            }
        }
        let hz: Vec<bool> = (0..n).map(|p| zero[p] || (0..3).all(|c| hx[c][p] == 0.0)).collect();
        let vz: Vec<bool> = (0..n).map(|p| zero[p] || (0..3).all(|c| vy[c][p] == 0.0)).collect();
        let cand = snap(&input, &hz, &vz, h, w);
        let obj = l0_objective(&cand, &input, h, w, lambda);
        if obj <= best_obj {
            best = cand;
            best_obj = obj;
        }

        for c in 0..3 {
            let div: Vec<f64> = (0..n)
                .map(|p| {
                    let (y, x) = (p / w, p % w);
                    (hx[c][y * w + (x + w - 1) % w] - hx[c][p]) + (vy[c][((y + h - 1) % h) * w + x] - vy[c][p])
                })
                .collect();
            let mut f = fft.forward(&div);
            for p in 0..n {
                f[p] = (f_in[c][p] + f[p] * beta) / (1.0 + beta * den_grad[p]);
            }
            fft.run(&mut f, true);
            s[c] = f.iter().map(|v| v.re).collect();
        }
        let obj = l0_objective(&s, &input, h, w, lambda);
        if obj <= best_obj {
            best = s.clone();
            best_obj = obj;
        }
        iterates.push(best.clone());
        beta *= KAPPA;
    }
    Ok(L0Trace {
        height: h,
        width: w,
        iterates,
    })
}
