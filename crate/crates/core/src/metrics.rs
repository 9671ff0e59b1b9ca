//! Image quality metrics on [0, 1] data.

use crate::error::{contract, Result};
use crate::image::Image;
use crate::operators::filters::gaussian_kernel;

/// Reported PSNR for identical images, and the cap for all others.
pub const PSNR_CAP: f64 = 99.0;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(contract(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// valid window positions and then over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(contract(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let taps = gaussian_kernel(SSIM_SIGMA);
    let r = SSIM_WINDOW / 2;
    // ceil(3 * 1.5) = 5 taps each side, exactly the 11-wide window.
    debug_assert_eq!(taps.len(), SSIM_WINDOW);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (oh, ow) = (h - 2 * r, w - 2 * r);
    let mut total = 0.0;
    for c in 0..3 {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let mut acc = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (ky, ty) in taps.iter().enumerate() {
                    for (kx, tx) in taps.iter().enumerate() {
                        let p = (y + ky) * w + x + kx;
                        let (va, vb) = (pa[p] as f64, pb[p] as f64);
                        let wt = ty * tx;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}
