//! Inspection tools: effective receptive fields, weight statistics, the
//! multi-path equivalence check, interpolation on unseen parameters and
//! parameter counts.

use dlf_tensor::{Element, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basenet::{self, count_parameters, BaseNetConfig, Flow, LayerOp, ResidualRole, Stage, WeightSet};
use crate::error::{contract, Result};
use crate::hypernet::{multipath_expand, HyperConfig, WeightLearningNet};
use crate::image::Image;
use crate::model::Model;
use crate::train::{evaluate, EvalPoint, EvalReport};

/// Fraction of the largest input-gradient magnitude a pixel must exceed.
pub const ERF_FRACTION: f64 = 0.025;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfMask {
    pub height: usize,
    pub width: usize,
    /// `(y, x)` of the probed output pixel.
    pub point: (usize, usize),
    pub gamma: Vec<f64>,
    pub grad_max: f64,
    pub threshold: f64,
    /// Row-major, `true` where the gradient magnitude exceeds the threshold.
    pub mask: Vec<bool>,
    /// Set when the input gradient is identically zero.
    pub degenerate: bool,
    /// Row-major location of `grad_max`.
    pub argmax: (usize, usize),
}

impl ErfMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The image with mask pixels painted green.
    pub fn overlay(&self, img: &Image) -> Result<Image> {
        if (img.height(), img.width()) != (self.height, self.width) {
            return Err(contract("overlay image size differs from the mask"));
        }
        const MARK: [f32; 3] = [0.0, 1.0, 0.0];
        Image::from_fn(self.height, self.width, |c, y, x| {
            if self.mask[y * self.width + x] {
                MARK[c]
            } else {
                img.get(c, y, x)
            }
        })
    }
}

/// Back-propagates a unit gradient from every output channel at `point`
/// to the assembled input `[1, C, H, W]` and thresholds the per-pixel
/// maximum over input channels.
pub fn effective_receptive_field<T: Element>(
    net: &WeightLearningNet<T>,
    gamma: &[T],
    input: &Tensor<T>,
    point: (usize, usize),
) -> Result<ErfMask> {
    let &[1, c_in, h, w] = input.shape() else {
        return Err(contract(format!("expected a single-sample input, got {:?}", input.shape())));
    };
    let (py, px) = point;
    if py >= h || px >= w {
        return Err(contract(format!("point {point:?} outside {h}x{w}")));
    }
    let mut tape = Tape::new();
    let rec = net.record(&mut tape, gamma, false)?;
    let x = tape.leaf(input.clone(), true);
    let flow = Flow { value: x, skip: None };
    let out = basenet::run(&mut tape, net.base(), &rec.weights, Stage::Conv(1), flow, None)?.value;
    let oshape = tape.value(out).shape().to_vec();
    let c_out = oshape[1];
    let mut seed = Tensor::zeros(oshape);
    for c in 0..c_out {
        seed.data_mut()[(c * h + py) * w + px] = T::one();
    }
    let seed = tape.constant(seed);
    let probe = tape.mul(out, seed)?;
    let loss = tape.sum(probe)?;
    tape.backward(loss)?;
    let g = tape.grad(x).ok_or_else(|| contract("input gradient missing"))?;
    let mag: Vec<f64> = (0..h * w)
        .map(|p| (0..c_in).map(|c| g.data()[c * h * w + p].to_f64().unwrap_or(f64::NAN).abs()).fold(0.0, f64::max))
        .collect();
    let (arg, grad_max) = mag.iter().enumerate().fold((0, 0.0), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let threshold = ERF_FRACTION * grad_max;
    let degenerate = grad_max == 0.0;
    Ok(ErfMask {
        height: h,
        width: w,
        point,
        gamma: gamma.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        grad_max,
        threshold,
        mask: mag.iter().map(|&m| !degenerate && m > threshold).collect(),
        degenerate,
        argmax: (arg / w, arg % w),
    })
}

fn back_support(op: LayerOp, kernel: usize, out: &[bool], (oh, ow): (usize, usize), (ih, iw): (usize, usize)) -> Vec<bool> {
    let mut inp = vec![false; ih * iw];
    for oy in 0..oh {
        for ox in 0..ow {
            if !out[oy * ow + ox] {
                continue;
            }
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let src = match op {
                        LayerOp::Conv(p) => {
                            let iy = (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                            let ix = (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                            Some((iy, ix))
                        }
                        LayerOp::Deconv(p) => {
                            let ny = oy as isize + p.padding as isize - ky as isize;
                            let nx = ox as isize + p.padding as isize - kx as isize;
                            let s = p.stride as isize;
                            (ny % s == 0 && nx % s == 0).then(|| (ny.div_euclid(s), nx.div_euclid(s)))
                        }
                    };
                    if let Some((iy, ix)) = src {
                        if iy >= 0 && ix >= 0 && (iy as usize) < ih && (ix as usize) < iw {
                            inp[iy as usize * iw + ix as usize] = true;
                        }
                    }
                }
            }
        }
    }
    inp
}

/// Input pixels that can influence output pixel `point`, from strides,
/// dilations, paddings, residual paths and normalizations (which couple
/// every position of a feature map).
pub fn theoretical_receptive_field(cfg: &BaseNetConfig, height: usize, width: usize, point: (usize, usize)) -> Result<Vec<bool>> {
    cfg.validate()?;
    cfg.check_input_size(height, width)?;
    let layers = cfg.layers();
    let mut sizes = vec![(height, width)];
    for l in &layers {
        let (h, w) = *sizes.last().expect("non-empty");
        let next = match l.op {
            LayerOp::Conv(p) => (p.output_size(h, l.kernel), p.output_size(w, l.kernel)),
            LayerOp::Deconv(p) => (p.output_size(h, l.kernel), p.output_size(w, l.kernel)),
        };
        sizes.push((next.0.expect("checked size"), next.1.expect("checked size")));
    }
    let mut s = vec![false; height * width];
    s[point.0 * width + point.1] = true;
    let mut skip: Option<Vec<bool>> = None;
    for l in layers.iter().rev() {
        let i = l.index - 1;
        if l.residual == Some(ResidualRole::Close) {
            skip = Some(s.clone());
        }
        if l.norm && s.iter().any(|&b| b) {
            s.iter_mut().for_each(|b| *b = true);
        }
        s = back_support(l.op, l.kernel, &s, sizes[i + 1], sizes[i]);
        if l.residual == Some(ResidualRole::Open) {
            let k = skip.take().ok_or_else(|| contract("unbalanced residual block"))?;
            s.iter_mut().zip(k).for_each(|(a, b)| *a |= b);
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Pearson correlation; `None` when either kernel has zero variance.
    pub correlation: Option<f64>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub layers: Vec<LayerStats>,
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

/// Per-layer comparison of two kernel sets of one architecture.
pub fn weight_statistics<T: Element>(cfg: &BaseNetConfig, a: &WeightSet<T>, b: &WeightSet<T>) -> Result<WeightStats> {
    a.validate(cfg)?;
    b.validate(cfg)?;
    let f = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect() };
    let layers = a
        .conv
        .iter()
        .zip(&b.conv)
        .enumerate()
        .map(|(i, (ka, kb))| {
            let (va, vb) = (f(ka), f(kb));
            let (mean_a, var_a) = moments(&va);
            let (mean_b, var_b) = moments(&vb);
            let cov = va.iter().zip(&vb).map(|(x, y)| (x - mean_a) * (y - mean_b)).sum::<f64>() / va.len() as f64;
            let correlation = (var_a > 0.0 && var_b > 0.0).then(|| {
                if va == vb {
                    1.0
                } else {
                    (cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0)
                }
            });
            LayerStats {
                layer: i + 1,
                correlation,
                mean_a,
                mean_b,
                var_a,
                var_b,
            }
        })
        .collect();
    Ok(WeightStats { layers })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultipathReport {
    pub trials: usize,
    pub tolerance: f64,
    /// Largest max-abs difference between the multi-path sum and the
    /// convolution with the predicted kernel.
    pub worst: f64,
    pub worst_slot: Option<usize>,
    pub passed: bool,
}

/// Compares `Σ γ_k (A_k ⊗ x) + B ⊗ x` with `(A γ + B) ⊗ x` for random γ and
/// `x`, cycling over the predicted convolution slots. `(A, B)` is the
/// head's affine expansion at γ = 0, which is global for linear heads; a
/// nonlinear head shows up as a violation.
pub fn verify_multipath<T: Element>(net: &WeightLearningNet<T>, trials: usize, tol: f64, rng: &mut impl Rng) -> Result<MultipathReport> {
    let conv_heads: Vec<usize> = (0..net.heads().len()).filter(|&i| net.heads()[i].slot.is_conv()).collect();
    if conv_heads.is_empty() {
        return Err(contract("network predicts no convolution kernels"));
    }
    let m = net.hyper().gamma_dim;
    let zero = vec![T::zero(); m];
    let expansions = conv_heads.iter().map(|&h| net.kernel_bases(h, &zero)).collect::<Result<Vec<_>>>()?;
    let mut worst = 0.0f64;
    let mut worst_slot = None;
    for t in 0..trials {
        let k = t % conv_heads.len();
        let head = &net.heads()[conv_heads[k]];
        let layer = net.base().layer(head.slot.layer());
        let gamma: Vec<T> = (0..m).map(|_| T::from_f64_lossy(rng.gen_range(0.0..1.0))).collect();
        let side = if layer.op.is_deconv() { 4 } else { 8 };
        let x = Tensor::from_fn([1, layer.c_in, side, side], |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)));
        let w = net.predict_weights(&gamma)?;
        let direct = layer.op.apply::<T, _>(&mut dlf_tensor::Eager, &x, &w.conv[layer.index - 1])?;
        let (bases, offset) = &expansions[k];
        let multi = multipath_expand(&layer, bases, offset, &gamma, &x)?;
        let err = direct.max_abs_diff(&multi)?.to_f64().unwrap_or(f64::INFINITY);
        if !(err <= worst) {
            worst = err;
            worst_slot = Some(conv_heads[k]);
        }
    }
    Ok(MultipathReport {
        trials,
        tolerance: tol,
        worst,
        worst_slot,
        passed: worst <= tol,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationGap {
    pub gamma: f64,
    pub psnr: f64,
    /// Linear interpolation of the neighboring seen scores in normalized
    /// parameter space.
    pub interpolated_psnr: f64,
    /// `interpolated_psnr - psnr`.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub seen: EvalReport,
    pub unseen: EvalReport,
    pub gaps: Vec<InterpolationGap>,
}

/// Scores a single-parameter operator at trained and held-out values.
pub fn interpolation_eval(model: &Model, operator: &str, train: &[f64], test: &[f64], images: &[Image]) -> Result<InterpolationReport> {
    let spec = model.codec.operator(operator)?.clone();
    if spec.params.len() != 1 {
        return Err(contract("interpolation study needs a single-parameter operator"));
    }
    let range = &spec.params[0];
    let mut seen_vals = train.to_vec();
    seen_vals.sort_by(f64::total_cmp);
    seen_vals.dedup();
    let (lo, hi) = match (seen_vals.first(), seen_vals.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(contract("no trained values")),
    };
    for &t in test {
        let exact = seen_vals.contains(&t);
        if !exact && !(t > lo && t < hi) {
            return Err(contract(format!("{t} lies outside the trained hull ({lo}, {hi})")));
        }
    }
    let points = |v: &[f64]| -> Vec<EvalPoint> {
        v.iter()
            .map(|&g| EvalPoint {
                operator: operator.to_string(),
                gamma: vec![g],
            })
            .collect()
    };
    let seen = evaluate(model, &points(&seen_vals), images, 0)?;
    let unseen = evaluate(model, &points(test), images, 0)?;
    let score = |g: f64| seen.entries.iter().find(|e| e.gamma[0] == g).map(|e| e.psnr).expect("seen value");
    let gaps = unseen
        .entries
        .iter()
        .map(|e| {
            let g = e.gamma[0];
            let below = seen_vals.iter().copied().filter(|&v| v <= g).fold(f64::NEG_INFINITY, f64::max);
            let above = seen_vals.iter().copied().filter(|&v| v >= g).fold(f64::INFINITY, f64::min);
            let interpolated_psnr = if below == above {
                score(below)
            } else {
                let t = (range.normalize(g) - range.normalize(below)) / (range.normalize(above) - range.normalize(below));
                (1.0 - t) * score(below) + t * score(above)
            };
            InterpolationGap {
                gamma: g,
                psnr: e.psnr,
                interpolated_psnr,
                gap: interpolated_psnr - e.psnr,
            }
        })
        .collect();
    Ok(InterpolationReport { seen, unseen, gaps })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub conv_count: usize,
    pub norm_count: usize,
    pub bias_count: usize,
    /// Base-network scalars produced by the weight-learning network.
    pub predicted_count: usize,
    /// Base-network scalars stored directly.
    pub shared_count: usize,
    /// Weight-learning network scalars.
    pub fc_count: usize,
    /// Scalars a trained model stores: `fc_count + shared_count`.
    pub total_saved: usize,
}

pub fn count_report(base: &BaseNetConfig, hyper: &HyperConfig) -> Result<CountReport> {
    if hyper.gamma_dim == 0 {
        return Err(contract("γ must have at least one coordinate"));
    }
    let counts = count_parameters(base)?;
    let slots = hyper.validate(base)?;
    let predicted_count: usize = slots.iter().map(|s| s.len).sum();
    let fc_count: usize = slots.iter().map(|s| hyper.head_params(s.len)).sum();
    let shared_count = counts.total() - predicted_count;
    Ok(CountReport {
        conv_count: counts.conv,
        norm_count: counts.norm,
        bias_count: counts.bias,
        predicted_count,
        shared_count,
        fc_count,
        total_saved: fc_count + shared_count,
    })
}
