//! Base image-processing network: layer layout, weight containers and the
//! forward pass.

use dlf_tensor::{Conv2dParams, ConvTransposeParams, Element, Exec, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dimension, Error, Result};

/// Kernel size of the upsampling layer.
pub const DECONV_KERNEL: usize = 4;

/// Layout of the base network. Layer indices are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseNetConfig {
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    /// Stride-2 convolution.
    pub downsample_layer: Option<usize>,
    /// 4×4 stride-2 transposed convolution.
    pub upsample_layer: Option<usize>,
    /// Inclusive range of layers grouped pairwise into residual blocks.
    pub residual_layers: Option<(usize, usize)>,
    pub dilation: usize,
    /// Layers followed by instance normalization and ReLU.
    pub norm_after: Vec<usize>,
    pub conv_bias: bool,
    pub norm_eps: f64,
}

impl Default for BaseNetConfig {
    fn default() -> Self {
        Self::with_depth(20, 64)
    }
}

impl BaseNetConfig {
    /// Standard layout scaled to `depth` layers: downsampling at layer 3,
    /// residual blocks on layers `4..=depth-3`, upsampling at `depth-2`,
    /// normalization after every layer but the last.
    pub fn with_depth(depth: usize, channels: usize) -> Self {
        assert!(depth >= 8 && depth % 2 == 0, "standard layout needs an even depth >= 8");
        Self {
            depth,
            channels,
            kernel: 3,
            input_channels: 4,
            output_channels: 3,
            downsample_layer: Some(3),
            upsample_layer: Some(depth - 2),
            residual_layers: Some((4, depth - 3)),
            dilation: 2,
            norm_after: (1..depth).collect(),
            conv_bias: false,
            norm_eps: 1e-5,
        }
    }

    /// Small layout used by tests and quick experiments.
    pub fn tiny() -> Self {
        Self::with_depth(8, 16)
    }

    /// Plain stack of same-size convolutions with no resampling, residuals
    /// or normalization.
    pub fn plain(depth: usize, channels: usize, kernel: usize) -> Self {
        Self {
            depth,
            channels,
            kernel,
            input_channels: 4,
            output_channels: 3,
            downsample_layer: None,
            upsample_layer: None,
            residual_layers: None,
            dilation: 1,
            norm_after: Vec::new(),
            conv_bias: false,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.channels == 0 || self.input_channels == 0 || self.output_channels == 0 {
            return fail("depth and channel counts must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return fail(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.dilation == 0 {
            return fail("dilation must be positive".into());
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return fail(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        let in_range = |i: usize| (1..=self.depth).contains(&i);
        match (self.downsample_layer, self.upsample_layer) {
            (None, None) => {}
            (Some(d), Some(u)) => {
                if !in_range(d) || !in_range(u) || d >= u {
                    return fail(format!("downsample layer {d} must precede upsample layer {u} within 1..={}", self.depth));
                }
            }
            _ => return fail("downsampling and upsampling layers must be configured together".into()),
        }
        if let Some((a, b)) = self.residual_layers {
            if !in_range(a) || !in_range(b) || a > b || (b - a + 1) % 2 != 0 {
                return fail(format!("residual range {a}..={b} must cover an even number of layers"));
            }
            for i in a..=b {
                if Some(i) == self.downsample_layer || Some(i) == self.upsample_layer {
                    return fail(format!("layer {i} cannot be both residual and resampling"));
                }
            }
        }
        let mut sorted = self.norm_after.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.norm_after.len() || sorted != self.norm_after {
            return fail("norm_after must be strictly increasing".into());
        }
        if let Some(&i) = self.norm_after.iter().find(|&&i| !in_range(i)) {
            return fail(format!("norm_after layer {i} out of range"));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        (1..=self.depth).map(|i| self.layer(i)).collect()
    }

    /// Specification of layer `index` (1-based). Panics when out of range.
    pub fn layer(&self, index: usize) -> LayerSpec {
        assert!((1..=self.depth).contains(&index), "layer {index} out of range");
        let c_in = if index == 1 { self.input_channels } else { self.channels };
        let c_out = if index == self.depth { self.output_channels } else { self.channels };
        let residual = self.residual_layers.and_then(|(a, b)| {
            (a..=b).contains(&index).then(|| {
                if (index - a) % 2 == 0 {
                    ResidualRole::Open
                } else {
                    ResidualRole::Close
                }
            })
        });
        let pad = (self.kernel - 1) / 2;
        let op = if Some(index) == self.upsample_layer {
            LayerOp::Deconv(ConvTransposeParams::new(2, 1))
        } else if Some(index) == self.downsample_layer {
            LayerOp::Conv(Conv2dParams::new(2, 1, pad))
        } else if residual.is_some() {
            LayerOp::Conv(Conv2dParams::same(self.kernel, self.dilation))
        } else {
            LayerOp::Conv(Conv2dParams::same(self.kernel, 1))
        };
        LayerSpec {
            index,
            op,
            c_in,
            c_out,
            kernel: if op.is_deconv() { DECONV_KERNEL } else { self.kernel },
            norm: self.norm_after.binary_search(&index).is_ok(),
            residual,
        }
    }

    /// Checks that an input of `height × width` survives the resampling
    /// round trip with its size unchanged.
    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(Error::Contract(format!("empty input {height}x{width}")));
        }
        let (mut h, mut w) = (height, width);
        for l in self.layers() {
            let next = match l.op {
                LayerOp::Conv(p) => p.output_size(h, l.kernel).zip(p.output_size(w, l.kernel)),
                LayerOp::Deconv(p) => p.output_size(h, l.kernel).zip(p.output_size(w, l.kernel)),
            };
            (h, w) = next.ok_or_else(|| {
                Error::Contract(format!("input {height}x{width} collapses at layer {}", l.index))
            })?;
        }
        if (h, w) != (height, width) {
            return Err(Error::Contract(format!(
                "input {height}x{width} maps to output {h}x{w}; spatial size must be divisible by 2"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerOp {
    Conv(Conv2dParams),
    Deconv(ConvTransposeParams),
}

impl LayerOp {
    pub fn is_deconv(&self) -> bool {
        matches!(self, LayerOp::Deconv(_))
    }

    pub fn apply<T: Element, E: Exec<T>>(&self, exec: &mut E, x: &E::Value, kernel: &E::Value) -> Result<E::Value> {
        Ok(match *self {
            LayerOp::Conv(p) => exec.conv2d(x, kernel, p)?,
            LayerOp::Deconv(p) => exec.conv_transpose2d(x, kernel, p)?,
        })
    }
}

/// Position of a layer within a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualRole {
    /// First layer; its input is the skip connection.
    Open,
    /// Second layer; the skip is added after its normalization.
    Close,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub op: LayerOp,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub norm: bool,
    pub residual: Option<ResidualRole>,
}

impl LayerSpec {
    /// `[C_out, C_in, k, k]` for convolutions, `[C_in, C_out, k, k]` for
    /// transposed convolutions.
    pub fn kernel_shape(&self) -> [usize; 4] {
        let k = self.kernel;
        if self.op.is_deconv() {
            [self.c_in, self.c_out, k, k]
        } else {
            [self.c_out, self.c_in, k, k]
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_shape().iter().product()
    }

    /// Flat kernel indices that read input channel `c`.
    pub fn input_channel_indices(&self, c: usize) -> Vec<usize> {
        let [a, b, k, _] = self.kernel_shape();
        let kk = k * k;
        if self.op.is_deconv() {
            (0..b * kk).map(|j| c * b * kk + j).collect()
        } else {
            (0..a).flat_map(|o| (0..kk).map(move |j| (o * b + c) * kk + j)).collect()
        }
    }

    /// Flat kernel indices that write output channel `c`.
    pub fn output_channel_indices(&self, c: usize) -> Vec<usize> {
        let [a, b, k, _] = self.kernel_shape();
        let kk = k * k;
        if self.op.is_deconv() {
            (0..a).flat_map(|i| (0..kk).map(move |j| (i * b + c) * kk + j)).collect()
        } else {
            (0..b * kk).map(|j| c * b * kk + j).collect()
        }
    }
}

/// Point in the layer sequence where execution can begin or pause.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Before the convolution of the given layer.
    Conv(usize),
    /// Between the convolution (and bias) of the given layer and its
    /// normalization.
    Norm(usize),
}

impl Stage {
    pub fn layer(&self) -> usize {
        match *self {
            Stage::Conv(i) | Stage::Norm(i) => i,
        }
    }

    fn key(&self) -> (usize, bool) {
        (self.layer(), matches!(self, Stage::Norm(_)))
    }
}

/// Execution order.
impl Ord for Stage {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for Stage {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Number of parameterized operations (convolutions and normalizations)
/// executed when running from `start` to the end of the network.
pub fn stages_from(cfg: &BaseNetConfig, start: Stage) -> usize {
    cfg.layers()
        .iter()
        .map(|l| {
            let conv = Stage::Conv(l.index) >= start;
            let norm = l.norm && Stage::Norm(l.index) >= start;
            conv as usize + norm as usize
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<V> {
    pub scale: V,
    pub shift: V,
}

/// Weights of every layer, indexed by `layer - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<V> {
    pub conv: Vec<V>,
    pub bias: Vec<Option<V>>,
    pub norm: Vec<Option<NormParams<V>>>,
}

pub type WeightSet<T> = Weights<Tensor<T>>;

impl<T: Element> WeightSet<T> {
    /// He-uniform kernels, zero biases, unit-scale zero-shift
    /// normalizations.
    pub fn init(cfg: &BaseNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg.layers();
        Ok(Self {
            conv: layers.iter().map(|l| he_uniform(l, rng)).collect(),
            bias: layers.iter().map(|l| cfg.conv_bias.then(|| Tensor::zeros([l.c_out]))).collect(),
            norm: layers
                .iter()
                .map(|l| {
                    l.norm.then(|| NormParams {
                        scale: Tensor::full([l.c_out], T::one()),
                        shift: Tensor::zeros([l.c_out]),
                    })
                })
                .collect(),
        })
    }

    pub fn validate(&self, cfg: &BaseNetConfig) -> Result<()> {
        let layers = cfg.layers();
        if self.conv.len() != layers.len() || self.bias.len() != layers.len() || self.norm.len() != layers.len() {
            return Err(dimension(format!("weight set has {} layers, config {}", self.conv.len(), layers.len())));
        }
        let bad = |i: usize, what: &str, got: &[usize]| {
            Err(dimension(format!("layer {i} {what} has shape {got:?}")))
        };
        for l in &layers {
            let i = l.index - 1;
            if self.conv[i].shape() != l.kernel_shape() {
                return bad(l.index, "kernel", self.conv[i].shape());
            }
            match (&self.bias[i], cfg.conv_bias) {
                (Some(b), true) if b.shape() == [l.c_out] => {}
                (None, false) => {}
                (b, _) => return bad(l.index, "bias", b.as_ref().map(|b| b.shape()).unwrap_or(&[])),
            }
            match (&self.norm[i], l.norm) {
                (Some(n), true) if n.scale.shape() == [l.c_out] && n.shift.shape() == [l.c_out] => {}
                (None, false) => {}
                (n, _) => return bad(l.index, "norm", n.as_ref().map(|n| n.scale.shape()).unwrap_or(&[])),
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> WeightSet<U> {
        Weights {
            conv: self.conv.iter().map(|t| t.cast()).collect(),
            bias: self.bias.iter().map(|b| b.as_ref().map(|t| t.cast())).collect(),
            norm: self
                .norm
                .iter()
                .map(|n| {
                    n.as_ref().map(|n| NormParams {
                        scale: n.scale.cast(),
                        shift: n.shift.cast(),
                    })
                })
                .collect(),
        }
    }
}

fn he_uniform<T: Element>(l: &LayerSpec, rng: &mut impl Rng) -> Tensor<T> {
    let shape = l.kernel_shape();
    let fan_in = if l.op.is_deconv() { shape[0] } else { shape[1] } * l.kernel * l.kernel;
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    /// Convolution and transposed-convolution kernel weights.
    pub conv: usize,
    /// Normalization scales and shifts.
    pub norm: usize,
    /// Convolution biases (zero when disabled).
    pub bias: usize,
}

impl ParameterCounts {
    pub fn total(&self) -> usize {
        self.conv + self.norm + self.bias
    }
}

pub fn count_parameters(cfg: &BaseNetConfig) -> Result<ParameterCounts> {
    cfg.validate()?;
    let layers = cfg.layers();
    Ok(ParameterCounts {
        conv: layers.iter().map(|l| l.kernel_len()).sum(),
        norm: layers.iter().filter(|l| l.norm).map(|l| 2 * l.c_out).sum(),
        bias: if cfg.conv_bias { layers.iter().map(|l| l.c_out).sum() } else { 0 },
    })
}

/// Activation entering a stage, plus the pending residual input when the
/// stage sits inside a residual block.
#[derive(Clone, Debug)]
pub struct Flow<V> {
    pub value: V,
    pub skip: Option<V>,
}

/// Runs the layers from `start` up to (not including) `stop`, or to the end
/// of the network when `stop` is `None`.
///
/// Every execution path (full, cached, recorded) goes through this function,
/// so results agree bit for bit whenever the same weights are supplied.
pub fn run<T, E>(
    exec: &mut E,
    cfg: &BaseNetConfig,
    w: &Weights<E::Value>,
    start: Stage,
    mut flow: Flow<E::Value>,
    stop: Option<Stage>,
) -> Result<Flow<E::Value>>
where
    T: Element,
    E: Exec<T>,
    E::Value: Clone,
{
    let eps = T::from_f64_lossy(cfg.norm_eps);
    for l in cfg.layers().into_iter().skip(start.layer() - 1) {
        let i = l.index - 1;
        if start != Stage::Norm(l.index) {
            if stop == Some(Stage::Conv(l.index)) {
                return Ok(flow);
            }
            if l.residual == Some(ResidualRole::Open) {
                flow.skip = Some(flow.value.clone());
            }
            flow.value = l.op.apply(exec, &flow.value, &w.conv[i])?;
            if let Some(b) = &w.bias[i] {
                flow.value = exec.bias_add(&flow.value, b)?;
            }
        }
        if stop == Some(Stage::Norm(l.index)) {
            return Ok(flow);
        }
        if let Some(n) = &w.norm[i] {
            flow.value = exec.instance_norm(&flow.value, &n.scale, &n.shift, eps)?;
        }
        if l.residual == Some(ResidualRole::Close) {
            let skip = flow
                .skip
                .take()
                .ok_or_else(|| Error::Contract(format!("layer {} closes a residual block that was never opened", l.index)))?;
            flow.value = exec.add(&flow.value, &skip)?;
        }
        if l.norm {
            flow.value = exec.relu(&flow.value)?;
        }
    }
    if let Some(s) = stop {
        return Err(Error::Contract(format!("stop stage {s:?} not reached")));
    }
    Ok(flow)
}

/// Concatenates an RGB batch `[N, 3, H, W]` with its edge maps
/// `[N, 1, H, W]` into the network input `[N, 4, H, W]`.
pub fn assemble_input<T: Element>(rgb: &Tensor<T>, edge: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[n, c, h, w], &[n2, 1, h2, w2]) = (rgb.shape(), edge.shape()) else {
        return Err(dimension(format!("cannot join {:?} with {:?}", rgb.shape(), edge.shape())));
    };
    if (n, h, w) != (n2, h2, w2) {
        return Err(dimension(format!("cannot join {:?} with {:?}", rgb.shape(), edge.shape())));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (c + 1) * plane);
    for s in 0..n {
        data.extend_from_slice(&rgb.data()[s * c * plane..(s + 1) * c * plane]);
        data.extend_from_slice(&edge.data()[s * plane..(s + 1) * plane]);
    }
    Ok(Tensor::new([n, c + 1, h, w], data)?)
}

/// Full forward pass on an RGB batch `[N, 3, H, W]` and its edge maps
/// `[N, 1, H, W]`.
pub fn forward_base<T: Element>(cfg: &BaseNetConfig, w: &WeightSet<T>, image: &Tensor<T>, edge: &Tensor<T>) -> Result<Tensor<T>> {
    forward_assembled(cfg, w, &assemble_input(image, edge)?)
}

/// Full forward pass on an assembled input `[N, C_in, H, W]`.
pub fn forward_assembled<T: Element>(cfg: &BaseNetConfig, w: &WeightSet<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    cfg.validate()?;
    w.validate(cfg)?;
    check_input(cfg, input)?;
    let flow = Flow {
        value: input.clone(),
        skip: None,
    };
    Ok(run(&mut dlf_tensor::Eager, cfg, w, Stage::Conv(1), flow, None)?.value)
}

pub(crate) fn check_input<T: Element>(cfg: &BaseNetConfig, input: &Tensor<T>) -> Result<()> {
    match *input.shape() {
        [_, c, h, w] if c == cfg.input_channels => cfg.check_input_size(h, w),
        _ => Err(dimension(format!(
            "input shape {:?} does not match {} input channels",
            input.shape(),
            cfg.input_channels
        ))),
    }
}
