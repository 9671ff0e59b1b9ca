//! Weight-learning network: maps a parameter vector γ to the learned weight
//! slots of a base network, plus the activation cache used by cheap tuning.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use dlf_tensor::{kernels, Element, Eager, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basenet::{self, BaseNetConfig, Flow, LayerSpec, NormParams, Stage, WeightSet, Weights};
use crate::error::{contract, dimension, Error, Result};

/// Which base-network weights are predicted from γ. Everything else is a
/// shared, γ-independent parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "layer", rename_all = "snake_case")]
pub enum LearnedSlotSpec {
    AllConv,
    AllNorm,
    NormAt(usize),
    ConvAt(usize),
    /// Kernel slice reading input channel 0 of the layer.
    ConvChannel1At(usize),
    /// Kernel slice writing output channel 0 of the layer.
    ConvChannel2At(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum SlotTarget {
    Kernel { layer: usize },
    KernelSlice { layer: usize, indices: Arc<[usize]> },
    /// Scale then shift, `2 * channels` values.
    Norm { layer: usize, channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub target: SlotTarget,
    pub len: usize,
}

impl Slot {
    pub fn layer(&self) -> usize {
        match self.target {
            SlotTarget::Kernel { layer } | SlotTarget::KernelSlice { layer, .. } | SlotTarget::Norm { layer, .. } => layer,
        }
    }

    pub fn stage(&self) -> Stage {
        match self.target {
            SlotTarget::Norm { layer, .. } => Stage::Norm(layer),
            _ => Stage::Conv(self.layer()),
        }
    }

    pub fn is_conv(&self) -> bool {
        !matches!(self.target, SlotTarget::Norm { .. })
    }
}

impl LearnedSlotSpec {
    pub fn slots(&self, cfg: &BaseNetConfig) -> Result<Vec<Slot>> {
        cfg.validate()?;
        let check = |k: usize| {
            if (1..=cfg.depth).contains(&k) {
                Ok(cfg.layer(k))
            } else {
                Err(Error::Config(format!("slot layer {k} outside 1..={}", cfg.depth)))
            }
        };
        let kernel = |l: &LayerSpec| Slot {
            target: SlotTarget::Kernel { layer: l.index },
            len: l.kernel_len(),
        };
        let norm = |l: &LayerSpec| Slot {
            target: SlotTarget::Norm {
                layer: l.index,
                channels: l.c_out,
            },
            len: 2 * l.c_out,
        };
        let slice = |l: &LayerSpec, idx: Vec<usize>| Slot {
            target: SlotTarget::KernelSlice {
                layer: l.index,
                indices: idx.into(),
            },
            len: 0,
        };
        let slots: Vec<Slot> = match *self {
            LearnedSlotSpec::AllConv => cfg.layers().iter().map(kernel).collect(),
            LearnedSlotSpec::AllNorm => cfg.layers().iter().filter(|l| l.norm).map(norm).collect(),
            LearnedSlotSpec::NormAt(k) => {
                let l = check(k)?;
                if !l.norm {
                    return Err(Error::Config(format!("layer {k} has no normalization")));
                }
                vec![norm(&l)]
            }
            LearnedSlotSpec::ConvAt(k) => vec![kernel(&check(k)?)],
            LearnedSlotSpec::ConvChannel1At(k) => {
                let l = check(k)?;
                vec![slice(&l, l.input_channel_indices(0))]
            }
            LearnedSlotSpec::ConvChannel2At(k) => {
                let l = check(k)?;
                vec![slice(&l, l.output_channel_indices(0))]
            }
        };
        let slots: Vec<Slot> = slots
            .into_iter()
            .map(|mut s| {
                if let SlotTarget::KernelSlice { indices, .. } = &s.target {
                    s.len = indices.len();
                }
                s
            })
            .collect();
        if slots.is_empty() {
            return Err(Error::Config(format!("{self:?} selects no weights")));
        }
        Ok(slots)
    }

    /// Earliest stage whose weights depend on γ.
    pub fn start_stage(&self, cfg: &BaseNetConfig) -> Result<Stage> {
        Ok(self.slots(cfg)?.iter().map(Slot::stage).min().expect("slots are non-empty"))
    }
}

/// Upper bound on the parameters of a single slot head.
pub const MAX_HEAD_PARAMS: usize = 1 << 27;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    pub slots: LearnedSlotSpec,
    /// Length m of the parameter vector γ.
    pub gamma_dim: usize,
    /// Number of fully connected stages per slot; 1 is the affine map
    /// `W = A γ + B`.
    pub depth: usize,
    /// Width of intermediate stages. Defaults to the slot size.
    pub hidden: Option<usize>,
    /// ReLU between stages.
    pub relu: bool,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            slots: LearnedSlotSpec::AllConv,
            gamma_dim: 1,
            depth: 1,
            hidden: None,
            relu: false,
        }
    }
}

impl HyperConfig {
    pub fn new(slots: LearnedSlotSpec, gamma_dim: usize) -> Self {
        Self {
            slots,
            gamma_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self, base: &BaseNetConfig) -> Result<Vec<Slot>> {
        if self.gamma_dim == 0 {
            return Err(Error::Config("gamma_dim must be at least 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("hypernet depth must be at least 1".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        let slots = self.slots.slots(base)?;
        for s in &slots {
            let n = self.head_params(s.len);
            if n > MAX_HEAD_PARAMS {
                return Err(Error::Config(format!(
                    "slot at layer {} would need {n} hypernet parameters; set a smaller hidden width",
                    s.layer()
                )));
            }
        }
        Ok(slots)
    }

    /// Widths `[m, h, ..., h, n]` of the stages for a slot of size `n`.
    pub fn widths(&self, n: usize) -> Vec<usize> {
        let h = self.hidden.unwrap_or(n);
        let mut w = vec![self.gamma_dim];
        w.extend(std::iter::repeat(h).take(self.depth - 1));
        w.push(n);
        w
    }

    pub fn head_params(&self, n: usize) -> usize {
        self.widths(n).windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

/// Fully connected map from γ to one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub slot: Slot,
    pub layers: Vec<Dense<T>>,
}

impl<T: Element> Head<T> {
    fn eval(&self, gamma: &Tensor<T>, relu: bool) -> Result<Tensor<T>> {
        let mut x = gamma.clone();
        for (j, d) in self.layers.iter().enumerate() {
            x = kernels::affine(&x, &d.weight, &d.bias)?;
            if relu && j + 1 < self.layers.len() {
                x = x.map(|v| v.max(T::zero()));
            }
        }
        Ok(x)
    }

    /// Exact affine piece `(J, c)` with `head(γ') = J γ' + c` for all γ'
    /// sharing γ's ReLU pattern. `J` is returned column by column.
    pub fn affine_piece(&self, gamma: &[T], relu: bool) -> Result<(Vec<Vec<T>>, Vec<T>)> {
        let m = gamma.len();
        let mut jac: Vec<Vec<T>> = (0..m).map(|k| (0..m).map(|r| if r == k { T::one() } else { T::zero() }).collect()).collect();
        let mut c = vec![T::zero(); m];
        let mut x = Tensor::new([m], gamma.to_vec())?;
        for (j, d) in self.layers.iter().enumerate() {
            let zero_bias = Tensor::zeros(d.bias.shape().to_vec());
            for col in jac.iter_mut() {
                *col = kernels::affine(&Tensor::new([col.len()], col.clone())?, &d.weight, &zero_bias)?.into_data();
            }
            c = kernels::affine(&Tensor::new([c.len()], c)?, &d.weight, &d.bias)?.into_data();
            x = kernels::affine(&x, &d.weight, &d.bias)?;
            if relu && j + 1 < self.layers.len() {
                for (r, v) in x.data_mut().iter_mut().enumerate() {
                    if *v <= T::zero() {
                        *v = T::zero();
                        c[r] = T::zero();
                        for col in jac.iter_mut() {
                            col[r] = T::zero();
                        }
                    }
                }
            }
        }
        Ok((jac, c))
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Hypernet heads plus the shared weights of a base network.
#[derive(Debug)]
pub struct WeightLearningNet<T> {
    base: BaseNetConfig,
    hyper: HyperConfig,
    heads: Vec<Head<T>>,
    shared: WeightSet<T>,
    id: u64,
    revision: u64,
}

impl<T: Element> Clone for WeightLearningNet<T> {
    fn clone(&self) -> Self {
        Self {
            base: self.base.clone(),
            hyper: self.hyper.clone(),
            heads: self.heads.clone(),
            shared: self.shared.clone(),
            id: fresh_id(),
            revision: 0,
        }
    }
}

/// Weights recorded on a tape, with the parameter leaves in
/// [`WeightLearningNet::parameter_names`] order.
pub struct Recorded {
    pub weights: Weights<Var>,
    pub params: Vec<Var>,
}

pub struct CachedOutput<T> {
    pub output: Tensor<T>,
    /// Convolutions and normalizations executed.
    pub layers_recomputed: usize,
}

impl<T: Element> WeightLearningNet<T> {
    pub fn new(base: BaseNetConfig, hyper: HyperConfig, rng: &mut impl Rng) -> Result<Self> {
        let slots = hyper.validate(&base)?;
        let shared = WeightSet::init(&base, rng)?;
        let heads = slots.into_iter().map(|s| init_head(&base, &hyper, &shared, s, rng)).collect();
        Ok(Self {
            base,
            hyper,
            heads,
            shared,
            id: fresh_id(),
            revision: 0,
        })
    }

    pub fn base(&self) -> &BaseNetConfig {
        &self.base
    }

    pub fn hyper(&self) -> &HyperConfig {
        &self.hyper
    }

    pub fn heads(&self) -> &[Head<T>] {
        &self.heads
    }

    pub fn shared(&self) -> &WeightSet<T> {
        &self.shared
    }

    fn predicted(&self) -> (Vec<bool>, Vec<bool>) {
        let mut kernel = vec![false; self.base.depth];
        let mut norm = vec![false; self.base.depth];
        for h in &self.heads {
            match h.slot.target {
                SlotTarget::Kernel { layer } => kernel[layer - 1] = true,
                SlotTarget::Norm { layer, .. } => norm[layer - 1] = true,
                SlotTarget::KernelSlice { .. } => {}
            }
        }
        (kernel, norm)
    }

    /// Names of all trainable tensors, in a fixed order shared by
    /// [`parameters`](Self::parameters), [`parameters_mut`](Self::parameters_mut)
    /// and [`record`](Self::record).
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            for j in 0..h.layers.len() {
                names.push(format!("hyper.slot{i}.fc{j}.weight"));
                names.push(format!("hyper.slot{i}.fc{j}.bias"));
            }
        }
        let (pk, pn) = self.predicted();
        for l in 1..=self.base.depth {
            if !pk[l - 1] {
                names.push(format!("shared.conv{l}"));
            }
            if self.shared.bias[l - 1].is_some() {
                names.push(format!("shared.bias{l}"));
            }
            if self.shared.norm[l - 1].is_some() && !pn[l - 1] {
                names.push(format!("shared.norm{l}.scale"));
                names.push(format!("shared.norm{l}.shift"));
            }
        }
        names
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for h in &self.heads {
            for d in &h.layers {
                out.push(&d.weight);
                out.push(&d.bias);
            }
        }
        let (pk, pn) = self.predicted();
        let s = &self.shared;
        for i in 0..self.base.depth {
            if !pk[i] {
                out.push(&s.conv[i]);
            }
            if let Some(b) = &s.bias[i] {
                out.push(b);
            }
            if let (Some(n), false) = (&s.norm[i], pn[i]) {
                out.push(&n.scale);
                out.push(&n.shift);
            }
        }
        out
    }

    /// Mutable access to the trainable tensors. Invalidates every
    /// activation cache built from this network.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.revision += 1;
        let (pk, pn) = self.predicted();
        let mut out = Vec::new();
        for h in &mut self.heads {
            for d in &mut h.layers {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        let s = &mut self.shared;
        for (i, ((c, b), n)) in s.conv.iter_mut().zip(&mut s.bias).zip(&mut s.norm).enumerate() {
            if !pk[i] {
                out.push(c);
            }
            if let Some(b) = b {
                out.push(b);
            }
            if let (Some(n), false) = (n, pn[i]) {
                out.push(&mut n.scale);
                out.push(&mut n.shift);
            }
        }
        out
    }

    /// Rebuilds a network from its configs and named tensors.
    pub fn from_parameters(base: BaseNetConfig, hyper: HyperConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut net = Self::new(base, hyper, &mut rng)?;
        let names = net.parameter_names();
        if named.len() != names.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", names.len(), named.len())));
        }
        for (slot, (want, (got, t))) in net.parameters_mut().into_iter().zip(names.iter().zip(named.drain(..))) {
            if *want != got {
                return Err(Error::Format(format!("expected tensor {want}, found {got}")));
            }
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!("{want}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(net)
    }

    fn check_gamma(&self, gamma: &[T]) -> Result<Tensor<T>> {
        if gamma.len() != self.hyper.gamma_dim {
            return Err(dimension(format!("γ has length {}, network expects {}", gamma.len(), self.hyper.gamma_dim)));
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(contract("γ contains a non-finite value"));
        }
        Ok(Tensor::new([gamma.len()], gamma.to_vec())?)
    }

    /// Outputs of every slot head, one flat tensor per slot.
    pub fn predict_slots(&self, gamma: &[T]) -> Result<Vec<Tensor<T>>> {
        let g = self.check_gamma(gamma)?;
        self.heads.iter().map(|h| h.eval(&g, self.hyper.relu)).collect()
    }

    /// Scale and shift of the single learned normalization layer.
    pub fn predict_cheap(&self, gamma: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        let LearnedSlotSpec::NormAt(_) = self.hyper.slots else {
            return Err(contract(format!("cheap prediction needs a norm_at slot, network has {:?}", self.hyper.slots)));
        };
        let v = self.predict_slots(gamma)?.remove(0);
        let c = v.numel() / 2;
        Ok((Tensor::new([c], v.data()[..c].to_vec())?, Tensor::new([c], v.data()[c..].to_vec())?))
    }

    /// Complete base-network weights for γ.
    pub fn predict_weights(&self, gamma: &[T]) -> Result<WeightSet<T>> {
        self.predict_from(gamma, Stage::Conv(1))
    }

    /// Like [`predict_weights`](Self::predict_weights), but layers before
    /// `from` are left empty.
    fn predict_from(&self, gamma: &[T], from: Stage) -> Result<WeightSet<T>> {
        let outs = self.predict_slots(gamma)?;
        let keep = |i: usize| i + 1 >= from.layer();
        let s = &self.shared;
        let mut w = Weights {
            conv: s.conv.iter().enumerate().map(|(i, t)| if keep(i) { t.clone() } else { Tensor::default() }).collect(),
            bias: s.bias.clone(),
            norm: s.norm.clone(),
        };
        for (h, v) in self.heads.iter().zip(outs) {
            place(&mut w, &h.slot, v)?;
        }
        Ok(w)
    }

    /// Base-network output for γ on an assembled input `[N, C_in, H, W]`.
    pub fn forward(&self, gamma: &[T], input: &Tensor<T>) -> Result<Tensor<T>> {
        let w = self.predict_weights(gamma)?;
        basenet::forward_assembled(&self.base, &w, input)
    }

    /// Records the weights for γ on `tape`. Parameters become leaves that
    /// require gradients when `trainable` is set, constants otherwise.
    pub fn record(&self, tape: &mut Tape<T>, gamma: &[T], trainable: bool) -> Result<Recorded> {
        let params: Vec<Var> = self.parameters().into_iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        let weights = self.assemble(tape, gamma, &params)?;
        Ok(Recorded { weights, params })
    }

    /// Builds the weights for γ from tape variables holding the trainable
    /// tensors in [`parameter_names`](Self::parameter_names) order.
    pub fn assemble(&self, tape: &mut Tape<T>, gamma: &[T], params: &[Var]) -> Result<Weights<Var>> {
        let g = self.check_gamma(gamma)?;
        let expected = self.parameters();
        if params.len() != expected.len() {
            return Err(contract(format!("{} parameter variables for {} tensors", params.len(), expected.len())));
        }
        for (v, t) in params.iter().zip(expected) {
            if tape.value(*v).shape() != t.shape() {
                return Err(dimension(format!("parameter variable has shape {:?}, expected {:?}", tape.value(*v).shape(), t.shape())));
            }
        }
        let gvar = tape.constant(g);
        let mut it = params.iter().copied();
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let mut x = gvar;
            for j in 0..h.layers.len() {
                let (wv, bv) = (it.next().expect("head weight"), it.next().expect("head bias"));
                x = tape.affine(x, wv, bv)?;
                if self.hyper.relu && j + 1 < h.layers.len() {
                    x = tape.relu(x)?;
                }
            }
            outs.push(x);
        }
        let (pk, pn) = self.predicted();
        let mut conv = Vec::with_capacity(self.base.depth);
        let mut bias = Vec::with_capacity(self.base.depth);
        let mut norm = Vec::with_capacity(self.base.depth);
        for i in 0..self.base.depth {
            conv.push((!pk[i]).then(|| it.next().expect("shared kernel")));
            bias.push(self.shared.bias[i].as_ref().map(|_| it.next().expect("shared bias")));
            norm.push(match (&self.shared.norm[i], pn[i]) {
                (Some(_), false) => Some(NormParams {
                    scale: it.next().expect("shared scale"),
                    shift: it.next().expect("shared shift"),
                }),
                _ => None,
            });
        }
        let mut pending_norm: Vec<Option<NormParams<Var>>> = vec![None; self.base.depth];
        for (h, x) in self.heads.iter().zip(outs) {
            match &h.slot.target {
                SlotTarget::Kernel { layer } => {
                    conv[layer - 1] = Some(tape.reshape(x, &self.base.layer(*layer).kernel_shape())?);
                }
                SlotTarget::KernelSlice { layer, indices } => {
                    let base = conv[layer - 1].expect("sliced kernel is shared");
                    conv[layer - 1] = Some(tape.scatter(base, x, indices.clone())?);
                }
                SlotTarget::Norm { layer, channels } => {
                    let c = *channels;
                    pending_norm[layer - 1] = Some(NormParams {
                        scale: tape.gather(x, (0..c).collect::<Vec<_>>().into())?,
                        shift: tape.gather(x, (c..2 * c).collect::<Vec<_>>().into())?,
                    });
                }
            }
        }
        for (n, p) in norm.iter_mut().zip(pending_norm) {
            if p.is_some() {
                *n = p;
            }
        }
        Ok(Weights {
            conv: conv.into_iter().map(|c| c.expect("every kernel assigned")).collect(),
            bias,
            norm,
        })
    }

    /// Earliest stage whose weights depend on γ.
    pub fn start_stage(&self) -> Stage {
        self.heads.iter().map(|h| h.slot.stage()).min().expect("at least one head")
    }

    /// Identifies the current parameter state of this network instance.
    pub fn fingerprint(&self) -> (u64, u64) {
        (self.id, self.revision)
    }

    /// Runs the γ-independent prefix of the network on `input` and stores
    /// the activation entering the first learned stage.
    pub fn build_cache(&self, input: &Tensor<T>) -> Result<ActivationCache<T>> {
        basenet::check_input(&self.base, input)?;
        let start = self.start_stage();
        let flow = Flow {
            value: input.clone(),
            skip: None,
        };
        let flow = basenet::run(&mut Eager, &self.base, &self.shared, Stage::Conv(1), flow, Some(start))?;
        Ok(ActivationCache {
            start,
            input_fingerprint: fingerprint(input),
            net: self.fingerprint(),
            flow,
        })
    }

    /// Finishes the forward pass for γ from a cache. Bit-identical to
    /// [`forward`](Self::forward) on the cached input.
    pub fn cached_forward(&self, cache: &ActivationCache<T>, gamma: &[T], input_fingerprint: u64) -> Result<CachedOutput<T>> {
        if cache.net != self.fingerprint() {
            return Err(Error::CacheInvalid("network weights changed since the cache was built"));
        }
        if cache.input_fingerprint != input_fingerprint {
            return Err(Error::CacheInvalid("cache was built for a different input"));
        }
        let w = self.predict_from(gamma, cache.start)?;
        let flow = basenet::run(&mut Eager, &self.base, &w, cache.start, cache.flow.clone(), None)?;
        Ok(CachedOutput {
            output: flow.value,
            layers_recomputed: basenet::stages_from(&self.base, cache.start),
        })
    }

    pub fn cast<U: Element>(&self) -> WeightLearningNet<U> {
        WeightLearningNet {
            base: self.base.clone(),
            hyper: self.hyper.clone(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    slot: h.slot.clone(),
                    layers: h
                        .layers
                        .iter()
                        .map(|d| Dense {
                            weight: d.weight.cast(),
                            bias: d.bias.cast(),
                        })
                        .collect(),
                })
                .collect(),
            shared: self.shared.cast(),
            id: fresh_id(),
            revision: 0,
        }
    }

    /// Kernel bases `(K_1..K_m, K_0)` of a convolution slot around γ, such
    /// that the slot's layer kernel equals `Σ γ_k K_k + K_0` on γ's linear
    /// piece.
    pub fn kernel_bases(&self, head: usize, gamma: &[T]) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let h = self.heads.get(head).ok_or_else(|| contract(format!("no slot {head}")))?;
        self.check_gamma(gamma)?;
        let (jac, c) = h.affine_piece(gamma, self.hyper.relu)?;
        let layer = self.base.layer(h.slot.layer());
        let shape = layer.kernel_shape();
        let embed = |v: Vec<T>, base: Tensor<T>| -> Result<Tensor<T>> {
            match &h.slot.target {
                SlotTarget::Kernel { .. } => Ok(Tensor::new(shape, v)?),
                SlotTarget::KernelSlice { indices, .. } => {
                    let mut k = base;
                    for (&i, x) in indices.iter().zip(v) {
                        k.data_mut()[i] = x;
                    }
                    Ok(k)
                }
                SlotTarget::Norm { .. } => Err(contract("normalization slot has no kernel")),
            }
        };
        let bases = jac.into_iter().map(|col| embed(col, Tensor::zeros(shape))).collect::<Result<_>>()?;
        let offset = embed(c, self.shared.conv[layer.index - 1].clone())?;
        Ok((bases, offset))
    }
}

fn place<T: Element>(w: &mut WeightSet<T>, slot: &Slot, v: Tensor<T>) -> Result<()> {
    match &slot.target {
        SlotTarget::Kernel { layer } => {
            let shape = w.conv[layer - 1].shape().to_vec();
            let shape = if shape.is_empty() { v.shape().to_vec() } else { shape };
            w.conv[layer - 1] = v.reshape(shape)?;
        }
        SlotTarget::KernelSlice { layer, indices } => {
            let k = &mut w.conv[layer - 1];
            for (&i, &x) in indices.iter().zip(v.data()) {
                k.data_mut()[i] = x;
            }
        }
        SlotTarget::Norm { layer, channels } => {
            let c = *channels;
            let d = v.data();
            w.norm[layer - 1] = Some(NormParams {
                scale: Tensor::new([c], d[..c].to_vec())?,
                shift: Tensor::new([c], d[c..].to_vec())?,
            });
        }
    }
    Ok(())
}

/// Initial slot values and the bound of the γ-dependent part.
fn slot_init<T: Element>(base: &BaseNetConfig, shared: &WeightSet<T>, slot: &Slot) -> (Vec<T>, f64) {
    let layer = base.layer(slot.layer());
    let fan_in = layer.c_in * layer.kernel * layer.kernel;
    match &slot.target {
        SlotTarget::Kernel { layer } => (shared.conv[layer - 1].data().to_vec(), 1.0 / (fan_in as f64).sqrt()),
        SlotTarget::KernelSlice { layer, indices } => {
            let k = shared.conv[layer - 1].data();
            (indices.iter().map(|&i| k[i]).collect(), 1.0 / (fan_in as f64).sqrt())
        }
        SlotTarget::Norm { channels, .. } => {
            let c = *channels;
            let v = (0..2 * c).map(|i| if i < c { T::one() } else { T::zero() }).collect();
            (v, 1.0 / (c as f64).sqrt())
        }
    }
}

fn uniform<T: Element>(shape: [usize; 2], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
}

fn identity<T: Element>(n: usize) -> Tensor<T> {
    Tensor::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
}

/// `B` starts as a standard kernel initialization (unit scale and zero
/// shift for normalization slots) and `A` is uniform in `±bound`. Deeper
/// heads put `(A, B)` in the first stage and identity maps after it when
/// the widths allow, so they start out equal to the affine head.
fn init_head<T: Element>(base: &BaseNetConfig, hyper: &HyperConfig, shared: &WeightSet<T>, slot: Slot, rng: &mut impl Rng) -> Head<T> {
    let (b0, bound) = slot_init(base, shared, &slot);
    let widths = hyper.widths(slot.len);
    let stages = widths.len() - 1;
    let m = hyper.gamma_dim;
    let h = widths[1];
    let mut layers = Vec::with_capacity(stages);
    if stages == 1 || h == slot.len {
        layers.push(Dense {
            weight: uniform([h, m], bound, rng),
            bias: Tensor::new([h], b0).expect("slot length"),
        });
        for _ in 1..stages {
            layers.push(Dense {
                weight: identity(h),
                bias: Tensor::zeros([h]),
            });
        }
    } else {
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        layers.push(Dense {
            weight: uniform([h, m], fan(m), rng),
            bias: Tensor::zeros([h]),
        });
        for _ in 2..stages {
            layers.push(Dense {
                weight: identity(h),
                bias: Tensor::zeros([h]),
            });
        }
        layers.push(Dense {
            weight: uniform([slot.len, h], bound * fan(h), rng),
            bias: Tensor::new([slot.len], b0).expect("slot length"),
        });
    }
    Head { slot, layers }
}

/// Stored prefix activation for cheap re-evaluation with new γ.
#[derive(Clone, Debug)]
pub struct ActivationCache<T> {
    start: Stage,
    input_fingerprint: u64,
    net: (u64, u64),
    flow: Flow<Tensor<T>>,
}

impl<T: Element> ActivationCache<T> {
    pub fn start(&self) -> Stage {
        self.start
    }

    pub fn input_fingerprint(&self) -> u64 {
        self.input_fingerprint
    }

    pub fn activation(&self) -> &Tensor<T> {
        &self.flow.value
    }

    /// Pending residual input, present when the first learned stage lies
    /// inside a residual block.
    pub fn skip(&self) -> Option<&Tensor<T>> {
        self.flow.skip.as_ref()
    }
}

/// Content hash of a tensor's shape and values.
pub fn fingerprint<T: Element>(t: &Tensor<T>) -> u64 {
    const K: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| h = (h.rotate_left(5) ^ v).wrapping_mul(K);
    for &d in t.shape() {
        mix(d as u64);
    }
    for v in t.data() {
        mix(v.to_f64().map(f64::to_bits).unwrap_or(u64::MAX));
    }
    h
}

/// `Σ γ_k op(x, bases[k]) + op(x, offset)` for the convolution of `layer`.
pub fn multipath_expand<T: Element>(layer: &LayerSpec, bases: &[Tensor<T>], offset: &Tensor<T>, gamma: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
    if bases.len() != gamma.len() {
        return Err(contract(format!("{} kernel bases for γ of length {}", bases.len(), gamma.len())));
    }
    let mut e = Eager;
    let mut acc = layer.op.apply::<T, _>(&mut e, x, offset)?;
    for (k, &g) in bases.iter().zip(gamma) {
        let y = layer.op.apply::<T, _>(&mut e, x, k)?;
        for (a, &v) in acc.data_mut().iter_mut().zip(y.data()) {
            *a = *a + g * v;
        }
    }
    Ok(acc)
}
