//! Reference operators and their parameter spaces.

pub mod degrade;
pub mod filters;
pub mod l0;
pub mod wls;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, param_err, Error, Result};
use crate::image::Image;

pub use degrade::{add_gaussian_noise, degrade_sr, noise_field, resize_bicubic};
pub use filters::{edge_map, gaussian_blur, joint_bilateral, rgf_smooth};
pub use l0::{l0_smooth, l0_smooth_trace};
pub use wls::{wls_smooth, wls_solve};

/// Range kernel width of the rolling guidance filter.
pub const RGF_SIGMA_R: f64 = 0.1;
pub const RGF_ITERATIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Log,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub space: Space,
    /// Sampled values are rounded to integers.
    #[serde(default)]
    pub integer: bool,
}

impl ParamRange {
    pub fn new(name: &str, lo: f64, hi: f64, space: Space) -> Self {
        Self {
            name: name.to_string(),
            lo,
            hi,
            space,
            integer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(param_err(&self.name, format!("invalid range [{}, {}]", self.lo, self.hi)));
        }
        if self.space == Space::Log && self.lo <= 0.0 {
            return Err(param_err(&self.name, "log space needs a positive lower bound"));
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Position of `v` in [0, 1] along the sampling space.
    pub fn normalize(&self, v: f64) -> f64 {
        match self.space {
            Space::Log => (v.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln()),
            Space::Linear => (v - self.lo) / (self.hi - self.lo),
        }
    }

    /// Inverse of [`normalize`](Self::normalize).
    pub fn denormalize(&self, t: f64) -> f64 {
        match self.space {
            Space::Log => (self.lo.ln() + t * (self.hi.ln() - self.lo.ln())).exp(),
            Space::Linear => self.lo + t * (self.hi - self.lo),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let v = match self.space {
            Space::Log => rng.gen_range(self.lo.ln()..=self.hi.ln()).exp(),
            Space::Linear => rng.gen_range(self.lo..=self.hi),
        };
        let v = if self.integer { v.round() } else { v };
        v.clamp(self.lo, self.hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    L0,
    Wls,
    Rgf,
    Gaussian,
    Sr,
    Noise,
    /// Test stub: input and target are both the clean image.
    Identity,
}

impl OperatorKind {
    /// Restoration operators degrade the clean image into the input;
    /// filtering operators produce the target.
    pub fn is_restoration(&self) -> bool {
        matches!(self, OperatorKind::Sr | OperatorKind::Noise)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub name: String,
    pub kind: OperatorKind,
    pub params: Vec<ParamRange>,
    /// Leading γ coordinate in jointly trained models.
    pub operator_id: f64,
}

impl OperatorSpec {
    pub fn builtin(kind: OperatorKind) -> Self {
        let (name, id, p) = match kind {
            OperatorKind::L0 => ("l0", 0.1, ParamRange::new("lambda", 0.002, 0.2, Space::Log)),
            OperatorKind::Wls => ("wls", 0.2, ParamRange::new("lambda", 0.1, 10.0, Space::Log)),
            OperatorKind::Rgf => ("rgf", 0.3, ParamRange::new("sigma_s", 1.0, 10.0, Space::Linear)),
            OperatorKind::Gaussian => ("gaussian", 0.4, ParamRange::new("sigma", 0.5, 2.0, Space::Linear)),
            OperatorKind::Sr => (
                "sr",
                0.5,
                ParamRange {
                    integer: true,
                    ..ParamRange::new("scale", 2.0, 4.0, Space::Linear)
                },
            ),
            OperatorKind::Noise => ("noise", 0.6, ParamRange::new("sigma", 15.0, 50.0, Space::Linear)),
            OperatorKind::Identity => ("identity", 1.0, ParamRange::new("unused", 0.0, 1.0, Space::Linear)),
        };
        Self {
            name: name.to_string(),
            kind,
            params: vec![p],
            operator_id: id,
        }
    }

    pub fn lookup(name: &str) -> Result<Self> {
        registry().into_iter().find(|s| s.name == name).ok_or_else(|| Error::UnknownOperator(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::Config(format!("operator {} has no parameters", self.name)));
        }
        if !(self.operator_id > 0.0 && self.operator_id <= 1.0) {
            return Err(Error::Config(format!("operator id {} outside (0, 1]", self.operator_id)));
        }
        self.params.iter().try_for_each(ParamRange::validate)
    }

    /// Checks arity, finiteness and ranges of a raw parameter vector.
    pub fn check_raw(&self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.params.len() {
            return Err(param_err(
                &self.name,
                format!("expected {} parameters, got {}", self.params.len(), raw.len()),
            ));
        }
        for (p, &v) in self.params.iter().zip(raw) {
            if !v.is_finite() || !p.contains(v) {
                return Err(param_err(&p.name, format!("{v} outside [{}, {}]", p.lo, p.hi)));
            }
        }
        Ok(())
    }

    /// Applies the reference operator: the filtered image for filtering
    /// operators, the degraded image for restoration operators. `seed`
    /// drives any randomness.
    pub fn apply(&self, img: &Image, raw: &[f64], seed: u64) -> Result<Image> {
        if raw.len() != self.params.len() {
            return Err(param_err(&self.name, format!("expected {} parameters", self.params.len())));
        }
        let v = raw[0];
        match self.kind {
            OperatorKind::L0 => l0_smooth(img, v),
            OperatorKind::Wls => wls_smooth(img, v, wls::DEFAULT_ALPHA),
            OperatorKind::Rgf => rgf_smooth(img, v, RGF_SIGMA_R, RGF_ITERATIONS),
            OperatorKind::Gaussian => gaussian_blur(img, v),
            OperatorKind::Sr => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(param_err("scale", format!("must be a positive integer, got {v}")));
                }
                degrade_sr(img, v as usize)
            }
            OperatorKind::Noise => add_gaussian_noise(img, v, seed),
            OperatorKind::Identity => Ok(img.clone()),
        }
    }
}

/// Built-in operators, including the identity test stub.
pub fn registry() -> Vec<OperatorSpec> {
    use OperatorKind::*;
    [L0, Wls, Rgf, Gaussian, Sr, Noise, Identity].into_iter().map(OperatorSpec::builtin).collect()
}

/// Finite parameter vector fed to the weight-learning network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(contract("parameter vector must be non-empty and finite"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vec<T: dlf_tensor::Element>(&self) -> Vec<T> {
        self.0.iter().map(|&v| T::from_f64_lossy(v)).collect()
    }
}

/// Per-coordinate map of raw values to [0, 1].
pub fn normalize_gamma(spec: &OperatorSpec, raw: &[f64]) -> Result<ParameterVector> {
    spec.check_raw(raw)?;
    ParameterVector::new(spec.params.iter().zip(raw).map(|(p, &v)| p.normalize(v)).collect())
}

pub fn sample_parameter(spec: &OperatorSpec, rng: &mut impl Rng) -> Vec<f64> {
    spec.params.iter().map(|p| p.sample(rng)).collect()
}

/// How a model turns `(operator, raw parameters)` into γ. Models trained
/// on several operators prepend the operator id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaCodec {
    pub operators: Vec<OperatorSpec>,
    pub joint: bool,
}

impl GammaCodec {
    pub fn new(operators: Vec<OperatorSpec>) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::Config("at least one operator is required".into()));
        }
        for (i, a) in operators.iter().enumerate() {
            a.validate()?;
            for b in &operators[..i] {
                if a.name == b.name || a.operator_id == b.operator_id {
                    return Err(Error::Config(format!("operators {} and {} collide", b.name, a.name)));
                }
            }
        }
        let joint = operators.len() > 1;
        Ok(Self { operators, joint })
    }

    pub fn dim(&self) -> usize {
        self.joint as usize + self.operators.iter().map(|o| o.params.len()).max().unwrap_or(0)
    }

    pub fn operator(&self, name: &str) -> Result<&OperatorSpec> {
        self.operators.iter().find(|o| o.name == name).ok_or_else(|| Error::UnknownOperator(name.to_string()))
    }

    pub fn encode(&self, name: &str, raw: &[f64]) -> Result<ParameterVector> {
        let spec = self.operator(name)?;
        let norm = normalize_gamma(spec, raw)?;
        let mut v = Vec::with_capacity(self.dim());
        if self.joint {
            v.push(spec.operator_id);
        }
        v.extend_from_slice(norm.values());
        v.resize(self.dim(), 0.0);
        ParameterVector::new(v)
    }
}
