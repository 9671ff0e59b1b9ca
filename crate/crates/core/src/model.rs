//! A trained network together with its γ encoding.

use dlf_tensor::Tensor;

use crate::basenet::assemble_input;
use crate::error::Result;
use crate::hypernet::{fingerprint, ActivationCache, CachedOutput, WeightLearningNet};
use crate::image::Image;
use crate::operators::{edge_map, GammaCodec, ParameterVector};
use crate::train::EvalReport;

#[derive(Clone, Debug)]
pub struct Model {
    pub net: WeightLearningNet<f32>,
    pub codec: GammaCodec,
    /// Last evaluation recorded during training.
    pub eval: Option<EvalReport>,
}

/// `[1, 4, H, W]` network input: the image followed by its edge map.
pub fn network_input(img: &Image) -> Result<Tensor<f32>> {
    let e = edge_map(img);
    let edge = e.reshape([1, 1, img.height(), img.width()])?;
    assemble_input(&img.to_tensor(), &edge)
}

impl Model {
    pub fn gamma(&self, operator: &str, raw: &[f64]) -> Result<ParameterVector> {
        self.codec.encode(operator, raw)
    }

    /// Full forward pass.
    pub fn apply(&self, operator: &str, raw: &[f64], img: &Image) -> Result<Image> {
        let g = self.gamma(operator, raw)?;
        let out = self.net.forward(&g.to_vec(), &network_input(img)?)?;
        Image::from_tensor(&out, 0)
    }

    /// Prefix activations for repeated cheap evaluation on `img`.
    pub fn prepare(&self, img: &Image) -> Result<Prepared> {
        let input = network_input(img)?;
        let fp = fingerprint(&input);
        Ok(Prepared {
            cache: self.net.build_cache(&input)?,
            input,
            fingerprint: fp,
        })
    }

    /// Reuses the cached prefix; bit-identical to [`apply`](Self::apply).
    pub fn apply_cached(&self, prepared: &Prepared, operator: &str, raw: &[f64]) -> Result<(Image, usize)> {
        let g = self.gamma(operator, raw)?;
        let CachedOutput {
            output,
            layers_recomputed,
        } = self.net.cached_forward(&prepared.cache, &g.to_vec(), prepared.fingerprint)?;
        Ok((Image::from_tensor(&output, 0)?, layers_recomputed))
    }
}

/// An input image prepared for cheap tuning.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: Tensor<f32>,
    pub fingerprint: u64,
    pub cache: ActivationCache<f32>,
}
