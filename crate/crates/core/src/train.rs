//! Pair synthesis, the L2 loss, Adam and the joint training loop.

use std::io::Write;
use std::path::PathBuf;

use dlf_tensor::{Element, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::basenet::{self, assemble_input, BaseNetConfig, Flow, Stage};
use crate::error::{contract, Error, Result};
use crate::hypernet::{HyperConfig, WeightLearningNet};
use crate::image::{batch, Image};
use crate::metrics::{psnr, ssim};
use crate::model::Model;
use crate::operators::{edge_map, sample_parameter, GammaCodec, OperatorKind, OperatorSpec};

/// `(input, target)`: filtering operators keep the clean image as input,
/// restoration operators degrade it and keep it as target.
pub fn make_pair(op: &OperatorSpec, raw: &[f64], clean: &Image, seed: u64) -> Result<(Image, Image)> {
    op.check_raw(raw)?;
    let out = op.apply(clean, raw, seed)?;
    Ok(if op.kind.is_restoration() {
        (out, clean.clone())
    } else {
        (clean.clone(), out)
    })
}

/// Mean squared difference, recorded on the tape.
pub fn l2_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    Ok(tape.sq_diff_mean(pred, target)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fractions of the run after which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_at: vec![0.6, 0.8],
            decay_factor: 0.5,
        }
    }
}

impl AdamConfig {
    pub fn rate_at(&self, step: usize, steps: usize) -> f64 {
        let passed = self.decay_at.iter().filter(|&&f| step as f64 >= f * steps as f64).count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<f32>>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(contract(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (c.eps * bc2.sqrt()) as f32;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.numel() != g.numel() || m.len() != g.numel() {
                return Err(contract("parameter layout changed between steps"));
            }
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= step * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GammaSampling {
    /// Fresh raw parameters from each operator's sampling space.
    Random,
    /// Uniform choice among fixed raw parameter vectors.
    Fixed { values: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub operator: String,
    pub gamma: Vec<f64>,
}

fn operators_de<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<OperatorSpec>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Name(String),
        Spec(OperatorSpec),
    }
    Vec::<Entry>::deserialize(d)?
        .into_iter()
        .map(|e| match e {
            Entry::Name(n) => OperatorSpec::lookup(&n).map_err(serde::de::Error::custom),
            Entry::Spec(s) => Ok(s),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Operator specs, or built-in operator names when read from JSON.
    #[serde(deserialize_with = "operators_de")]
    pub operators: Vec<OperatorSpec>,
    pub base: BaseNetConfig,
    /// `gamma_dim` must match the operators' γ encoding.
    pub hyper: HyperConfig,
    pub patch_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub gamma_sampling: GammaSampling,
    /// Evaluate every this many steps; 0 evaluates only before and after.
    pub eval_every: usize,
    /// Defaults to the middle of every operator's range.
    pub eval_points: Vec<EvalPoint>,
    pub checkpoint_path: Option<PathBuf>,
    /// Evaluation reports are appended here as JSON lines.
    pub report_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            operators: vec![OperatorSpec::builtin(OperatorKind::Gaussian)],
            base: BaseNetConfig::default(),
            hyper: HyperConfig::default(),
            patch_size: 64,
            batch_size: 4,
            steps: 1000,
            optimizer: AdamConfig::default(),
            seed: 0,
            gamma_sampling: GammaSampling::Random,
            eval_every: 0,
            eval_points: Vec::new(),
            checkpoint_path: None,
            report_path: None,
        }
    }
}

impl TrainConfig {
    /// Config whose hypernet γ length matches `operators`.
    pub fn new(operators: Vec<OperatorSpec>, base: BaseNetConfig, slots: crate::hypernet::LearnedSlotSpec) -> Result<Self> {
        let codec = GammaCodec::new(operators.clone())?;
        Ok(Self {
            operators,
            base,
            hyper: HyperConfig::new(slots, codec.dim()),
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<GammaCodec> {
        let codec = GammaCodec::new(self.operators.clone())?;
        if self.hyper.gamma_dim != codec.dim() {
            return Err(Error::Config(format!(
                "hyper.gamma_dim is {} but the operators encode γ with {} values",
                self.hyper.gamma_dim,
                codec.dim()
            )));
        }
        self.hyper.validate(&self.base)?;
        if self.patch_size == 0 || self.patch_size % 2 != 0 {
            return Err(Error::Config(format!("patch_size must be even, got {}", self.patch_size)));
        }
        self.base.check_input_size(self.patch_size, self.patch_size)?;
        for o in self.operators.iter().filter(|o| o.kind == OperatorKind::Sr) {
            let p = &o.params[0];
            if let Some(s) = (p.lo as usize..=p.hi as usize).find(|s| self.patch_size % s != 0) {
                return Err(Error::Config(format!("patch_size {} is not divisible by sr scale {s}", self.patch_size)));
            }
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if let GammaSampling::Fixed { values } = &self.gamma_sampling {
            if values.is_empty() {
                return Err(Error::Config("fixed γ sampling needs at least one value".into()));
            }
            for v in values {
                if !self.operators.iter().any(|o| o.check_raw(v).is_ok()) {
                    return Err(Error::Config(format!("fixed γ {v:?} fits no operator")));
                }
            }
        }
        for p in &self.eval_points {
            codec.encode(&p.operator, &p.gamma)?;
        }
        Ok(codec)
    }

    pub fn eval_points(&self) -> Vec<EvalPoint> {
        if !self.eval_points.is_empty() {
            return self.eval_points.clone();
        }
        self.operators
            .iter()
            .map(|o| EvalPoint {
                operator: o.name.clone(),
                gamma: o
                    .params
                    .iter()
                    .map(|p| {
                        let v = p.denormalize(0.5);
                        if p.integer {
                            v.round()
                        } else {
                            v
                        }
                    })
                    .collect(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub operator: String,
    pub gamma: Vec<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    /// PSNR of the unprocessed input against the target.
    pub baseline_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    /// One `{"step","operator","gamma","psnr","ssim"}` object per line.
    pub fn json_lines(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let line = serde_json::json!({
                "step": self.step,
                "operator": e.operator,
                "gamma": e.gamma,
                "psnr": e.psnr,
                "ssim": e.ssim,
            });
            s.push_str(&line.to_string());
            s.push('\n');
        }
        s
    }

    pub fn entry(&self, operator: &str, gamma: &[f64]) -> Option<&EvalEntry> {
        self.entries.iter().find(|e| e.operator == operator && e.gamma == gamma)
    }

    pub fn mean_mse(&self) -> f64 {
        self.entries.iter().map(|e| e.mse).sum::<f64>() / self.entries.len().max(1) as f64
    }
}

/// Seed for the degradation of eval image `index`.
fn eval_seed(index: usize) -> u64 {
    0x5eed_0000 + index as u64
}

/// Mean PSNR/SSIM/MSE of the model's 8-bit output at each point over
/// `images`.
pub fn evaluate(model: &Model, points: &[EvalPoint], images: &[Image], step: usize) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(contract("empty eval set"));
    }
    let mut entries = Vec::with_capacity(points.len());
    for p in points {
        let spec = model.codec.operator(&p.operator)?;
        let scores: Vec<[f64; 4]> = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let (input, target) = make_pair(spec, &p.gamma, img, eval_seed(i))?;
                let pred = model.apply(&p.operator, &p.gamma, &input)?.quantize8();
                Ok([
                    psnr(&pred, &target)?,
                    ssim(&pred, &target)?,
                    crate::metrics::mse(&pred, &target)?,
                    psnr(&input, &target)?,
                ])
            })
            .collect::<Result<_>>()?;
        let mean = |k: usize| scores.iter().map(|s| s[k]).sum::<f64>() / scores.len() as f64;
        entries.push(EvalEntry {
            operator: p.operator.clone(),
            gamma: p.gamma.clone(),
            psnr: mean(0),
            ssim: mean(1),
            mse: mean(2),
            baseline_psnr: mean(3),
        });
    }
    Ok(EvalReport { step, entries })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<EvalReport>,
    /// Training loss at every step.
    pub losses: Vec<f64>,
}

struct Sample {
    image: usize,
    y: usize,
    x: usize,
    seed: u64,
}

/// Trains a fresh network on random patches of `corpus`, evaluating on
/// `eval_set` before the first step, every `eval_every` steps and at the
/// end.
pub fn train(cfg: &TrainConfig, corpus: &[Image], eval_set: &[Image]) -> Result<TrainOutcome> {
    let codec = cfg.validate()?;
    let p = cfg.patch_size;
    if corpus.is_empty() {
        return Err(contract("empty training corpus"));
    }
    if let Some(im) = corpus.iter().find(|im| im.height() < p || im.width() < p) {
        return Err(contract(format!("corpus image {}x{} smaller than patch {p}", im.height(), im.width())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = WeightLearningNet::<f32>::new(cfg.base.clone(), cfg.hyper.clone(), &mut rng)?;
    let mut model = Model {
        net,
        codec,
        eval: None,
    };
    let points = cfg.eval_points();
    let mut reports = Vec::new();
    let mut report_file = match &cfg.report_path {
        Some(path) => Some(std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?),
        None => None,
    };
    let mut emit = |model: &Model, step: usize, reports: &mut Vec<EvalReport>| -> Result<()> {
        if eval_set.is_empty() {
            return Ok(());
        }
        let r = evaluate(model, &points, eval_set, step)?;
        if let (Some(f), Some(path)) = (report_file.as_mut(), cfg.report_path.as_ref()) {
            f.write_all(r.json_lines().as_bytes()).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
        }
        log::info!("step {step}: {}", r.json_lines().trim_end());
        reports.push(r);
        Ok(())
    };
    emit(&model, 0, &mut reports)?;

    let mut adam = Adam::new(cfg.optimizer.clone());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let spec = &cfg.operators[rng.gen_range(0..cfg.operators.len())];
        let raw = match &cfg.gamma_sampling {
            GammaSampling::Random => sample_parameter(spec, &mut rng),
            GammaSampling::Fixed { values } => {
                let fits: Vec<&Vec<f64>> = values.iter().filter(|v| spec.check_raw(v).is_ok()).collect();
                if fits.is_empty() {
                    sample_parameter(spec, &mut rng)
                } else {
                    fits[rng.gen_range(0..fits.len())].clone()
                }
            }
        };
        let gamma: Vec<f32> = model.codec.encode(&spec.name, &raw)?.to_vec();
        let samples: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| {
                let image = rng.gen_range(0..corpus.len());
                let im = &corpus[image];
                Sample {
                    image,
                    y: rng.gen_range(0..=im.height() - p),
                    x: rng.gen_range(0..=im.width() - p),
                    seed: rng.gen(),
                }
            })
            .collect();
        let pairs: Vec<(Image, Image)> = samples
            .par_iter()
            .map(|s| make_pair(spec, &raw, &corpus[s.image].crop(s.y, s.x, p, p)?, s.seed))
            .collect::<Result<_>>()?;
        let inputs: Vec<&Image> = pairs.iter().map(|(i, _)| i).collect();
        let targets: Vec<&Image> = pairs.iter().map(|(_, t)| t).collect();
        let edges: Vec<f32> = inputs.iter().flat_map(|im| edge_map(im).into_data()).collect();
        let x = assemble_input(&batch::<f32>(&inputs)?, &Tensor::new([inputs.len(), 1, p, p], edges)?)?;
        let y = batch::<f32>(&targets)?;

        let mut tape = Tape::new();
        let rec = model.net.record(&mut tape, &gamma, true)?;
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let flow = Flow { value: xv, skip: None };
        let out = basenet::run(&mut tape, &cfg.base, &rec.weights, Stage::Conv(1), flow, None)?.value;
        let loss = l2_loss(&mut tape, out, yv)?;
        let lv = tape.value(loss).item().unwrap_or(f32::NAN) as f64;
        if !lv.is_finite() {
            return Err(Error::Diverged { step, loss: lv });
        }
        losses.push(lv);
        tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = rec
            .params
            .iter()
            .map(|&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec())))
            .collect();
        drop(tape);
        let lr = cfg.optimizer.rate_at(step, cfg.steps);
        adam.step(model.net.parameters_mut(), &grads, lr)?;

        let done = step + 1;
        if done < cfg.steps && cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            emit(&model, done, &mut reports)?;
        }
    }
    emit(&model, cfg.steps, &mut reports)?;
    model.eval = reports.last().cloned();
    if let Some(path) = &cfg.checkpoint_path {
        crate::checkpoint::save(&model, path)?;
    }
    Ok(TrainOutcome { model, reports, losses })
}
