//! Monte-Carlo dropout regression network.
//!
//! Two ReLU hidden layers, each followed by inverted dropout, and a linear
//! scalar output. Observation noise is homoscedastic with a trainable log
//! standard deviation. Predictive variance is the population variance of the
//! stochastic passes plus the observation noise variance.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Shape, Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "bnn-model";
const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnnConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Initial observation noise standard deviation (target units).
    pub init_noise_std: f64,
}

impl Default for BnnConfig {
    fn default() -> Self {
        BnnConfig {
            input_dim: 13,
            hidden: 100,
            dropout: 0.5,
            init_noise_std: 0.5,
        }
    }
}

impl BnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::config("bnn: input_dim and hidden must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("bnn: dropout must lie in [0, 1)"));
        }
        if !(self.init_noise_std > 0.0) {
            return Err(Error::config("bnn: init_noise_std must be > 0"));
        }
        Ok(())
    }
}

const PARAM_NAMES: [&str; 7] = ["w1", "b1", "w2", "b2", "w3", "b3", "log_noise_std"];

#[derive(Debug, Clone, PartialEq)]
pub struct BnnParams {
    pub config: BnnConfig,
    tensors: Vec<Tensor>,
}

impl BnnParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(config: BnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.input_dim, config.hidden);
        let shapes = [(d, h), (1, h), (h, h), (1, h), (h, 1), (1, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors: Vec<Tensor> = shapes
            .iter()
            .map(|&(r, c)| {
                let mut t = Tensor::zeros(Shape::new(r, c));
                if r > 1 {
                    let bound = 1.0 / (r as f64).sqrt();
                    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
                }
                t
            })
            .collect();
        tensors.push(Tensor::scalar(config.init_noise_std.ln()));
        Ok(BnnParams { config, tensors })
    }

    pub fn names() -> &'static [&'static str] {
        &PARAM_NAMES
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn noise_variance(&self) -> f64 {
        (2.0 * self.tensors[6].item()).exp()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBnn {
        let ids = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundBnn {
            ids,
            config: self.config.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(CHECKPOINT_KIND);
        ckpt.meta.push(("config".into(), serde_json::to_string(&self.config).expect("config serializes")));
        for (name, t) in PARAM_NAMES.iter().zip(&self.tensors) {
            ckpt.arrays.push((name.to_string(), t.clone()));
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::input(format!("checkpoint holds a '{}', not a regression model", ckpt.kind)));
        }
        let config: BnnConfig = ckpt
            .meta("config")
            .ok_or_else(|| Error::input("checkpoint has no model config"))
            .and_then(|s| serde_json::from_str(s).map_err(|e| Error::input(format!("checkpoint config: {e}"))))?;
        let mut params = BnnParams::init(config, 0)?;
        for (name, slot) in PARAM_NAMES.iter().zip(params.tensors.iter_mut()) {
            let t = ckpt.array(name).ok_or_else(|| Error::input(format!("checkpoint lacks array '{name}'")))?;
            if t.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_checkpoint",
                    lhs: slot.shape(),
                    rhs: t.shape(),
                });
            }
            *slot = t.clone();
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        BnnParams::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub struct BoundBnn {
    ids: Vec<NodeId>,
    config: BnnConfig,
}

impl BoundBnn {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn log_noise_std(&self) -> NodeId {
        self.ids[6]
    }
}

/// Inverted-dropout mask: entries are `0` or `1/(1-p)`.
fn dropout_mask(rng: &mut impl Rng, rows: usize, cols: usize, p: f64) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols).map(|_| if p > 0.0 && rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    Tensor::matrix(rows, cols, data)
}

fn inputs_tensor(xs: &[&[f64]], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(xs.len() * dim);
    for x in xs {
        if x.len() != dim {
            return Err(Error::input(format!("feature vector length {} does not match model ({dim})", x.len())));
        }
        data.extend_from_slice(x);
    }
    Ok(Tensor::matrix(xs.len(), dim, data))
}

/// `S` stochastic forward passes over a batch; returns one `B x 1` node per
/// pass. Masks are drawn pass by pass from `rng`.
pub fn stochastic_passes(tape: &mut Tape, bound: &BoundBnn, xs: &[&[f64]], passes: usize, rng: &mut impl Rng) -> Result<Vec<NodeId>> {
    let cfg = &bound.config;
    let rows = xs.len();
    let x = tape.constant(inputs_tensor(xs, cfg.input_dim)?);
    let ones = tape.constant(Tensor::filled(Shape::new(rows, 1), 1.0));
    let id = |i: usize| bound.ids[i];
    let mut outs = Vec::with_capacity(passes);
    for _ in 0..passes {
        let mut h = x;
        for layer in 0..2 {
            let hw = tape.matmul(h, id(2 * layer))?;
            let b = tape.matmul(ones, id(2 * layer + 1))?;
            let pre = tape.add(hw, b)?;
            let act = tape.relu(pre);
            let mask = tape.constant(dropout_mask(rng, rows, cfg.hidden, cfg.dropout));
            h = tape.mul(act, mask)?;
        }
        let hw = tape.matmul(h, id(4))?;
        let b = tape.matmul(ones, id(5))?;
        outs.push(tape.add(hw, b)?);
    }
    Ok(outs)
}

/// Predictive mean and variance nodes (`B x 1`) from a set of passes.
pub fn predictive_moments(tape: &mut Tape, bound: &BoundBnn, passes: &[NodeId]) -> Result<(NodeId, NodeId)> {
    if passes.is_empty() {
        return Err(Error::input("need at least one forward pass"));
    }
    let s = passes.len() as f64;
    let mut sum = passes[0];
    for &p in &passes[1..] {
        sum = tape.add(sum, p)?;
    }
    let mean = tape.scale(sum, 1.0 / s);
    let mut spread: Option<NodeId> = None;
    for &p in passes {
        let d = tape.sub(p, mean)?;
        let sq = tape.mul(d, d)?;
        spread = Some(match spread {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let spread = tape.scale(spread.expect("non-empty"), 1.0 / s);
    let two_log = tape.scale(bound.log_noise_std(), 2.0);
    let noise_var = tape.exp(two_log);
    let var = tape.add(spread, noise_var)?;
    Ok((mean, var))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub variance: f64,
}

/// Batched [`mc_predict`]; deterministic for a given `(seed, xs)`.
pub fn mc_predict_batch(params: &BnnParams, xs: &[&[f64]], samples: usize, seed: u64) -> Result<Vec<GaussianPrediction>> {
    if samples == 0 {
        return Err(Error::input("MC sample count must be >= 1"));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let passes = stochastic_passes(&mut tape, &bound, xs, samples, &mut rng)?;
    let (mean, var) = predictive_moments(&mut tape, &bound, &passes)?;
    Ok(tape
        .value(mean)
        .data()
        .iter()
        .zip(tape.value(var).data())
        .map(|(&mean, &variance)| GaussianPrediction { mean, variance })
        .collect())
}

pub fn mc_predict(params: &BnnParams, x: &[f64], samples: usize, seed: u64) -> Result<GaussianPrediction> {
    Ok(mc_predict_batch(params, &[x], samples, seed)?[0])
}

/// `0.5 log(2 pi var) + (y - mean)^2 / (2 var)`.
pub fn gaussian_nll(pred: &GaussianPrediction, target: f64) -> Result<f64> {
    if !(pred.variance > 0.0) {
        return Err(Error::Domain {
            op: "gaussian_nll",
            msg: format!("variance must be positive, got {}", pred.variance),
        });
    }
    let r = target - pred.mean;
    Ok(0.5 * (LOG_2PI + pred.variance.ln()) + r * r / (2.0 * pred.variance))
}

/// Element-wise Gaussian NLL node for equal-shaped `mean`, `var` and
/// `target` nodes.
pub fn gaussian_nll_node(tape: &mut Tape, mean: NodeId, var: NodeId, target: NodeId) -> Result<NodeId> {
    let log_var = tape.log(var)?;
    let half_log = tape.scale(log_var, 0.5);
    let c = tape.constant_scalar(0.5 * LOG_2PI);
    let norm = tape.add(half_log, c)?;
    let r = tape.sub(target, mean)?;
    let r2 = tape.mul(r, r)?;
    let two_var = tape.scale(var, 2.0);
    let quad = tape.div(r2, two_var)?;
    tape.add(norm, quad)
}

/// Variance range mapped onto certainty `1 .. 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceBounds {
    pub lo: f64,
    pub hi: f64,
}

impl VarianceBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::config(format!("variance bounds need lo < hi, got [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn certainty(&self, variance: f64) -> f64 {
        1.0 - (variance.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }
}

/// `(scale * |mean - y|, 1 - minmax(clamp(var)))` for plain numbers.
pub fn bnn_error_and_certainty_value(pred: &GaussianPrediction, target: f64, bounds: &VarianceBounds, error_scale: f64) -> Result<(f64, f64)> {
    bounds.validate()?;
    Ok((error_scale * (pred.mean - target).abs(), bounds.certainty(pred.variance)))
}

/// Differentiable error and certainty nodes for `B x 1` moments. The
/// absolute error is smoothed as `sqrt(r^2 + 1e-12)` to keep its gradient
/// finite at zero.
pub fn bnn_error_and_certainty(
    tape: &mut Tape,
    mean: NodeId,
    var: NodeId,
    target: NodeId,
    bounds: &VarianceBounds,
    error_scale: f64,
) -> Result<(NodeId, NodeId)> {
    bounds.validate()?;
    let r = tape.sub(mean, target)?;
    let r2 = tape.mul(r, r)?;
    let tiny = tape.constant_scalar(1e-12);
    let r2 = tape.add(r2, tiny)?;
    let abs = tape.sqrt(r2)?;
    let error = tape.scale(abs, error_scale);
    let clamped = tape.clamp(var, bounds.lo, bounds.hi)?;
    let lo = tape.constant_scalar(bounds.lo);
    let shifted = tape.sub(clamped, lo)?;
    let norm = tape.scale(shifted, 1.0 / (bounds.hi - bounds.lo));
    let one = tape.constant_scalar(1.0);
    let certainty = tape.sub(one, norm)?;
    Ok((error, certainty))
}
