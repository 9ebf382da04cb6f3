//! Gaussian encoder-decoder trajectory model.
//!
//! A two-layer feed-forward encoder maps the (normalized) context to the
//! initial hidden state of a GRU decoder. At every step the decoder consumes
//! the previous state, updates its hidden vector and emits a diagonal
//! Gaussian over the next displacement. The first decoder input is the zero
//! displacement.
//!
//! All tape-level functions work on batches: row `i` of every node belongs
//! to sample `i`, and rows never interact, so results for one sample do not
//! depend on what else is in the batch.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Shape, Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::trajectory::{PlanSet, Trajectory};

pub const STATE_DIM: usize = 2;
pub const CHECKPOINT_KIND: &str = "trajectory-model";
const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajModelConfig {
    pub context_dim: usize,
    pub horizon: usize,
    pub timestep: f64,
    pub hidden: usize,
    /// Bounds on each predicted log standard deviation.
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
}

impl Default for TrajModelConfig {
    fn default() -> Self {
        TrajModelConfig {
            context_dim: 20,
            horizon: 25,
            timestep: 0.2,
            hidden: 64,
            log_sigma_min: -5.0,
            log_sigma_max: 3.0,
        }
    }
}

impl TrajModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_dim == 0 || self.horizon == 0 || self.hidden == 0 {
            return Err(Error::config("model: context_dim, horizon and hidden must be >= 1"));
        }
        if !(self.timestep > 0.0) {
            return Err(Error::config("model: timestep must be > 0"));
        }
        if !(self.log_sigma_min < self.log_sigma_max) {
            return Err(Error::config("model: log_sigma_min must be < log_sigma_max"));
        }
        Ok(())
    }
}

const PARAM_NAMES: [&str; 17] = [
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur", "gru_br", "gru_wn",
    "gru_un", "gru_bn", "mu_w", "mu_b", "log_sigma_w", "log_sigma_b",
];

#[derive(Clone, Copy)]
enum P {
    EncW1,
    EncB1,
    EncW2,
    EncB2,
    Wz,
    Uz,
    Bz,
    Wr,
    Ur,
    Br,
    Wn,
    Un,
    Bn,
    MuW,
    MuB,
    LsW,
    LsB,
}

fn param_shapes(c: &TrajModelConfig) -> [Shape; 17] {
    let (cd, h, s) = (c.context_dim, c.hidden, STATE_DIM);
    [
        Shape::new(cd, h),
        Shape::new(1, h),
        Shape::new(h, h),
        Shape::new(1, h),
        Shape::new(s, h),
        Shape::new(h, h),
        Shape::new(1, h),
        Shape::new(s, h),
        Shape::new(h, h),
        Shape::new(1, h),
        Shape::new(s, h),
        Shape::new(h, h),
        Shape::new(1, h),
        Shape::new(h, s),
        Shape::new(1, s),
        Shape::new(h, s),
        Shape::new(1, s),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajModelParams {
    pub config: TrajModelConfig,
    /// Per-feature context normalization, not trained.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    tensors: Vec<Tensor>,
}

impl TrajModelParams {
    pub fn zeros(config: TrajModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(TrajModelParams {
            input_mean: vec![0.0; config.context_dim],
            input_std: vec![1.0; config.context_dim],
            tensors: param_shapes(&config).iter().map(|&s| Tensor::zeros(s)).collect(),
            config,
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(config: TrajModelConfig, seed: u64) -> Result<Self> {
        let mut params = TrajModelParams::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in params.tensors.iter_mut() {
            let shape = t.shape();
            if shape.rows == 1 {
                continue;
            }
            let bound = 1.0 / (shape.rows as f64).sqrt();
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        Ok(params)
    }

    /// Sets the context normalization from training contexts.
    pub fn fit_input_normalization(&mut self, contexts: &[&[f64]]) -> Result<()> {
        let dim = self.config.context_dim;
        if contexts.is_empty() {
            return Err(Error::input("normalization: no contexts"));
        }
        if let Some(c) = contexts.iter().find(|c| c.len() != dim) {
            return Err(Error::input(format!("normalization: context length {} != {dim}", c.len())));
        }
        let n = contexts.len() as f64;
        for j in 0..dim {
            let mean = contexts.iter().map(|c| c[j]).sum::<f64>() / n;
            let var = contexts.iter().map(|c| (c[j] - mean).powi(2)).sum::<f64>() / n;
            self.input_mean[j] = mean;
            self.input_std[j] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(())
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

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &self.tensors[i])
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::input(format!("unknown parameter '{name}'")))?;
        if value.shape() != self.tensors[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: self.tensors[i].shape(),
                rhs: value.shape(),
            });
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Registers every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let ids = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { ids, params: self }
    }

    fn normalized_contexts(&self, contexts: &[&[f64]]) -> Result<Tensor> {
        let dim = self.config.context_dim;
        let mut data = Vec::with_capacity(contexts.len() * dim);
        for c in contexts {
            if c.len() != dim {
                return Err(Error::input(format!("context length {} does not match model ({dim})", c.len())));
            }
            data.extend(c.iter().zip(self.input_mean.iter().zip(&self.input_std)).map(|(v, (m, s))| (v - m) / s));
        }
        Ok(Tensor::matrix(contexts.len(), dim, data))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(CHECKPOINT_KIND);
        ckpt.meta.push(("config".into(), serde_json::to_string(&self.config).expect("config serializes")));
        let dim = self.config.context_dim;
        ckpt.arrays.push(("input_mean".into(), Tensor::matrix(1, dim, self.input_mean.clone())));
        ckpt.arrays.push(("input_std".into(), Tensor::matrix(1, dim, self.input_std.clone())));
        for (name, t) in PARAM_NAMES.iter().zip(&self.tensors) {
            ckpt.arrays.push((name.to_string(), t.clone()));
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::input(format!("checkpoint holds a '{}', not a trajectory model", ckpt.kind)));
        }
        let config: TrajModelConfig = ckpt
            .meta("config")
            .ok_or_else(|| Error::input("checkpoint has no model config"))
            .and_then(|s| serde_json::from_str(s).map_err(|e| Error::input(format!("checkpoint config: {e}"))))?;
        let mut params = TrajModelParams::zeros(config)?;
        let fetch = |name: &str| ckpt.array(name).ok_or_else(|| Error::input(format!("checkpoint lacks array '{name}'")));
        let dim = params.config.context_dim;
        for (name, target) in [("input_mean", &mut params.input_mean), ("input_std", &mut params.input_std)] {
            let t = fetch(name)?;
            if t.len() != dim {
                return Err(Error::input(format!("checkpoint array '{name}' has {} values, expected {dim}", t.len())));
            }
            target.copy_from_slice(t.data());
        }
        for name in PARAM_NAMES {
            params.set(name, fetch(name)?.clone())?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrajModelParams::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Parameters registered on a tape.
pub struct Bound<'a> {
    ids: Vec<NodeId>,
    params: &'a TrajModelParams,
}

impl Bound<'_> {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn id(&self, p: P) -> NodeId {
        self.ids[p as usize]
    }

    pub fn config(&self) -> &TrajModelConfig {
        &self.params.config
    }
}

/// Per-step Gaussian nodes, each `B x 2`.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    pub mu: NodeId,
    pub log_sigma: NodeId,
    pub sigma: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianStep {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
}

struct Net<'t, 'b, 'p> {
    tape: &'t mut Tape,
    bound: &'b Bound<'p>,
    rows: usize,
    ones: NodeId,
    ones_state: NodeId,
}

impl<'t, 'b, 'p> Net<'t, 'b, 'p> {
    fn new(tape: &'t mut Tape, bound: &'b Bound<'p>, rows: usize) -> Self {
        let ones = tape.constant(Tensor::filled(Shape::new(rows, 1), 1.0));
        let ones_state = tape.constant(Tensor::filled(Shape::new(STATE_DIM, 1), 1.0));
        Net {
            tape,
            bound,
            rows,
            ones,
            ones_state,
        }
    }

    /// `x W + 1 b`, broadcasting the bias row over the batch.
    fn affine(&mut self, x: NodeId, w: P, b: P) -> Result<NodeId> {
        let xw = self.tape.matmul(x, self.bound.id(w))?;
        let bias = self.tape.matmul(self.ones, self.bound.id(b))?;
        self.tape.add(xw, bias)
    }

    fn encode(&mut self, contexts: &[&[f64]]) -> Result<NodeId> {
        let x = self.bound.params.normalized_contexts(contexts)?;
        let x = self.tape.constant(x);
        let h = self.affine(x, P::EncW1, P::EncB1)?;
        let h = self.tape.relu(h);
        let h = self.affine(h, P::EncW2, P::EncB2)?;
        Ok(self.tape.tanh(h))
    }

    fn gate(&mut self, x: NodeId, h: NodeId, w: P, u: P, b: P) -> Result<NodeId> {
        let xw = self.affine(x, w, b)?;
        let hu = self.tape.matmul(h, self.bound.id(u))?;
        self.tape.add(xw, hu)
    }

    fn gru(&mut self, x: NodeId, h: NodeId) -> Result<NodeId> {
        let z = self.gate(x, h, P::Wz, P::Uz, P::Bz)?;
        let z = self.tape.sigmoid(z);
        let r = self.gate(x, h, P::Wr, P::Ur, P::Br)?;
        let r = self.tape.sigmoid(r);
        let xn = self.affine(x, P::Wn, P::Bn)?;
        let hn = self.tape.matmul(h, self.bound.id(P::Un))?;
        let rhn = self.tape.mul(r, hn)?;
        let n = self.tape.add(xn, rhn)?;
        let n = self.tape.tanh(n);
        // (1 - z) * n + z * h
        let h_minus_n = self.tape.sub(h, n)?;
        let gated = self.tape.mul(z, h_minus_n)?;
        self.tape.add(n, gated)
    }

    fn head(&mut self, h: NodeId) -> Result<StepNodes> {
        let cfg = self.bound.config();
        let (lo, hi) = (cfg.log_sigma_min, cfg.log_sigma_max);
        let mu = self.affine(h, P::MuW, P::MuB)?;
        let raw = self.affine(h, P::LsW, P::LsB)?;
        let log_sigma = self.tape.clamp(raw, lo, hi)?;
        let sigma = self.tape.exp(log_sigma);
        Ok(StepNodes { mu, log_sigma, sigma })
    }

    /// Row-wise `log N(y | mu, diag(sigma^2))`, shape `B x 1`.
    fn log_density(&mut self, step: &StepNodes, y: NodeId) -> Result<NodeId> {
        let diff = self.tape.sub(y, step.mu)?;
        let z = self.tape.div(diff, step.sigma)?;
        let sq = self.tape.mul(z, z)?;
        let quad = self.tape.matmul(sq, self.ones_state)?;
        let quad = self.tape.scale(quad, -0.5);
        let log_det = self.tape.matmul(step.log_sigma, self.ones_state)?;
        let norm = self.tape.constant_scalar(-(STATE_DIM as f64) * 0.5 * LOG_2PI);
        let out = self.tape.sub(quad, log_det)?;
        self.tape.add(out, norm)
    }

    fn zero_state(&mut self) -> NodeId {
        self.tape.constant(Tensor::zeros(Shape::new(self.rows, STATE_DIM)))
    }
}

fn states_tensor(targets: &[&Trajectory], t: usize) -> Tensor {
    let data = targets.iter().flat_map(|tr| tr.states()[t]).collect();
    Tensor::matrix(targets.len(), STATE_DIM, data)
}

fn check_finite(tape: &Tape, node: NodeId, step: usize) -> Result<()> {
    if tape.value(node).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLikelihood { step })
    }
}

/// Teacher-forced pass over a batch.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    pub steps: Vec<StepNodes>,
    /// Per-sample trajectory log-likelihood, `B x 1`.
    pub loglik: NodeId,
}

/// Runs the decoder on the ground-truth previous states and sums the
/// per-step Gaussian log-densities of the targets.
pub fn teacher_forced_nodes(tape: &mut Tape, bound: &Bound, contexts: &[&[f64]], targets: &[&Trajectory]) -> Result<TeacherForced> {
    let horizon = bound.config().horizon;
    if contexts.len() != targets.len() || contexts.is_empty() {
        return Err(Error::input("teacher forcing: need one non-empty target per context"));
    }
    if let Some(t) = targets.iter().find(|t| t.horizon() != horizon) {
        return Err(Error::input(format!("target horizon {} does not match model ({horizon})", t.horizon())));
    }
    let mut net = Net::new(tape, bound, contexts.len());
    let mut h = net.encode(contexts)?;
    let mut prev = net.zero_state();
    let mut steps = Vec::with_capacity(horizon);
    let mut loglik = None;
    for t in 0..horizon {
        h = net.gru(prev, h)?;
        let step = net.head(h)?;
        let y = net.tape.constant(states_tensor(targets, t));
        let lp = net.log_density(&step, y)?;
        check_finite(net.tape, lp, t)?;
        loglik = Some(match loglik {
            None => lp,
            Some(acc) => net.tape.add(acc, lp)?,
        });
        steps.push(step);
        prev = y;
    }
    Ok(TeacherForced {
        steps,
        loglik: loglik.expect("horizon >= 1"),
    })
}

/// Log-density of externally supplied trajectory nodes (`B x 2` per step)
/// under the Gaussians of a teacher-forced pass.
pub fn loglik_under(tape: &mut Tape, bound: &Bound, steps: &[StepNodes], states: &[NodeId]) -> Result<NodeId> {
    if steps.len() != states.len() || steps.is_empty() {
        return Err(Error::input("loglik_under: step counts differ"));
    }
    let rows = tape.shape(states[0]).rows;
    let mut net = Net::new(tape, bound, rows);
    let mut acc: Option<NodeId> = None;
    for (t, (step, &y)) in steps.iter().zip(states).enumerate() {
        let lp = net.log_density(step, y)?;
        check_finite(net.tape, lp, t)?;
        acc = Some(match acc {
            None => lp,
            Some(a) => net.tape.add(a, lp)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Autoregressive reparameterized rollout over a batch.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Sampled states, `B x 2` per step.
    pub states: Vec<NodeId>,
    pub steps: Vec<StepNodes>,
    /// Per-sample log-likelihood of the sampled trajectory, `B x 1`.
    pub loglik: NodeId,
}

/// `noise[t]` is a `B x 2` matrix of standard-normal draws for step `t`.
/// Each sampled state is `mu + sigma * noise` and is fed back as the next
/// decoder input.
pub fn sample_rollout(tape: &mut Tape, bound: &Bound, contexts: &[&[f64]], noise: &[Tensor]) -> Result<Rollout> {
    let horizon = bound.config().horizon;
    if noise.len() != horizon {
        return Err(Error::input(format!("rollout: {} noise steps for horizon {horizon}", noise.len())));
    }
    let mut net = Net::new(tape, bound, contexts.len());
    let mut h = net.encode(contexts)?;
    let mut prev = net.zero_state();
    let mut states = Vec::with_capacity(horizon);
    let mut steps = Vec::with_capacity(horizon);
    let mut loglik: Option<NodeId> = None;
    for (t, eps) in noise.iter().enumerate() {
        if eps.shape() != Shape::new(contexts.len(), STATE_DIM) {
            return Err(Error::input(format!("rollout: noise for step {t} has shape {}", eps.shape())));
        }
        h = net.gru(prev, h)?;
        let step = net.head(h)?;
        let eps = net.tape.constant(eps.clone());
        let offset = net.tape.mul(step.sigma, eps)?;
        let y = net.tape.add(step.mu, offset)?;
        let lp = net.log_density(&step, y)?;
        check_finite(net.tape, lp, t)?;
        loglik = Some(match loglik {
            None => lp,
            Some(acc) => net.tape.add(acc, lp)?,
        });
        states.push(y);
        steps.push(step);
        prev = y;
    }
    Ok(Rollout {
        states,
        steps,
        loglik: loglik.expect("horizon >= 1"),
    })
}

/// Standard-normal draws for a rollout, step-major then row-major.
pub fn draw_noise(rng: &mut impl Rng, rows: usize, horizon: usize) -> Vec<Tensor> {
    (0..horizon)
        .map(|_| Tensor::matrix(rows, STATE_DIM, (0..rows * STATE_DIM).map(|_| rng.sample(StandardNormal)).collect()))
        .collect()
}

/// Deterministic latent for one context.
pub fn encode(params: &TrajModelParams, context: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let mut net = Net::new(&mut tape, &bound, 1);
    let h = net.encode(&[context])?;
    Ok(tape.value(h).data().to_vec())
}

/// Per-step Gaussians and the teacher-forced log-likelihood of `target`.
pub fn teacher_forced_loglik(params: &TrajModelParams, context: &[f64], target: &Trajectory) -> Result<(Vec<GaussianStep>, f64)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let tf = teacher_forced_nodes(&mut tape, &bound, &[context], &[target])?;
    let steps = tf
        .steps
        .iter()
        .map(|s| {
            let (mu, sigma) = (tape.value(s.mu).data(), tape.value(s.sigma).data());
            GaussianStep {
                mu: [mu[0], mu[1]],
                sigma: [sigma[0], sigma[1]],
            }
        })
        .collect();
    Ok((steps, tape.scalar(tf.loglik)))
}

/// A sampled trajectory and its log-likelihood under the sampling model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrajectory {
    pub trajectory: Trajectory,
    pub loglik: f64,
}

fn rows_to_trajectories(tape: &Tape, states: &[NodeId], rows: usize, timestep: f64) -> Result<Vec<Trajectory>> {
    (0..rows)
        .map(|r| {
            let s = states.iter().map(|&n| {
                let d = tape.value(n).data();
                [d[r * STATE_DIM], d[r * STATE_DIM + 1]]
            });
            Trajectory::new(s.collect(), timestep)
        })
        .collect()
}

/// `g` samples for each context; scene `i` draws its noise from `seeds[i]`
/// only, so the result for a scene does not depend on the batch.
pub fn sample_plans_batch(params: &TrajModelParams, contexts: &[&[f64]], g: usize, seeds: &[u64]) -> Result<Vec<Vec<ScoredTrajectory>>> {
    if g == 0 {
        return Err(Error::input("sample count G must be >= 1"));
    }
    if contexts.len() != seeds.len() {
        return Err(Error::input("one seed per context required"));
    }
    if contexts.is_empty() {
        return Ok(Vec::new());
    }
    let horizon = params.config.horizon;
    let rows = contexts.len() * g;
    let mut noise: Vec<Vec<f64>> = vec![Vec::with_capacity(rows * STATE_DIM); horizon];
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for step in draw_noise(&mut rng, g, horizon).into_iter().zip(noise.iter_mut()) {
            step.1.extend_from_slice(step.0.data());
        }
    }
    let noise: Vec<Tensor> = noise.into_iter().map(|d| Tensor::matrix(rows, STATE_DIM, d)).collect();
    let repeated: Vec<&[f64]> = contexts.iter().flat_map(|c| std::iter::repeat_n(*c, g)).collect();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let rollout = sample_rollout(&mut tape, &bound, &repeated, &noise)?;
    let trajs = rows_to_trajectories(&tape, &rollout.states, rows, params.config.timestep)?;
    let ll = tape.value(rollout.loglik).data();
    let mut scored: Vec<ScoredTrajectory> = trajs
        .into_iter()
        .zip(ll)
        .map(|(trajectory, &loglik)| ScoredTrajectory { trajectory, loglik })
        .collect();
    let mut out = Vec::with_capacity(contexts.len());
    while !scored.is_empty() {
        let rest = scored.split_off(g);
        out.push(std::mem::replace(&mut scored, rest));
    }
    Ok(out)
}

pub fn sample_plans(params: &TrajModelParams, context: &[f64], g: usize, seed: u64) -> Result<Vec<ScoredTrajectory>> {
    Ok(sample_plans_batch(params, &[context], g, &[seed])?.remove(0))
}

/// Log-likelihood of each trajectory under the model, decoding with the
/// trajectory's own previous states.
pub fn score_trajectories(params: &TrajModelParams, context: &[f64], trajectories: &[&Trajectory]) -> Result<Vec<f64>> {
    if trajectories.is_empty() {
        return Ok(Vec::new());
    }
    let contexts = vec![context; trajectories.len()];
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let tf = teacher_forced_nodes(&mut tape, &bound, &contexts, trajectories)?;
    Ok(tape.value(tf.loglik).data().to_vec())
}

/// The `d` highest-scored samples in descending order (ties keep sample
/// order) with `U = -mean` of their scores.
pub fn top_d_plans(samples: &[ScoredTrajectory], d: usize) -> Result<PlanSet> {
    if d == 0 || d > samples.len() {
        return Err(Error::input(format!("cannot select D={d} plans from {} samples", samples.len())));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].loglik.total_cmp(&samples[a].loglik));
    order.truncate(d);
    let certainties: Vec<f64> = order.iter().map(|&i| samples[i].loglik).collect();
    let uncertainty = -certainties.iter().sum::<f64>() / d as f64;
    Ok(PlanSet {
        plans: order.iter().map(|&i| samples[i].trajectory.clone()).collect(),
        certainties,
        uncertainty,
    })
}

/// Pools the samples of every member, rescores each trajectory by its mean
/// log-likelihood across members and selects the top `d`.
/// `samples[k]` must come from `members[k]`; its stored scores are reused.
pub fn ensemble_aggregate(members: &[TrajModelParams], context: &[f64], samples: &[Vec<ScoredTrajectory>], d: usize) -> Result<PlanSet> {
    if members.is_empty() || members.len() != samples.len() {
        return Err(Error::input("ensemble: need one sample set per member"));
    }
    let horizon = members[0].config.horizon;
    if members.iter().any(|m| m.config.horizon != horizon)
        || samples.iter().flatten().any(|s| s.trajectory.horizon() != horizon)
    {
        return Err(Error::input("ensemble: members and samples must share one horizon"));
    }
    if members.len() == 1 {
        return top_d_plans(&samples[0], d);
    }
    let k = members.len() as f64;
    let mut pooled = Vec::new();
    for (owner, own) in samples.iter().enumerate() {
        let trajs: Vec<&Trajectory> = own.iter().map(|s| &s.trajectory).collect();
        let mut totals = vec![0.0; own.len()];
        for (j, member) in members.iter().enumerate() {
            let scores = if j == owner {
                own.iter().map(|s| s.loglik).collect()
            } else {
                score_trajectories(member, context, &trajs)?
            };
            totals.iter_mut().zip(scores).for_each(|(t, s)| *t += s);
        }
        pooled.extend(own.iter().zip(totals).map(|(s, t)| ScoredTrajectory {
            trajectory: s.trajectory.clone(),
            loglik: t / k,
        }));
    }
    top_d_plans(&pooled, d)
}
