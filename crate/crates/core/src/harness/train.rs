//! Training loops for both tasks.
//!
//! Random streams are split by purpose: batch order, training-time sampling
//! (rollout noise or dropout masks) and evaluation each get their own, so a
//! change in one never shifts the others. In particular runs that differ
//! only in calibration settings see identical batches.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Shape, Tape, Tensor};
use crate::bnn_model::{
    gaussian_nll, gaussian_nll_node, mc_predict_batch, predictive_moments, stochastic_passes, BnnConfig, BnnParams,
    GaussianPrediction, VarianceBounds, bnn_error_and_certainty,
};
use crate::calib_metrics::percentile;
use crate::datasets::RegressionTable;
use crate::eau_loss::{eau_measure, eauc_loss, postprocess_certainty, scale_ade, soft_counts, total_loss, HardCounts};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::data::TrajectoryData;
use crate::harness::optim::{clip_global_norm, learning_rate, Optimizer, OptimizerKind};
use crate::traj_model::{draw_noise, loglik_under, sample_rollout, teacher_forced_nodes, TrajModelConfig, TrajModelParams};
use crate::trajectory::{SceneSample, Trajectory};

const SHUFFLE_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the last step of the epoch.
    pub learning_rate: f64,
    /// Batch means of the primary negative log-likelihood.
    pub primary: f64,
    /// Batch means of the calibration loss; absent when the calibration
    /// graph is disabled.
    pub eauc: Option<f64>,
    pub total: f64,
    /// Hard class counts over the epoch and the resulting EaU measure.
    pub counts: Option<HardCounts>,
    pub eau: Option<f64>,
    /// Whether the calibration term entered the objective this epoch.
    pub calibration_active: bool,
    pub validation_nll: Option<f64>,
    pub validation_rmse: Option<f64>,
    /// Excluded from serialized logs so they stay reproducible.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept as the best-validation checkpoint.
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn primary_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.primary).collect()
    }

    pub fn wall_clock_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_clock_seconds).sum()
    }
}

#[derive(Debug, Default)]
struct EpochAccumulator {
    primary: f64,
    eauc: f64,
    total: f64,
    batches: usize,
    counts: HardCounts,
    calibrated: bool,
}

impl EpochAccumulator {
    fn add_counts(&mut self, c: HardCounts) {
        self.counts.lc += c.lc;
        self.counts.lu += c.lu;
        self.counts.hc += c.hc;
        self.counts.hu += c.hu;
    }

    fn finish(self, epoch: usize, lr: f64, active: bool, started: Instant) -> Result<EpochLog> {
        let n = self.batches.max(1) as f64;
        Ok(EpochLog {
            epoch,
            learning_rate: lr,
            primary: self.primary / n,
            eauc: self.calibrated.then_some(self.eauc / n),
            total: self.total / n,
            counts: self.calibrated.then_some(self.counts),
            eau: if self.calibrated { Some(eau_measure(&self.counts)?) } else { None },
            calibration_active: active,
            validation_nll: None,
            validation_rmse: None,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Step bookkeeping shared by both loops.
struct Stepper {
    opt: Optimizer,
    step: usize,
    warmup: usize,
    total: usize,
}

impl Stepper {
    fn new(kind: OptimizerKind, cfg: &ExperimentConfig, params: &[Tensor], n_train: usize) -> Self {
        let per_epoch = n_train.div_ceil(cfg.optim.batch_size);
        Stepper {
            opt: Optimizer::new(kind, &cfg.optim, params),
            step: 0,
            warmup: cfg.optim.warmup_epochs * per_epoch,
            total: cfg.optim.epochs * per_epoch,
        }
    }

    fn apply(&mut self, cfg: &ExperimentConfig, tape: &mut Tape, root: NodeId, ids: &[NodeId], params: &mut [Tensor]) -> Result<f64> {
        self.step += 1;
        let lr = learning_rate(cfg.optim.schedule, cfg.optim.learning_rate, self.step, self.warmup, self.total);
        let grads = tape.backward(root)?;
        let mut g: Vec<Tensor> = ids
            .iter()
            .zip(params.iter())
            .map(|(id, p)| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        clip_global_norm(&mut g, cfg.optim.grad_clip);
        self.opt.step(params, &g, lr)?;
        Ok(lr)
    }
}

fn diverged_on_nonfinite(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFiniteLikelihood { .. } => Error::Diverged {
            epoch,
            batch,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn check_loss(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, batch, loss })
    }
}

/// Final and best-validation parameters with the log.
#[derive(Debug, Clone)]
pub struct Trained<P> {
    pub final_params: P,
    pub best_params: P,
    pub log: TrainingLog,
}

pub fn trajectory_model_config(cfg: &ExperimentConfig, data: &TrajectoryData) -> TrajModelConfig {
    TrajModelConfig {
        context_dim: data.layout.context_dim,
        horizon: data.layout.horizon,
        timestep: data.layout.timestep,
        hidden: cfg.model.hidden,
        log_sigma_min: cfg.model.log_sigma_min,
        log_sigma_max: cfg.model.log_sigma_max,
    }
}

/// Per-sample `mean_t sqrt(|a_t - b_t|^2 + tiny)` for `B x 2` step nodes.
pub(crate) fn ade_node(tape: &mut Tape, pred: &[NodeId], truth: &[NodeId]) -> Result<NodeId> {
    let ones = tape.constant(Tensor::filled(Shape::new(2, 1), 1.0));
    let tiny = tape.constant_scalar(1e-12);
    let mut acc: Option<NodeId> = None;
    for (&p, &y) in pred.iter().zip(truth) {
        let d = tape.sub(p, y)?;
        let sq = tape.mul(d, d)?;
        let row = tape.matmul(sq, ones)?;
        let row = tape.add(row, tiny)?;
        let dist = tape.sqrt(row)?;
        acc = Some(match acc {
            None => dist,
            Some(a) => tape.add(a, dist)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::input("ade: empty horizon"))?;
    Ok(tape.scale(acc, 1.0 / pred.len() as f64))
}

pub(crate) fn state_nodes(tape: &mut Tape, targets: &[&Trajectory]) -> Vec<NodeId> {
    let horizon = targets[0].horizon();
    (0..horizon)
        .map(|t| {
            let data = targets.iter().flat_map(|tr| tr.states()[t]).collect();
            tape.constant(Tensor::matrix(targets.len(), 2, data))
        })
        .collect()
}

/// Mean per-scene negative teacher-forced log-likelihood.
pub fn trajectory_nll(params: &TrajModelParams, scenes: &[SceneSample], batch: usize) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::input("no scenes to score"));
    }
    let mut sum = 0.0;
    for chunk in scenes.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let ctx: Vec<&[f64]> = chunk.iter().map(|s| s.context.as_slice()).collect();
        let tgt: Vec<&Trajectory> = chunk.iter().map(|s| &s.target).collect();
        let tf = teacher_forced_nodes(&mut tape, &bound, &ctx, &tgt)?;
        sum -= tape.value(tf.loglik).data().iter().sum::<f64>();
    }
    Ok(sum / scenes.len() as f64)
}

/// Trains the trajectory model. Per batch: teacher-forced likelihood for the
/// primary loss; one reparameterized rollout per scene gives the error
/// `ade_i` and, scored under the teacher-forced Gaussians, the certainty
/// `c_i`; both feed the calibration loss.
pub fn train_trajectory(cfg: &ExperimentConfig, data: &TrajectoryData, seed: u64) -> Result<Trained<TrajModelParams>> {
    cfg.optim.validate()?;
    cfg.eauc.loss.validate()?;
    if data.train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    let mut params = TrajModelParams::init(trajectory_model_config(cfg, data), seed)?;
    let contexts: Vec<&[f64]> = data.train.iter().map(|s| s.context.as_slice()).collect();
    params.fit_input_normalization(&contexts)?;

    let mut stepper = Stepper::new(OptimizerKind::AdamW, cfg, params.tensors(), data.train.len());
    let mut shuffle_rng = stream_rng(seed, SHUFFLE_STREAM);
    let mut sample_rng = stream_rng(seed, SAMPLING_STREAM);
    let loss_cfg = &cfg.eauc.loss;
    let horizon = data.layout.horizon;
    let mut log = TrainingLog {
        seed,
        ..TrainingLog::default()
    };
    let mut best: Option<(f64, TrajModelParams)> = None;

    for epoch in 1..=cfg.optim.epochs {
        let started = Instant::now();
        let active = cfg.eauc.enabled && epoch >= cfg.eauc.start_epoch;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut acc = EpochAccumulator {
            calibrated: cfg.eauc.enabled,
            ..EpochAccumulator::default()
        };
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            let batch_no = b + 1;
            let ctx: Vec<&[f64]> = chunk.iter().map(|&i| data.train[i].context.as_slice()).collect();
            let tgt: Vec<&Trajectory> = chunk.iter().map(|&i| &data.train[i].target).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let ids = bound.ids().to_vec();
            let graph = (|| -> Result<(NodeId, f64, Option<(f64, HardCounts)>)> {
                let tf = teacher_forced_nodes(&mut tape, &bound, &ctx, &tgt)?;
                let mean_ll = tape.mean(tf.loglik);
                let primary = tape.neg(mean_ll);
                if !cfg.eauc.enabled {
                    return Ok((primary, tape.scalar(primary), None));
                }
                let noise = draw_noise(&mut sample_rng, chunk.len(), horizon);
                let roll = sample_rollout(&mut tape, &bound, &ctx, &noise)?;
                let truth = state_nodes(&mut tape, &tgt);
                let raw_ade = ade_node(&mut tape, &roll.states, &truth)?;
                let raw_c = loglik_under(&mut tape, &bound, &tf.steps, &roll.states)?;
                let ade = scale_ade(&mut tape, raw_ade, loss_cfg);
                let cert = postprocess_certainty(&mut tape, raw_c, loss_cfg)?;
                let counts = HardCounts::from_samples(tape.value(ade).data(), tape.value(cert).data(), loss_cfg);
                let soft = soft_counts(&mut tape, ade, cert, loss_cfg)?;
                let eauc = eauc_loss(&mut tape, &soft, loss_cfg)?;
                let root = if active { total_loss(&mut tape, primary, eauc, loss_cfg)? } else { primary };
                Ok((root, tape.scalar(primary), Some((tape.scalar(eauc), counts))))
            })();
            let (root, primary, calib) = graph.map_err(|e| diverged_on_nonfinite(e, epoch, batch_no))?;
            let total = tape.scalar(root);
            check_loss(total, epoch, batch_no)?;
            acc.primary += primary;
            acc.total += total;
            acc.batches += 1;
            if let Some((e, c)) = calib {
                acc.eauc += e;
                acc.add_counts(c);
            }
            lr = stepper.apply(cfg, &mut tape, root, &ids, params.tensors_mut())?;
        }
        if !params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: acc.batches,
                loss: f64::NAN,
            });
        }
        let mut entry = acc.finish(epoch, lr, active, started)?;
        if !data.validation.is_empty() {
            let nll = trajectory_nll(&params, &data.validation, 64).map_err(|e| diverged_on_nonfinite(e, epoch, 0))?;
            entry.validation_nll = Some(nll);
        }
        let score = entry.validation_nll.unwrap_or(entry.primary);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, params.clone()));
            log.best_epoch = epoch;
        }
        entry.wall_clock_seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: primary {:.4} eauc {:?} eau {:?} val_nll {:?} ({:.1}s)",
            entry.primary,
            entry.eauc,
            entry.eau,
            entry.validation_nll,
            entry.wall_clock_seconds
        );
        log.epochs.push(entry);
    }
    let best_params = best.map(|(_, p)| p).expect("at least one epoch");
    Ok(Trained {
        final_params: params,
        best_params,
        log,
    })
}

/// Trained regression network plus what evaluation needs to interpret it.
#[derive(Debug, Clone)]
pub struct TrainedBnn {
    pub trained: Trained<BnnParams>,
    /// Variance range (standardized units) used by the calibration term.
    pub bounds: Option<VarianceBounds>,
}

fn standardized_targets(table: &RegressionTable, y: &[f64]) -> Vec<f64> {
    y.iter().map(|v| (v - table.stats.target_mean) / table.stats.target_std).collect()
}

/// Predictions in original target units.
pub fn predict_original(params: &BnnParams, table: &RegressionTable, xs: &[Vec<f64>], samples: usize, seed: u64) -> Result<Vec<GaussianPrediction>> {
    let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let s = table.stats.target_std;
    Ok(mc_predict_batch(params, &rows, samples, seed)?
        .into_iter()
        .map(|p| GaussianPrediction {
            mean: p.mean * s + table.stats.target_mean,
            variance: p.variance * s * s,
        })
        .collect())
}

/// `(mean NLL, RMSE)` in original target units.
pub fn regression_scores(preds: &[GaussianPrediction], y: &[f64]) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != y.len() {
        return Err(Error::input("regression scores: predictions and targets differ in length"));
    }
    let n = y.len() as f64;
    let mut nll = 0.0;
    let mut se = 0.0;
    for (p, &t) in preds.iter().zip(y) {
        nll += gaussian_nll(p, t)?;
        se += (p.mean - t) * (p.mean - t);
    }
    Ok((nll / n, (se / n).sqrt()))
}

fn variance_bounds_from(params: &BnnParams, table: &RegressionTable, cfg: &ExperimentConfig, seed: u64) -> Result<VarianceBounds> {
    let rows: Vec<&[f64]> = table.train.x.iter().map(Vec::as_slice).collect();
    let preds = mc_predict_batch(params, &rows, cfg.inference.mc_samples, seed)?;
    let vars: Vec<f64> = preds.iter().map(|p| p.variance).collect();
    let (plo, phi) = cfg.regression.variance_percentiles;
    let lo = percentile(&vars, plo)?;
    let mut hi = percentile(&vars, phi)?;
    if !(hi > lo) {
        hi = lo * (1.0 + 1e-6) + 1e-12;
    }
    Ok(VarianceBounds { lo, hi })
}

/// Trains the dropout network with plain gradient descent on standardized
/// targets. The primary loss averages the Gaussian NLL of each stochastic
/// pass; the calibration term uses the predictive moments of the passes.
/// Unless fixed in the config, the variance range is set from percentiles
/// of training-set predictive variance just before calibration starts.
pub fn train_regression(cfg: &ExperimentConfig, table: &RegressionTable, seed: u64) -> Result<TrainedBnn> {
    cfg.optim.validate()?;
    cfg.eauc.loss.validate()?;
    if table.train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    let bnn_cfg = BnnConfig {
        input_dim: table.feature_names.len(),
        hidden: cfg.bnn.hidden,
        dropout: cfg.bnn.dropout,
        init_noise_std: cfg.bnn.init_noise_std,
    };
    let mut params = BnnParams::init(bnn_cfg, seed)?;
    let mut stepper = Stepper::new(OptimizerKind::Sgd, cfg, params.tensors(), table.train.len());
    let mut shuffle_rng = stream_rng(seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream_rng(seed, SAMPLING_STREAM);
    let ys = standardized_targets(table, &table.train.y);
    let loss_cfg = &cfg.eauc.loss;
    let passes_n = cfg.regression.train_passes;
    let mut bounds = match (cfg.regression.variance_lo, cfg.regression.variance_hi) {
        (Some(lo), Some(hi)) => {
            let b = VarianceBounds { lo, hi };
            b.validate()?;
            Some(b)
        }
        _ => None,
    };
    let mut log = TrainingLog {
        seed,
        ..TrainingLog::default()
    };
    let mut best: Option<(f64, BnnParams)> = None;
    let eval_seed = cfg.inference.seed;

    for epoch in 1..=cfg.optim.epochs {
        let started = Instant::now();
        let active = cfg.eauc.enabled && epoch >= cfg.eauc.start_epoch;
        if cfg.eauc.enabled && bounds.is_none() && epoch == cfg.eauc.start_epoch {
            bounds = Some(variance_bounds_from(&params, table, cfg, eval_seed)?);
        }
        let mut order: Vec<usize> = (0..table.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let calibrated = cfg.eauc.enabled && bounds.is_some();
        let mut acc = EpochAccumulator {
            calibrated,
            ..EpochAccumulator::default()
        };
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            let batch_no = b + 1;
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| table.train.x[i].as_slice()).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let ids = bound.ids().to_vec();
            let y = tape.constant(Tensor::vector(chunk.iter().map(|&i| ys[i]).collect()));
            let passes = stochastic_passes(&mut tape, &bound, &xs, passes_n, &mut dropout_rng)?;
            let two_log = tape.scale(bound.log_noise_std(), 2.0);
            let noise_var = tape.exp(two_log);
            let mut nll_sum: Option<NodeId> = None;
            for &p in &passes {
                let nll = gaussian_nll_node(&mut tape, p, noise_var, y)?;
                let m = tape.mean(nll);
                nll_sum = Some(match nll_sum {
                    None => m,
                    Some(a) => tape.add(a, m)?,
                });
            }
            let primary = tape.scale(nll_sum.expect("passes >= 1"), 1.0 / passes_n as f64);
            let mut root = primary;
            if let (true, Some(vb)) = (calibrated, bounds.as_ref()) {
                let (mean, var) = predictive_moments(&mut tape, &bound, &passes)?;
                let (err, cert) = bnn_error_and_certainty(&mut tape, mean, var, y, vb, loss_cfg.ade_scale)?;
                let counts = HardCounts::from_samples(tape.value(err).data(), tape.value(cert).data(), loss_cfg);
                let soft = soft_counts(&mut tape, err, cert, loss_cfg)?;
                let eauc = eauc_loss(&mut tape, &soft, loss_cfg)?;
                acc.eauc += tape.scalar(eauc);
                acc.add_counts(counts);
                if active {
                    root = total_loss(&mut tape, primary, eauc, loss_cfg)?;
                }
            }
            let total = tape.scalar(root);
            check_loss(total, epoch, batch_no)?;
            acc.primary += tape.scalar(primary);
            acc.total += total;
            acc.batches += 1;
            lr = stepper.apply(cfg, &mut tape, root, &ids, params.tensors_mut())?;
        }
        if !params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: acc.batches,
                loss: f64::NAN,
            });
        }
        let mut entry = acc.finish(epoch, lr, active, started)?;
        if !table.validation.is_empty() {
            let preds = predict_original(&params, table, &table.validation.x, cfg.inference.mc_samples, eval_seed)?;
            let (nll, rmse) = regression_scores(&preds, &table.validation.y)?;
            entry.validation_nll = Some(nll);
            entry.validation_rmse = Some(rmse);
        }
        let score = entry.validation_nll.unwrap_or(entry.primary);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, params.clone()));
            log.best_epoch = epoch;
        }
        entry.wall_clock_seconds = started.elapsed().as_secs_f64();
        log.epochs.push(entry);
    }
    let best_params = best.map(|(_, p)| p).expect("at least one epoch");
    Ok(TrainedBnn {
        trained: Trained {
            final_params: params,
            best_params,
            log,
        },
        bounds,
    })
}
