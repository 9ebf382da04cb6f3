//! Threshold suggestions from a short uncalibrated warmup, and grid search
//! over calibration settings.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::bnn_model::{mc_predict_batch, BnnParams, VarianceBounds};
use crate::calib_metrics::{evaluation_report, percentile};
use crate::datasets::RegressionTable;
use crate::eau_loss::{postprocess_certainty_value, scale_ade_value, EaucConfig};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Task};
use crate::harness::data::{load_table, TrajectoryData};
use crate::harness::evaluate::{evaluate_regression, evaluate_trajectory};
use crate::harness::train::{ade_node, state_nodes, stream_rng, train_regression, train_trajectory, TrainingLog};
use crate::traj_model::{draw_noise, loglik_under, sample_rollout, teacher_forced_nodes, TrajModelParams};
use crate::trajectory::{SceneSample, Trajectory};

/// Percentiles reported by the scan.
pub const SCAN_PERCENTILES: [f64; 9] = [0.0, 5.0, 10.0, 25.0, 50.0, 75.0, 90.0, 95.0, 100.0];

const SCAN_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub percentile: f64,
    pub value: f64,
}

pub fn percentile_table(values: &[f64]) -> Result<Vec<PercentileRow>> {
    SCAN_PERCENTILES
        .iter()
        .map(|&q| Ok(PercentileRow { percentile: q, value: percentile(values, q)? }))
        .collect()
}

/// Advisory settings; nothing applies them automatically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSuggestion {
    /// Threshold on the scaled error.
    pub ade_th: f64,
    /// Threshold on normalized certainty under the suggested range.
    pub c_th: f64,
    /// Trajectory task: clip range for raw log-likelihoods. Regression:
    /// variance range for the certainty mapping.
    pub range_lo: f64,
    pub range_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupScan {
    pub task: Task,
    pub warmup_epochs: usize,
    pub samples: usize,
    /// Scaled per-sample error (ADE for trajectories, absolute error in
    /// standardized units for regression).
    pub error: Vec<PercentileRow>,
    /// Raw per-sample certainty source: trajectory log-likelihood or
    /// predictive variance.
    pub certainty_source: Vec<PercentileRow>,
    pub suggestion: ThresholdSuggestion,
    pub log: TrainingLog,
}

/// Raw `(ade, loglik)` per scene from one reparameterized rollout scored
/// under the teacher-forced density, as used by the training objective.
pub fn rollout_statistics(params: &TrajModelParams, scenes: &[SceneSample], batch: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = stream_rng(seed, SCAN_STREAM);
    let (mut ades, mut logliks) = (Vec::with_capacity(scenes.len()), Vec::with_capacity(scenes.len()));
    for chunk in scenes.chunks(batch.max(1)) {
        let ctx: Vec<&[f64]> = chunk.iter().map(|s| s.context.as_slice()).collect();
        let tgt: Vec<&Trajectory> = chunk.iter().map(|s| &s.target).collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let tf = teacher_forced_nodes(&mut tape, &bound, &ctx, &tgt)?;
        let noise = draw_noise(&mut rng, chunk.len(), params.config.horizon);
        let roll = sample_rollout(&mut tape, &bound, &ctx, &noise)?;
        let truth = state_nodes(&mut tape, &tgt);
        let a = ade_node(&mut tape, &roll.states, &truth)?;
        let c = loglik_under(&mut tape, &bound, &tf.steps, &roll.states)?;
        ades.extend_from_slice(tape.value(a).data());
        logliks.extend_from_slice(tape.value(c).data());
    }
    Ok((ades, logliks))
}

/// `(floor(min), ceil(max))`, widened by one when they coincide.
fn outward_range(values: &[f64]) -> Result<(f64, f64)> {
    let lo = percentile(values, 0.0)?.floor();
    let mut hi = percentile(values, 100.0)?.ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    Ok((lo, hi))
}

fn suggest_trajectory(ades: &[f64], logliks: &[f64], cfg: &ExperimentConfig) -> Result<ThresholdSuggestion> {
    let scaled: Vec<f64> = ades.iter().map(|&a| scale_ade_value(a, &cfg.eauc.loss)).collect();
    let (lo, hi) = outward_range(logliks)?;
    let range_cfg = EaucConfig {
        c_clip_lo: lo,
        c_clip_hi: hi,
        ..cfg.eauc.loss.clone()
    };
    let norm: Vec<f64> = logliks.iter().map(|&c| postprocess_certainty_value(c, &range_cfg)).collect();
    Ok(ThresholdSuggestion {
        ade_th: percentile(&scaled, cfg.scan.ade_percentile)?,
        c_th: percentile(&norm, cfg.scan.c_percentile)?,
        range_lo: lo,
        range_hi: hi,
    })
}

fn regression_statistics(params: &BnnParams, table: &RegressionTable, cfg: &ExperimentConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows: Vec<&[f64]> = table.train.x.iter().map(Vec::as_slice).collect();
    let preds = mc_predict_batch(params, &rows, cfg.inference.mc_samples, cfg.inference.seed)?;
    let errs = preds
        .iter()
        .zip(&table.train.y)
        .map(|(p, &y)| {
            let y_std = (y - table.stats.target_mean) / table.stats.target_std;
            scale_ade_value((p.mean - y_std).abs(), &cfg.eauc.loss)
        })
        .collect();
    Ok((errs, preds.iter().map(|p| p.variance).collect()))
}

fn suggest_regression(errors: &[f64], variances: &[f64], cfg: &ExperimentConfig) -> Result<ThresholdSuggestion> {
    let (plo, phi) = cfg.regression.variance_percentiles;
    let lo = percentile(variances, plo)?;
    let mut hi = percentile(variances, phi)?;
    if hi <= lo {
        hi = lo * (1.0 + 1e-6) + 1e-12;
    }
    let bounds = VarianceBounds { lo, hi };
    let certs: Vec<f64> = variances.iter().map(|&v| bounds.certainty(v)).collect();
    Ok(ThresholdSuggestion {
        ade_th: percentile(errors, cfg.scan.ade_percentile)?,
        c_th: percentile(&certs, cfg.scan.c_percentile)?,
        range_lo: lo,
        range_hi: hi,
    })
}

/// Trains without the calibration term for `scan.warmup_epochs`, then
/// summarizes per-sample errors and certainties on the training split and
/// suggests thresholds at the configured percentiles.
pub fn warmup_threshold_scan(cfg: &ExperimentConfig) -> Result<WarmupScan> {
    if cfg.scan.warmup_epochs == 0 {
        return Err(Error::config("scan.warmup_epochs must be >= 1"));
    }
    let mut warm = cfg.clone();
    warm.optim.epochs = cfg.scan.warmup_epochs;
    warm.eauc.enabled = false;
    match cfg.task {
        Task::Trajectory => {
            let data = TrajectoryData::load(cfg)?;
            let trained = train_trajectory(&warm, &data, cfg.seed)?;
            let (ades, logliks) = rollout_statistics(&trained.final_params, &data.train, 64, cfg.seed)?;
            let scaled: Vec<f64> = ades.iter().map(|&a| scale_ade_value(a, &cfg.eauc.loss)).collect();
            Ok(WarmupScan {
                task: cfg.task,
                warmup_epochs: cfg.scan.warmup_epochs,
                samples: ades.len(),
                error: percentile_table(&scaled)?,
                certainty_source: percentile_table(&logliks)?,
                suggestion: suggest_trajectory(&ades, &logliks, cfg)?,
                log: trained.log,
            })
        }
        Task::Regression => {
            let table = load_table(cfg)?;
            let trained = train_regression(&warm, &table, cfg.seed)?;
            let (errs, vars) = regression_statistics(&trained.trained.final_params, &table, cfg)?;
            Ok(WarmupScan {
                task: cfg.task,
                warmup_epochs: cfg.scan.warmup_epochs,
                samples: errs.len(),
                error: percentile_table(&errs)?,
                certainty_source: percentile_table(&vars)?,
                suggestion: suggest_regression(&errs, &vars, cfg)?,
                log: trained.trained.log,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub rank: usize,
    pub ade_th: f64,
    pub c_th: f64,
    pub beta: f64,
    pub validation_r_auc: f64,
    /// weightedADE for trajectories, RMSE for regression.
    pub validation_error: f64,
}

/// Every `(ade_th, c_th, beta)` cell in lexicographic order.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<(f64, f64, f64)> {
    let g = &cfg.grid;
    let mut cells = Vec::with_capacity(g.ade_th.len() * g.c_th.len() * g.beta.len());
    for &a in &g.ade_th {
        for &c in &g.c_th {
            for &b in &g.beta {
                cells.push((a, c, b));
            }
        }
    }
    cells
}

/// Validation `(R-AUC, error)` for one configuration trained from scratch.
pub fn train_and_validate(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    match cfg.task {
        Task::Trajectory => {
            let data = TrajectoryData::load(cfg)?;
            if data.validation.is_empty() {
                return Err(Error::config("grid search needs a non-empty validation split"));
            }
            let trained = train_trajectory(cfg, &data, cfg.seed)?;
            let records = evaluate_trajectory(&[trained.final_params], &data.validation, cfg)?;
            let (report, _) = evaluation_report(&records, &cfg.eval)?;
            Ok((report.full.r_auc, report.full.weighted_ade))
        }
        Task::Regression => {
            let table = load_table(cfg)?;
            let trained = train_regression(cfg, &table, cfg.seed)?;
            let (summary, _, _) = evaluate_regression(&trained.trained.final_params, &table, &table.validation, cfg)?;
            Ok((summary.calibration.full.r_auc, summary.rmse))
        }
    }
}

/// Trains one model per grid cell for `grid.epochs` epochs and ranks the
/// cells by validation R-AUC, ties broken by `(ade_th, c_th, beta)`.
pub fn grid_search(cfg: &ExperimentConfig) -> Result<Vec<GridRow>> {
    let cells = grid_cells(cfg);
    if cells.is_empty() {
        return Err(Error::config("grid search needs non-empty grids"));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (ade_th, c_th, beta) in cells {
        let mut cell = cfg.clone();
        cell.optim.epochs = cfg.grid.epochs;
        cell.eauc.loss.ade_th = ade_th;
        cell.eauc.loss.c_th = c_th;
        cell.eauc.loss.beta = beta;
        cell.eauc.loss.validate()?;
        let (r_auc, err) = train_and_validate(&cell)?;
        log::info!("grid cell ade_th={ade_th} c_th={c_th} beta={beta}: R-AUC {r_auc:.5}");
        rows.push(GridRow {
            rank: 0,
            ade_th,
            c_th,
            beta,
            validation_r_auc: r_auc,
            validation_error: err,
        });
    }
    rank_rows(&mut rows);
    Ok(rows)
}

pub fn rank_rows(rows: &mut [GridRow]) {
    rows.sort_by(|a, b| {
        a.validation_r_auc
            .total_cmp(&b.validation_r_auc)
            .then(a.ade_th.total_cmp(&b.ade_th))
            .then(a.c_th.total_cmp(&b.c_th))
            .then(a.beta.total_cmp(&b.beta))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(r: f64, a: f64, c: f64, b: f64) -> GridRow {
        GridRow {
            rank: 0,
            ade_th: a,
            c_th: c,
            beta: b,
            validation_r_auc: r,
            validation_error: 0.0,
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        let mut rows = vec![row(0.5, 0.9, 0.1, 1.0), row(0.5, 0.8, 0.7, 2.0), row(0.4, 1.0, 1.0, 1.0), row(0.5, 0.8, 0.7, 1.0)];
        rank_rows(&mut rows);
        let keys: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r.ade_th, r.c_th, r.beta)).collect();
        assert_eq!(keys, vec![(1.0, 1.0, 1.0), (0.8, 0.7, 1.0), (0.8, 0.7, 2.0), (0.9, 0.1, 1.0)]);
        assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn grid_has_product_of_sizes_cells() {
        let mut cfg = ExperimentConfig::default();
        cfg.grid.ade_th = vec![0.5, 0.8, 1.0];
        cfg.grid.c_th = vec![0.4, 0.6];
        cfg.grid.beta = vec![0.0, 10.0];
        let cells = grid_cells(&cfg);
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0], (0.5, 0.4, 0.0));
        assert_eq!(cells[1], (0.5, 0.4, 10.0));
        assert_eq!(cells[11], (1.0, 0.6, 10.0));
    }

    #[test]
    fn constant_values_still_give_a_table() {
        let t = percentile_table(&[2.5; 7]).unwrap();
        assert_eq!(t.len(), SCAN_PERCENTILES.len());
        assert!(t.iter().all(|r| r.value == 2.5));
        let (lo, hi) = outward_range(&[3.0, 3.0]).unwrap();
        assert_eq!((lo, hi), (3.0, 4.0));
        let (lo, hi) = outward_range(&[-2.5, 7.1, 0.0]).unwrap();
        assert_eq!((lo, hi), (-3.0, 8.0));
    }
}
