//! Scene-level evaluation and regression test scoring.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bnn_model::BnnParams;
use crate::calib_metrics::{ade, evaluation_report, EvaluationRecord, EvaluationReport, PartitionCurves};
use crate::datasets::{RegressionSplit, RegressionTable, SceneLayout};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::train::{predict_original, regression_scores};
use crate::traj_model::{ensemble_aggregate, sample_plans_batch, TrajModelParams};
use crate::trajectory::SceneSample;

/// Sampling seed for one scene and ensemble member. Depends only on its
/// arguments, so results do not change with batching or scene order.
pub fn scene_seed(base: u64, scene_id: u64, member: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(scene_id);
    rng.set_word_pos(2 * member as u128);
    rng.next_u64()
}

pub fn check_layout(members: &[TrajModelParams], layout: &SceneLayout) -> Result<()> {
    if members.is_empty() {
        return Err(Error::input("evaluation needs at least one model"));
    }
    for (k, m) in members.iter().enumerate() {
        let c = &m.config;
        if c.context_dim != layout.context_dim || c.horizon != layout.horizon || c.timestep != layout.timestep {
            return Err(Error::input(format!(
                "model {k} expects context {} / horizon {} / timestep {}, data has {} / {} / {}",
                c.context_dim, c.horizon, c.timestep, layout.context_dim, layout.horizon, layout.timestep
            )));
        }
    }
    Ok(())
}

/// Samples `G` trajectories per member and scene, pools and rescores them
/// across members, keeps the top `D` and scores them against the ground
/// truth.
pub fn evaluate_trajectory(members: &[TrajModelParams], scenes: &[SceneSample], cfg: &ExperimentConfig) -> Result<Vec<EvaluationRecord>> {
    if scenes.is_empty() {
        return Err(Error::input("evaluation: no scenes"));
    }
    check_layout(members, &SceneLayout::of(scenes)?)?;
    let inf = &cfg.inference;
    let mut records = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(inf.batch_scenes) {
        let contexts: Vec<&[f64]> = chunk.iter().map(|s| s.context.as_slice()).collect();
        let mut per_member = Vec::with_capacity(members.len());
        for (k, m) in members.iter().enumerate() {
            let seeds: Vec<u64> = chunk.iter().map(|s| scene_seed(inf.seed, s.scene_id, k)).collect();
            per_member.push(sample_plans_batch(m, &contexts, inf.samples, &seeds)?);
        }
        for (i, scene) in chunk.iter().enumerate() {
            let samples: Vec<_> = per_member.iter_mut().map(|m| std::mem::take(&mut m[i])).collect();
            let plans = ensemble_aggregate(members, &scene.context, &samples, inf.plans)?;
            let ades = plans.plans.iter().map(|p| ade(p, &scene.target)).collect::<Result<Vec<f64>>>()?;
            records.push(EvaluationRecord::new(
                scene.scene_id,
                scene.shifted,
                ades,
                plans.certainties,
                plans.uncertainty,
                cfg.eval.accuracy_threshold,
            )?);
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub count: usize,
    /// Mean Gaussian NLL in original target units.
    pub nll: f64,
    pub rmse: f64,
    /// Retention metrics with predictive variance as uncertainty and the
    /// absolute error as error.
    pub calibration: EvaluationReport,
}

/// Scores one split. Records use the row index as id, a single "plan"
/// whose error is the absolute error, and the negated variance as its
/// certainty, so the same retention tooling applies.
pub fn evaluate_regression(
    params: &BnnParams,
    table: &RegressionTable,
    split: &RegressionSplit,
    cfg: &ExperimentConfig,
) -> Result<(RegressionSummary, Vec<EvaluationRecord>, PartitionCurves)> {
    if split.is_empty() {
        return Err(Error::input("evaluation: split is empty"));
    }
    if params.config.input_dim != table.feature_names.len() {
        return Err(Error::input(format!(
            "model expects {} features, table has {}",
            params.config.input_dim,
            table.feature_names.len()
        )));
    }
    let preds = predict_original(params, table, &split.x, cfg.inference.mc_samples, cfg.inference.seed)?;
    let (nll, rmse) = regression_scores(&preds, &split.y)?;
    let records = preds
        .iter()
        .zip(&split.y)
        .zip(&split.rows)
        .map(|((p, &y), &row)| {
            EvaluationRecord::new(row as u64, false, vec![(p.mean - y).abs()], vec![-p.variance], p.variance, cfg.eval.accuracy_threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    let (calibration, curves) = evaluation_report(&records, &cfg.eval)?;
    Ok((
        RegressionSummary {
            count: records.len(),
            nll,
            rmse,
            calibration,
        },
        records,
        curves,
    ))
}
