//! One function per command; each reads a validated config and writes its
//! outputs under `output_dir`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bnn_model::BnnParams;
use crate::calib_metrics::{evaluation_report, EvaluationReport};
use crate::datasets::{generate_scenes, write_scenes};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Task};
use crate::harness::data::{load_table, TrajectoryData};
use crate::harness::evaluate::{evaluate_regression, evaluate_trajectory};
use crate::harness::records::{read_records, retention_report, write_curves, write_json, write_records, write_text, RecordSet, RECORDS_FILE};
use crate::harness::scan::{grid_search, warmup_threshold_scan, GridRow, WarmupScan};
use crate::harness::train::{train_regression, train_trajectory, TrainingLog};
use crate::traj_model::TrajModelParams;

pub const SCENES_FILE: &str = "scenes.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SCAN_FILE: &str = "warmup_scan.json";
pub const GRID_FILE: &str = "grid_search.csv";
pub const RETENTION_FILE: &str = "retention_report.json";

pub fn final_checkpoint(dir: &Path, member: usize) -> PathBuf {
    dir.join(format!("model_{member}.ckpt"))
}

pub fn best_checkpoint(dir: &Path, member: usize) -> PathBuf {
    dir.join(format!("best_{member}.ckpt"))
}

pub fn log_file(dir: &Path, member: usize) -> PathBuf {
    dir.join(format!("training_log_{member}.json"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the synthetic scene set; returns the file path.
pub fn generate_data(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    cfg.synth.validate()?;
    let path = out.map_or_else(|| cfg.output_dir.join(SCENES_FILE), Path::to_path_buf);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_scenes(&path, &generate_scenes(&cfg.synth)?)?;
    Ok(path)
}

/// Trains `inference.ensemble_size` models with consecutive seeds and
/// writes final and best-validation checkpoints plus one log per member.
pub fn train(cfg: &ExperimentConfig) -> Result<Vec<TrainingLog>> {
    ensure_dir(&cfg.output_dir)?;
    let mut logs = Vec::new();
    match cfg.task {
        Task::Trajectory => {
            let data = TrajectoryData::load(cfg)?;
            for k in 0..cfg.inference.ensemble_size {
                let t = train_trajectory(cfg, &data, cfg.seed + k as u64)?;
                t.final_params.save(&final_checkpoint(&cfg.output_dir, k))?;
                t.best_params.save(&best_checkpoint(&cfg.output_dir, k))?;
                write_json(&log_file(&cfg.output_dir, k), &t.log)?;
                logs.push(t.log);
            }
        }
        Task::Regression => {
            let table = load_table(cfg)?;
            for k in 0..cfg.inference.ensemble_size {
                let t = train_regression(cfg, &table, cfg.seed + k as u64)?;
                t.trained.final_params.save(&final_checkpoint(&cfg.output_dir, k))?;
                t.trained.best_params.save(&best_checkpoint(&cfg.output_dir, k))?;
                write_json(&log_file(&cfg.output_dir, k), &t.trained.log)?;
                logs.push(t.trained.log);
            }
        }
    }
    Ok(logs)
}

/// Report written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum EvaluationOutput {
    Trajectory(EvaluationReport),
    Regression(crate::harness::evaluate::RegressionSummary),
}

/// Checkpoints given explicitly, or the final checkpoint of every member
/// in `output_dir`.
pub fn resolve_checkpoints(cfg: &ExperimentConfig, explicit: &[PathBuf]) -> Vec<PathBuf> {
    if explicit.is_empty() {
        (0..cfg.inference.ensemble_size).map(|k| final_checkpoint(&cfg.output_dir, k)).collect()
    } else {
        explicit.to_vec()
    }
}

/// Evaluates on the test split and writes the report, the records file and
/// both retention curves.
pub fn evaluate(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<EvaluationOutput> {
    let paths = resolve_checkpoints(cfg, checkpoints);
    if paths.is_empty() {
        return Err(Error::input("evaluate needs at least one checkpoint"));
    }
    ensure_dir(&cfg.output_dir)?;
    let (output, records, curves) = match cfg.task {
        Task::Trajectory => {
            let members = paths.iter().map(|p| TrajModelParams::load(p)).collect::<Result<Vec<_>>>()?;
            let data = TrajectoryData::load(cfg)?;
            if data.test.is_empty() {
                return Err(Error::config("test split is empty"));
            }
            let records = evaluate_trajectory(&members, &data.test, cfg)?;
            let (report, curves) = evaluation_report(&records, &cfg.eval)?;
            (EvaluationOutput::Trajectory(report), records, curves)
        }
        Task::Regression => {
            if paths.len() != 1 {
                return Err(Error::input("regression evaluation takes exactly one checkpoint"));
            }
            let params = BnnParams::load(&paths[0])?;
            let table = load_table(cfg)?;
            let (summary, records, curves) = evaluate_regression(&params, &table, &table.test, cfg)?;
            (EvaluationOutput::Regression(summary), records, curves)
        }
    };
    write_json(&cfg.output_dir.join(REPORT_FILE), &output)?;
    write_records(&cfg.output_dir.join(RECORDS_FILE), &RecordSet { eval: cfg.eval, records })?;
    write_curves(&cfg.output_dir, &curves)?;
    Ok(output)
}

pub fn warmup_scan(cfg: &ExperimentConfig) -> Result<WarmupScan> {
    let scan = warmup_threshold_scan(cfg)?;
    write_json(&cfg.output_dir.join(SCAN_FILE), &scan)?;
    Ok(scan)
}

pub fn grid_to_text(task: Task, rows: &[GridRow]) -> String {
    let err_col = match task {
        Task::Trajectory => "validation_weighted_ade",
        Task::Regression => "validation_rmse",
    };
    let mut out = format!("rank,ade_th,c_th,beta,validation_r_auc,{err_col}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.rank, r.ade_th, r.c_th, r.beta, r.validation_r_auc, r.validation_error
        ));
    }
    out
}

pub fn grid(cfg: &ExperimentConfig) -> Result<Vec<GridRow>> {
    let rows = grid_search(cfg)?;
    write_text(&cfg.output_dir.join(GRID_FILE), &grid_to_text(cfg.task, &rows))?;
    Ok(rows)
}

/// Re-emits curves and metrics from a records file, without any model.
pub fn retention(records: &Path, out_dir: &Path) -> Result<EvaluationReport> {
    let set = read_records(records)?;
    let (report, curves) = retention_report(&set)?;
    ensure_dir(out_dir)?;
    write_json(&out_dir.join(RETENTION_FILE), &report)?;
    write_curves(out_dir, &curves)?;
    Ok(report)
}
