//! Experiment configuration, read from TOML. Every field has a default and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib_metrics::EvalConfig;
use crate::datasets::{SplitRatios, SynthConfig};
use crate::eau_loss::EaucConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Trajectory,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scene file for the trajectory task; generated from `[synth]` when absent.
    pub scenes_file: Option<PathBuf>,
    /// Delimited table for the regression task.
    pub table_file: Option<PathBuf>,
    pub target_column: String,
    /// Split of in-distribution scenes (or table rows). Shifted scenes
    /// always go to the test split.
    pub split: SplitRatios,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes_file: None,
            table_file: None,
            target_column: "MEDV".into(),
            split: SplitRatios {
                train: 0.7,
                validation: 0.1,
                test: 0.2,
            },
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajArchConfig {
    pub hidden: usize,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
}

impl Default for TrajArchConfig {
    fn default() -> Self {
        TrajArchConfig {
            hidden: 64,
            log_sigma_min: -5.0,
            log_sigma_max: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnnArchConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub init_noise_std: f64,
}

impl Default for BnnArchConfig {
    fn default() -> Self {
        BnnArchConfig {
            hidden: 100,
            dropout: 0.5,
            init_noise_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup then cosine annealing to zero.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    /// Warmup length in epochs for the cosine schedule.
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Decoupled weight decay (adaptive optimizer only).
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            schedule: Schedule::Cosine,
            warmup_epochs: 1,
            epochs: 30,
            batch_size: 32,
            grad_clip: 1.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("optim: learning_rate must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("optim: epochs and batch_size must be >= 1"));
        }
        if !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim: grad_clip and weight_decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::config("optim: betas must lie in [0, 1) and adam_epsilon must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(flatten)]
    pub loss: EaucConfig,
    /// Build the calibration graph at all. With `false` the training loop is
    /// the plain likelihood baseline and no EaU statistics are logged.
    pub enabled: bool,
    /// First epoch (1-based) in which the calibration term is added.
    pub start_epoch: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            loss: EaucConfig::default(),
            enabled: true,
            start_epoch: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Samples drawn per model and scene.
    pub samples: usize,
    /// Plans kept after ranking.
    pub plans: usize,
    pub seed: u64,
    /// MC-dropout passes at prediction time (regression).
    pub mc_samples: usize,
    /// Scenes per sampling batch.
    pub batch_scenes: usize,
    /// Models trained by `train` (seeds `seed`, `seed + 1`, ...) and
    /// pooled by `evaluate`.
    pub ensemble_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            samples: 10,
            plans: 5,
            seed: 0,
            mc_samples: 20,
            batch_scenes: 16,
            ensemble_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    /// Stochastic passes per training batch; the calibration term uses their
    /// spread.
    pub train_passes: usize,
    /// Variance range for the certainty mapping (standardized target
    /// units). When absent it is set from percentiles of predictive
    /// variance at the end of the warmup epochs.
    pub variance_lo: Option<f64>,
    pub variance_hi: Option<f64>,
    pub variance_percentiles: (f64, f64),
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            train_passes: 2,
            variance_lo: None,
            variance_hi: None,
            variance_percentiles: (5.0, 95.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub warmup_epochs: usize,
    pub ade_percentile: f64,
    pub c_percentile: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            warmup_epochs: 2,
            ade_percentile: 50.0,
            c_percentile: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub ade_th: Vec<f64>,
    pub c_th: Vec<f64>,
    pub beta: Vec<f64>,
    /// Training epochs per grid cell.
    pub epochs: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            ade_th: vec![0.8],
            c_th: vec![0.6],
            beta: vec![0.0, 200.0],
            epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Seed for initialization, batch order and training-time sampling.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: TrajArchConfig,
    pub bnn: BnnArchConfig,
    pub optim: OptimConfig,
    pub eauc: CalibrationConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub regression: RegressionConfig,
    pub scan: ScanConfig,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Trajectory,
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            model: TrajArchConfig::default(),
            bnn: BnnArchConfig::default(),
            optim: OptimConfig::default(),
            eauc: CalibrationConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            regression: RegressionConfig::default(),
            scan: ScanConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text after applying `overrides` (`dotted.key=value`).
    /// Override values are read as TOML literals, falling back to strings.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::config(format!("config: {e}")))?;
        ExperimentConfig::from_table(table, overrides)
    }

    /// Loads and validates a config file. Relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(toml::Value::Table(data)) = table.get_mut("data") {
            for key in ["scenes_file", "table_file"] {
                if let Some(toml::Value::String(p)) = data.get_mut(key) {
                    if Path::new(p.as_str()).is_relative() {
                        *p = base.join(p.as_str()).to_string_lossy().into_owned();
                    }
                }
            }
        }
        let cfg = ExperimentConfig::from_table(table, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`ExperimentConfig::load`] without a file: defaults plus
    /// overrides.
    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        let cfg = ExperimentConfig::from_table(toml::Table::new(), overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_table(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        table.try_into().map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.eauc.loss.validate()?;
        self.data.split.validate()?;
        if self.eauc.start_epoch == 0 {
            return Err(Error::config("eauc.start_epoch is 1-based"));
        }
        if self.inference.samples == 0 || self.inference.plans == 0 || self.inference.plans > self.inference.samples {
            return Err(Error::config("inference: need 1 <= plans <= samples"));
        }
        if self.inference.mc_samples == 0 || self.inference.batch_scenes == 0 || self.inference.ensemble_size == 0 {
            return Err(Error::config("inference: mc_samples, batch_scenes and ensemble_size must be >= 1"));
        }
        if self.eval.grid < 2 {
            return Err(Error::config("eval.grid must be >= 2"));
        }
        if self.regression.train_passes == 0 {
            return Err(Error::config("regression.train_passes must be >= 1"));
        }
        let (plo, phi) = self.regression.variance_percentiles;
        if !(0.0 <= plo && plo < phi && phi <= 100.0) {
            return Err(Error::config("regression.variance_percentiles must satisfy 0 <= lo < hi <= 100"));
        }
        if self.regression.variance_lo.is_some() != self.regression.variance_hi.is_some() {
            return Err(Error::config("regression: set both variance_lo and variance_hi or neither"));
        }
        if self.grid.ade_th.is_empty() || self.grid.c_th.is_empty() || self.grid.beta.is_empty() || self.grid.epochs == 0 {
            return Err(Error::config("grid: every grid needs at least one value and epochs >= 1"));
        }
        for p in [&self.data.scenes_file, &self.data.table_file].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::config(format!("data file {} does not exist", p.display())));
            }
        }
        if self.task == Task::Regression && self.data.table_file.is_none() {
            return Err(Error::config("regression task needs data.table_file"));
        }
        match self.task {
            Task::Trajectory => self.synth.validate(),
            Task::Regression => Ok(()),
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' is not key=value")))?;
    let value = parse_literal(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override '{spec}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// `key=value` override whose value is always taken as a string.
pub fn string_override(key: &str, value: &str) -> String {
    format!("{key}={}", toml::Value::String(value.to_string()))
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
