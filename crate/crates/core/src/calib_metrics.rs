//! Robustness and uncertainty-quality metrics: displacement errors,
//! correlation, AUROC and retention curves.
//!
//! Retention curves order samples by uncertainty (most certain first, ties
//! by sample index). At fraction `f` the `ceil(f * N)` most certain samples
//! are retained. For the error curve rejected samples contribute zero error
//! and the mean is taken over all `N` samples. For the F1 curve a retained
//! accurate sample is a true positive, a retained inaccurate one a false
//! positive and a rejected accurate one a false negative.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_tensor, Tensor};
use crate::error::{Error, Result};
use crate::trajectory::{PlanSet, Trajectory};

/// Mean per-step Euclidean distance.
pub fn ade(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    if pred.horizon() != gt.horizon() {
        return Err(Error::input(format!(
            "ade: horizon mismatch ({} vs {})",
            pred.horizon(),
            gt.horizon()
        )));
    }
    let total: f64 = pred
        .states()
        .iter()
        .zip(gt.states())
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .sum();
    Ok(total / pred.horizon() as f64)
}

/// Softmax-of-certainty weighted sum of per-plan errors.
pub fn weighted_ade_from_parts(ades: &[f64], certainties: &[f64]) -> Result<f64> {
    if ades.is_empty() || ades.len() != certainties.len() {
        return Err(Error::input(format!(
            "weighted_ade: need matching non-empty inputs, got {} errors and {} certainties",
            ades.len(),
            certainties.len()
        )));
    }
    let weights = softmax_tensor(&Tensor::vector(certainties.to_vec()));
    Ok(weights.data().iter().zip(ades).map(|(w, a)| w * a).sum())
}

pub fn weighted_ade(plans: &PlanSet, gt: &Trajectory) -> Result<f64> {
    let ades = plans.plans.iter().map(|p| ade(p, gt)).collect::<Result<Vec<_>>>()?;
    weighted_ade_from_parts(&ades, &plans.certainties)
}

/// Sample Pearson correlation coefficient.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::input(format!(
            "pearson_r: need equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::input("pearson_r: zero variance, correlation undefined"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Probability that a random positive outscores a random negative, ties
/// counted half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::input("auroc: scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::input("auroc: both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));

    // Twice the win count, accumulated per group of tied scores.
    let mut wins2: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins2 += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(wins2 as f64 / (2 * pos * neg) as f64)
}

/// Value at the `q`-th percentile (0..=100) by linear interpolation
/// between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::input("percentile of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurve {
    /// `(fraction, value)` pairs with strictly increasing fractions from 0 to 1.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RetentionCurve {
    fn from_values(fractions: Vec<f64>, values: Vec<f64>) -> Self {
        let points: Vec<(f64, f64)> = fractions.into_iter().zip(values).collect();
        let auc = points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum();
        RetentionCurve { points, auc }
    }

    /// Value at the grid point nearest to `fraction` from below.
    pub fn value_at(&self, fraction: f64) -> f64 {
        let steps = (self.points.len() - 1) as f64;
        let idx = ((fraction * steps) + 1e-9).floor() as usize;
        self.points[idx.min(self.points.len() - 1)].1
    }
}

pub const DEFAULT_GRID: usize = 101;

fn retention_order(errors: &[f64], uncertainties: &[f64], grid: usize) -> Result<Vec<usize>> {
    if errors.is_empty() {
        return Err(Error::input("retention curve: empty input"));
    }
    if errors.len() != uncertainties.len() {
        return Err(Error::input("retention curve: errors and uncertainties differ in length"));
    }
    if grid < 2 {
        return Err(Error::input("retention curve: grid must have at least 2 points"));
    }
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&i, &j| uncertainties[i].total_cmp(&uncertainties[j]).then(i.cmp(&j)));
    Ok(order)
}

/// `(fraction, retained count)` for each grid point.
fn grid_counts(n: usize, grid: usize) -> impl Iterator<Item = (f64, usize)> {
    let steps = grid - 1;
    (0..grid).map(move |i| (i as f64 / steps as f64, (i * n).div_ceil(steps)))
}

pub fn error_retention_curve(errors: &[f64], uncertainties: &[f64], grid: usize) -> Result<RetentionCurve> {
    let order = retention_order(errors, uncertainties, grid)?;
    let n = errors.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &i in &order {
        prefix.push(prefix.last().unwrap() + errors[i]);
    }
    let (fractions, values) = grid_counts(n, grid).map(|(f, k)| (f, prefix[k] / n as f64)).unzip();
    Ok(RetentionCurve::from_values(fractions, values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Retention {
    pub curve: RetentionCurve,
    pub f1_auc: f64,
    pub f1_at_95: f64,
}

pub fn f1_retention_curve(
    errors: &[f64],
    uncertainties: &[f64],
    accuracy_threshold: f64,
    grid: usize,
) -> Result<F1Retention> {
    let order = retention_order(errors, uncertainties, grid)?;
    let n = errors.len();
    let accurate: Vec<bool> = order.iter().map(|&i| errors[i] <= accuracy_threshold).collect();
    let total_accurate = accurate.iter().filter(|&&a| a).count();
    let mut tp_prefix = Vec::with_capacity(n + 1);
    tp_prefix.push(0usize);
    for &a in &accurate {
        tp_prefix.push(tp_prefix.last().unwrap() + usize::from(a));
    }
    let (fractions, values) = grid_counts(n, grid)
        .map(|(f, k)| {
            let tp = tp_prefix[k];
            let fp = k - tp;
            let fn_ = total_accurate - tp;
            let denom = 2 * tp + fp + fn_;
            let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
            (f, f1)
        })
        .unzip();
    let curve = RetentionCurve::from_values(fractions, values);
    Ok(F1Retention {
        f1_auc: curve.auc,
        f1_at_95: curve.value_at(0.95),
        curve,
    })
}

/// Per-scene evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub scene_id: u64,
    pub shifted: bool,
    /// Raw per-plan errors, in plan order.
    pub ades: Vec<f64>,
    /// Raw per-plan log-likelihoods, in plan order.
    pub certainties: Vec<f64>,
    pub uncertainty: f64,
    pub weighted_ade: f64,
    pub accurate: bool,
}

impl EvaluationRecord {
    pub fn new(
        scene_id: u64,
        shifted: bool,
        ades: Vec<f64>,
        certainties: Vec<f64>,
        uncertainty: f64,
        accuracy_threshold: f64,
    ) -> Result<Self> {
        let weighted_ade = weighted_ade_from_parts(&ades, &certainties)?;
        Ok(EvaluationRecord {
            scene_id,
            shifted,
            ades,
            certainties,
            uncertainty,
            weighted_ade,
            accurate: weighted_ade <= accuracy_threshold,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Raw weightedADE (meters) at or below which a prediction is accurate.
    pub accuracy_threshold: f64,
    /// Number of evenly spaced retention fractions, including 0 and 1.
    pub grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            accuracy_threshold: 1.6,
            grid: DEFAULT_GRID,
        }
    }
}

/// Metrics over one partition. Correlation and AUROC are `None` when they
/// are undefined (constant inputs or a single accuracy class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub count: usize,
    pub weighted_ade: f64,
    pub r_auc: f64,
    pub f1_auc: f64,
    pub f1_at_95: f64,
    pub pearson_r: Option<f64>,
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy_threshold: f64,
    pub grid: usize,
    pub full: MetricBundle,
    pub in_distribution: Option<MetricBundle>,
    pub shifted: Option<MetricBundle>,
}

/// Curves for one partition, kept apart from the report so they can be
/// written as tabular files.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionCurves {
    pub error: RetentionCurve,
    pub f1: RetentionCurve,
}

pub fn partition_metrics(records: &[&EvaluationRecord], config: &EvalConfig) -> Result<(MetricBundle, PartitionCurves)> {
    if records.is_empty() {
        return Err(Error::input("evaluation: no records"));
    }
    let errors: Vec<f64> = records.iter().map(|r| r.weighted_ade).collect();
    let unc: Vec<f64> = records.iter().map(|r| r.uncertainty).collect();
    let error = error_retention_curve(&errors, &unc, config.grid)?;
    let f1 = f1_retention_curve(&errors, &unc, config.accuracy_threshold, config.grid)?;
    let neg_unc: Vec<f64> = unc.iter().map(|u| -u).collect();
    let labels: Vec<bool> = errors.iter().map(|&e| e <= config.accuracy_threshold).collect();
    let bundle = MetricBundle {
        count: records.len(),
        weighted_ade: errors.iter().sum::<f64>() / errors.len() as f64,
        r_auc: error.auc,
        f1_auc: f1.f1_auc,
        f1_at_95: f1.f1_at_95,
        pearson_r: pearson_r(&unc, &errors).ok(),
        auroc: auroc(&neg_unc, &labels).ok(),
    };
    Ok((bundle, PartitionCurves { error, f1: f1.curve }))
}

/// Full-set metrics plus in-distribution/shifted splits when both are
/// present.
pub fn evaluation_report(records: &[EvaluationRecord], config: &EvalConfig) -> Result<(EvaluationReport, PartitionCurves)> {
    let all: Vec<&EvaluationRecord> = records.iter().collect();
    let (full, curves) = partition_metrics(&all, config)?;
    let ind: Vec<&EvaluationRecord> = records.iter().filter(|r| !r.shifted).collect();
    let shf: Vec<&EvaluationRecord> = records.iter().filter(|r| r.shifted).collect();
    let (in_distribution, shifted) = if !ind.is_empty() && !shf.is_empty() {
        (
            Some(partition_metrics(&ind, config)?.0),
            Some(partition_metrics(&shf, config)?.0),
        )
    } else {
        (None, None)
    };
    Ok((
        EvaluationReport {
            accuracy_threshold: config.accuracy_threshold,
            grid: config.grid,
            full,
            in_distribution,
            shifted,
        },
        curves,
    ))
}
