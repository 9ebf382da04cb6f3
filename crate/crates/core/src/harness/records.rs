//! Files written by evaluation and read back by the retention report.
//!
//! Records file, one scene per row after two header lines:
//!
//! ```text
//! # eauc-records v1 accuracy_threshold=<f64> grid=<usize>
//! scene_id,shifted,uncertainty,weighted_ade,accurate,plans,ade_0,..,ade_{D-1},c_0,..,c_{D-1}
//! ```
//!
//! `shifted` and `accurate` are `0`/`1`; `plans` is `D`. Per-plan columns
//! are in plan order (descending certainty). Floats use shortest
//! round-trip formatting, so reading a file back reproduces every metric
//! exactly.
//!
//! Curve files are `fraction,value` with one row per grid point.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::calib_metrics::{evaluation_report, EvalConfig, EvaluationRecord, EvaluationReport, PartitionCurves, RetentionCurve};
use crate::error::{Error, Result};

const MAGIC: &str = "# eauc-records v1";

pub const ERROR_CURVE_FILE: &str = "error_retention.csv";
pub const F1_CURVE_FILE: &str = "f1_retention.csv";
pub const RECORDS_FILE: &str = "records.csv";

/// Records plus the settings needed to recompute their metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub eval: EvalConfig,
    pub records: Vec<EvaluationRecord>,
}

pub fn records_to_text(set: &RecordSet) -> Result<String> {
    let d = set.records.first().map_or(0, |r| r.ades.len());
    if set.records.iter().any(|r| r.ades.len() != d || r.certainties.len() != d) {
        return Err(Error::input("records: every record needs the same number of plans"));
    }
    let mut out = format!("{MAGIC} accuracy_threshold={} grid={}\n", set.eval.accuracy_threshold, set.eval.grid);
    out.push_str("scene_id,shifted,uncertainty,weighted_ade,accurate,plans");
    for i in 0..d {
        let _ = write!(out, ",ade_{i}");
    }
    for i in 0..d {
        let _ = write!(out, ",c_{i}");
    }
    out.push('\n');
    for r in &set.records {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.scene_id,
            u8::from(r.shifted),
            r.uncertainty,
            r.weighted_ade,
            u8::from(r.accurate),
            d
        );
        for v in r.ades.iter().chain(&r.certainties) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_records(path: &Path, text: &str) -> Result<RecordSet> {
    let bad = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line: line as u64,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| bad(1, "empty records file".into()))?;
    let settings = first
        .strip_prefix(MAGIC)
        .ok_or_else(|| bad(1, format!("expected '{MAGIC} accuracy_threshold=.. grid=..'")))?;
    let mut eval = EvalConfig::default();
    let (mut seen_thr, mut seen_grid) = (false, false);
    for kv in settings.split_whitespace() {
        match kv.split_once('=') {
            Some(("accuracy_threshold", v)) => {
                eval.accuracy_threshold = v.parse().map_err(|_| bad(1, format!("bad accuracy_threshold '{v}'")))?;
                seen_thr = true;
            }
            Some(("grid", v)) => {
                eval.grid = v.parse().map_err(|_| bad(1, format!("bad grid '{v}'")))?;
                seen_grid = true;
            }
            _ => return Err(bad(1, format!("unknown header field '{kv}'"))),
        }
    }
    if !(seen_thr && seen_grid) || eval.grid < 2 {
        return Err(bad(1, "header needs accuracy_threshold and grid >= 2".into()));
    }
    let (n, header) = lines.next().ok_or_else(|| bad(2, "missing column header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 6 || cols[..6] != ["scene_id", "shifted", "uncertainty", "weighted_ade", "accurate", "plans"] {
        return Err(bad(n, "unexpected column header".into()));
    }
    let d = (cols.len() - 6) / 2;
    if cols.len() != 6 + 2 * d || d == 0 {
        return Err(bad(n, "column header needs matching ade_* and c_* columns".into()));
    }

    let mut records = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(bad(n, format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(n, format!("column '{}': bad number '{}'", cols[i], f[i])))
        };
        let flag = |i: usize| -> Result<bool> {
            match f[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                v => Err(bad(n, format!("column '{}': expected 0 or 1, found '{v}'", cols[i]))),
            }
        };
        let scene_id: u64 = f[0].parse().map_err(|_| bad(n, format!("bad scene_id '{}'", f[0])))?;
        if f[5].parse::<usize>().ok() != Some(d) {
            return Err(bad(n, format!("plans column says '{}', header has {d}", f[5])));
        }
        let ades = (6..6 + d).map(num).collect::<Result<Vec<_>>>()?;
        let certainties = (6 + d..6 + 2 * d).map(num).collect::<Result<Vec<_>>>()?;
        let record = EvaluationRecord {
            scene_id,
            shifted: flag(1)?,
            uncertainty: num(2)?,
            weighted_ade: num(3)?,
            accurate: flag(4)?,
            ades,
            certainties,
        };
        records.push(record);
    }
    if records.is_empty() {
        return Err(bad(3, "no records".into()));
    }
    Ok(RecordSet { eval, records })
}

pub fn write_records(path: &Path, set: &RecordSet) -> Result<()> {
    std::fs::write(path, records_to_text(set)?).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<RecordSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(path, &text)
}

pub fn curve_to_text(curve: &RetentionCurve) -> String {
    let mut out = String::from("fraction,value\n");
    for (f, v) in &curve.points {
        let _ = writeln!(out, "{f},{v}");
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::input(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_curves(dir: &Path, curves: &PartitionCurves) -> Result<()> {
    write_text(&dir.join(ERROR_CURVE_FILE), &curve_to_text(&curves.error))?;
    write_text(&dir.join(F1_CURVE_FILE), &curve_to_text(&curves.f1))
}

/// Recomputes the report and curves from stored records only.
pub fn retention_report(set: &RecordSet) -> Result<(EvaluationReport, PartitionCurves)> {
    evaluation_report(&set.records, &set.eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RecordSet {
        let eval = EvalConfig {
            accuracy_threshold: 1.5,
            grid: 11,
        };
        let records = vec![
            EvaluationRecord::new(3, false, vec![0.1, 2.0 / 3.0], vec![5.0, -1.25], 1.0 / 7.0, 1.5).unwrap(),
            EvaluationRecord::new(9, true, vec![4.0, 1e-17], vec![-3.0, -3.5], 3.25, 1.5).unwrap(),
        ];
        RecordSet { eval, records }
    }

    #[test]
    fn round_trip_is_exact() {
        let set = sample();
        let text = records_to_text(&set).unwrap();
        let back = parse_records(Path::new("r.csv"), &text).unwrap();
        assert_eq!(back, set);
        assert_eq!(retention_report(&back).unwrap(), retention_report(&set).unwrap_or_else(|e| panic!("{e}")));
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let text = records_to_text(&sample()).unwrap();
        let broken = text.replacen(",1,", ",x,", 1);
        match parse_records(Path::new("r.csv"), &broken) {
            Err(Error::Parse { line, .. }) => assert!(line >= 3),
            other => panic!("{other:?}"),
        }
        let mut lines: Vec<&str> = text.lines().collect();
        lines[3] = "9,1,3.25";
        match parse_records(Path::new("r.csv"), &lines.join("\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(parse_records(Path::new("r.csv"), "").is_err());
        assert!(parse_records(Path::new("r.csv"), "scene_id\n").is_err());
    }

    #[test]
    fn single_record_gives_step_curves() {
        let set = RecordSet {
            eval: EvalConfig {
                accuracy_threshold: 1.0,
                grid: 5,
            },
            records: vec![EvaluationRecord::new(0, false, vec![2.0], vec![0.0], 0.0, 1.0).unwrap()],
        };
        let (_, curves) = retention_report(&set).unwrap();
        let values: Vec<f64> = curves.error.points.iter().map(|p| p.1).collect();
        // Nothing retained at fraction 0, the single record from then on.
        assert_eq!(values, vec![0.0, 2.0, 2.0, 2.0, 2.0]);
        assert_eq!(curve_to_text(&curves.error).lines().count(), 6);
    }
}
