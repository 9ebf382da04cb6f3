//! Synthetic driving scenes with a controllable shifted partition, and
//! ingestion of delimited regression tables.
//!
//! Scenes are generated in an agent-centric frame: the agent sits at the
//! origin heading along +x at the current time. Each scene follows one
//! maneuver (constant velocity, constant yaw-rate turn or braking to a stop)
//! whose onset may fall anywhere in the context or future window. Positions
//! receive Gaussian noise before differencing, so targets carry the noise of
//! both endpoints.
//!
//! Context layout, per history step from oldest to newest:
//! `[x, y, dx, dy]` where `(x, y)` is the position relative to the current
//! one and `(dx, dy)` the displacement from the previous step.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{SceneSample, Trajectory};

pub const FEATURES_PER_STEP: usize = 4;
const SCENE_HEADER: &str = "# eauc-scenes v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    ConstantVelocity,
    ConstantTurn,
    Stop,
}

/// Maneuver probabilities; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManeuverMix {
    pub constant_velocity: f64,
    pub constant_turn: f64,
    pub stop: f64,
}

impl Default for ManeuverMix {
    fn default() -> Self {
        ManeuverMix {
            constant_velocity: 0.5,
            constant_turn: 0.3,
            stop: 0.2,
        }
    }
}

impl ManeuverMix {
    fn validate(&self, what: &str) -> Result<()> {
        let p = [self.constant_velocity, self.constant_turn, self.stop];
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config(format!("{what}: probabilities must lie in [0, 1]")));
        }
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("{what}: probabilities must sum to 1")));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> Maneuver {
        let u: f64 = rng.gen();
        if u < self.constant_velocity {
            Maneuver::ConstantVelocity
        } else if u < self.constant_velocity + self.constant_turn {
            Maneuver::ConstantTurn
        } else {
            Maneuver::Stop
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftProfile {
    pub mix: ManeuverMix,
    /// Multiplier on the positional noise of shifted scenes.
    pub noise_factor: f64,
}

impl Default for ShiftProfile {
    fn default() -> Self {
        ShiftProfile {
            mix: ManeuverMix {
                constant_velocity: 0.2,
                constant_turn: 0.4,
                stop: 0.4,
            },
            noise_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// In-distribution scene count.
    pub scenes: usize,
    pub shifted_scenes: usize,
    pub context_steps: usize,
    pub horizon_steps: usize,
    pub timestep: f64,
    pub mix: ManeuverMix,
    /// Positional noise standard deviation in meters.
    pub noise: f64,
    /// Per-scene noise multipliers are log-uniform in `[1/spread, spread]`.
    pub noise_spread: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Yaw-rate magnitude range for turns, rad/s.
    pub min_yaw_rate: f64,
    pub max_yaw_rate: f64,
    /// Deceleration range for stops, m/s^2.
    pub min_decel: f64,
    pub max_decel: f64,
    pub shift: ShiftProfile,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scenes: 2000,
            shifted_scenes: 400,
            context_steps: 5,
            horizon_steps: 25,
            timestep: 0.2,
            mix: ManeuverMix::default(),
            noise: 0.05,
            noise_spread: 3.0,
            min_speed: 3.0,
            max_speed: 15.0,
            min_yaw_rate: 0.15,
            max_yaw_rate: 0.5,
            min_decel: 2.0,
            max_decel: 5.0,
            shift: ShiftProfile::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.mix.validate("synth.mix")?;
        self.shift.mix.validate("synth.shift.mix")?;
        if self.context_steps < 1 || self.horizon_steps < 1 {
            return Err(Error::config("synth: context_steps and horizon_steps must be >= 1"));
        }
        if !(self.timestep > 0.0) {
            return Err(Error::config("synth: timestep must be > 0"));
        }
        if !(self.noise >= 0.0) || !(self.shift.noise_factor >= 0.0) {
            return Err(Error::config("synth: noise must be >= 0"));
        }
        if !(self.noise_spread >= 1.0) {
            return Err(Error::config("synth: noise_spread must be >= 1"));
        }
        let ranges = [
            ("speed", self.min_speed, self.max_speed),
            ("yaw_rate", self.min_yaw_rate, self.max_yaw_rate),
            ("decel", self.min_decel, self.max_decel),
        ];
        for (name, lo, hi) in ranges {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(Error::config(format!("synth: need 0 <= min_{name} <= max_{name}")));
            }
        }
        if self.min_decel == 0.0 {
            return Err(Error::config("synth: min_decel must be > 0"));
        }
        Ok(())
    }

    pub fn context_dim(&self) -> usize {
        FEATURES_PER_STEP * self.context_steps
    }
}

/// Noise-free kinematics relative to the current time `t = 0`, where the
/// agent is at the origin heading along +x.
#[derive(Debug, Clone, Copy)]
struct Kinematics {
    maneuver: Maneuver,
    speed: f64,
    yaw_rate: f64,
    decel: f64,
    onset: f64,
}

impl Kinematics {
    fn heading_slope(&self, t: f64) -> f64 {
        if self.maneuver == Maneuver::ConstantTurn && t > self.onset {
            self.yaw_rate
        } else {
            0.0
        }
    }

    fn heading(&self, t: f64) -> f64 {
        match self.maneuver {
            Maneuver::ConstantTurn => self.yaw_rate * (t.max(self.onset) - self.onset.max(0.0)),
            _ => 0.0,
        }
    }

    /// Distance travelled along the path since some fixed reference.
    fn arc_length(&self, t: f64) -> f64 {
        if self.maneuver != Maneuver::Stop || t <= self.onset {
            return self.speed * t;
        }
        let braking = (t - self.onset).min(self.speed / self.decel);
        self.speed * self.onset + self.speed * braking - 0.5 * self.decel * braking * braking
    }

    /// Position at `t`, integrating the path exactly: straight segments for
    /// constant heading, circular arcs for constant yaw rate.
    fn position(&self, t: f64) -> [f64; 2] {
        if self.maneuver != Maneuver::ConstantTurn {
            return [self.arc_length(t) - self.arc_length(0.0), 0.0];
        }
        let (lo, hi, sign) = if t >= 0.0 { (0.0, t, 1.0) } else { (t, 0.0, -1.0) };
        let mut cuts = vec![lo];
        if self.onset > lo && self.onset < hi {
            cuts.push(self.onset);
        }
        cuts.push(hi);
        let mut p = [0.0, 0.0];
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let slope = self.heading_slope(0.5 * (a + b));
            let (ha, hb) = (self.heading(a), self.heading(b));
            if slope == 0.0 {
                p[0] += self.speed * (b - a) * ha.cos();
                p[1] += self.speed * (b - a) * ha.sin();
            } else {
                p[0] += self.speed / slope * (hb.sin() - ha.sin());
                p[1] += self.speed / slope * (ha.cos() - hb.cos());
            }
        }
        [sign * p[0], sign * p[1]]
    }
}

fn generate_one(cfg: &SynthConfig, scene_id: u64, shifted: bool) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(scene_id);
    let (mix, base_noise) = if shifted {
        (cfg.shift.mix, cfg.noise * cfg.shift.noise_factor)
    } else {
        (cfg.mix, cfg.noise)
    };
    let k = cfg.context_steps;
    let l = cfg.horizon_steps;
    let dt = cfg.timestep;

    let maneuver = mix.draw(&mut rng);
    let speed = rng.gen_range(cfg.min_speed..=cfg.max_speed);
    let yaw = rng.gen_range(cfg.min_yaw_rate..=cfg.max_yaw_rate);
    let yaw_rate = if rng.gen_bool(0.5) { yaw } else { -yaw };
    let decel = rng.gen_range(cfg.min_decel..=cfg.max_decel);
    let onset = rng.gen_range(-(k as f64) * dt..=l as f64 * dt);
    let spread = cfg.noise_spread.ln();
    let noise = base_noise * rng.gen_range(-spread..=spread).exp();
    let kin = Kinematics {
        maneuver,
        speed,
        yaw_rate,
        decel,
        onset,
    };

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut positions = Vec::with_capacity(k + l + 1);
    for step in -(k as i64)..=(l as i64) {
        let [x, y] = kin.position(step as f64 * dt);
        positions.push([x + noise * normal.sample(&mut rng), y + noise * normal.sample(&mut rng)]);
    }
    let current = positions[k];
    let delta = |i: usize| [positions[i][0] - positions[i - 1][0], positions[i][1] - positions[i - 1][1]];

    let mut context = Vec::with_capacity(FEATURES_PER_STEP * k);
    for i in 1..=k {
        let d = delta(i);
        context.extend([positions[i][0] - current[0], positions[i][1] - current[1], d[0], d[1]]);
    }
    let target = Trajectory::new((k + 1..=k + l).map(delta).collect(), dt)?;
    Ok(SceneSample {
        scene_id,
        context,
        target,
        shifted,
    })
}

/// In-distribution scenes get ids `0..scenes`, shifted scenes follow. Each
/// scene draws from its own random stream, so changing the counts leaves
/// the remaining scenes untouched.
pub fn generate_scenes(config: &SynthConfig) -> Result<Vec<SceneSample>> {
    config.validate()?;
    let total = config.scenes + config.shifted_scenes;
    (0..total)
        .map(|i| generate_one(config, i as u64, i >= config.scenes))
        .collect()
}

/// Shape metadata shared by every scene in a set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneLayout {
    pub context_dim: usize,
    pub horizon: usize,
    pub timestep: f64,
}

impl SceneLayout {
    pub fn of(scenes: &[SceneSample]) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| Error::input("scene set is empty"))?;
        let layout = SceneLayout {
            context_dim: first.context.len(),
            horizon: first.target.horizon(),
            timestep: first.target.timestep(),
        };
        for s in scenes {
            if s.context.len() != layout.context_dim
                || s.target.horizon() != layout.horizon
                || s.target.timestep() != layout.timestep
            {
                return Err(Error::input(format!("scene {} does not match the set's layout", s.scene_id)));
            }
        }
        Ok(layout)
    }
}

/// Writes scenes as a comment line with the layout, a header row and one
/// row per scene: `scene_id, shifted, c0.., t0..` where the target is
/// flattened as `dx0, dy0, dx1, dy1, ...`.
pub fn write_scenes(path: &Path, scenes: &[SceneSample]) -> Result<()> {
    let layout = SceneLayout::of(scenes)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        out,
        "{SCENE_HEADER} context_dim={} horizon={} timestep={}",
        layout.context_dim, layout.horizon, layout.timestep
    )
    .map_err(io)?;
    let mut header = vec!["scene_id".to_string(), "shifted".to_string()];
    header.extend((0..layout.context_dim).map(|i| format!("c{i}")));
    header.extend((0..2 * layout.horizon).map(|i| format!("t{i}")));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for s in scenes {
        let mut row = vec![s.scene_id.to_string(), u8::from(s.shifted).to_string()];
        row.extend(s.context.iter().map(f64::to_string));
        row.extend(s.target.flat().iter().map(f64::to_string));
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn parse_layout(path: &Path, line: &str) -> Result<SceneLayout> {
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: msg.to_string(),
    };
    let rest = line
        .strip_prefix(SCENE_HEADER)
        .ok_or_else(|| bad("missing '# eauc-scenes v1' header"))?;
    let (mut context_dim, mut horizon, mut timestep) = (None, None, None);
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad("expected key=value in header"))?;
        match k {
            "context_dim" => context_dim = v.parse().ok(),
            "horizon" => horizon = v.parse().ok(),
            "timestep" => timestep = v.parse().ok(),
            _ => return Err(bad(&format!("unknown header key '{k}'"))),
        }
    }
    match (context_dim, horizon, timestep) {
        (Some(context_dim), Some(horizon), Some(timestep)) => Ok(SceneLayout {
            context_dim,
            horizon,
            timestep,
        }),
        _ => Err(bad("header must set context_dim, horizon and timestep")),
    }
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let layout = parse_layout(path, first.trim_end())?;
    let width = 2 + layout.context_dim + 2 * layout.horizon;

    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut scenes = Vec::new();
    for (row, record) in csv.records().enumerate() {
        // +1 for the layout line, +1 for the header row, +1 for 1-based lines.
        let line = row as u64 + 3;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != width {
            return Err(bad(format!("expected {width} fields, found {}", record.len())));
        }
        let scene_id: u64 = record[0].parse().map_err(|_| bad(format!("bad scene_id '{}'", &record[0])))?;
        let shifted = match &record[1] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("shifted must be 0 or 1, found '{other}'"))),
        };
        let values = record
            .iter()
            .skip(2)
            .enumerate()
            .map(|(i, v)| v.parse::<f64>().map_err(|_| bad(format!("column {}: not a number: '{v}'", i + 3))))
            .collect::<Result<Vec<f64>>>()?;
        let (context, target) = values.split_at(layout.context_dim);
        let target = Trajectory::from_flat(target, layout.timestep).map_err(|e| bad(e.to_string()))?;
        scenes.push(SceneSample {
            scene_id,
            context: context.to_vec(),
            target,
            shifted,
        });
    }
    if scenes.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 2,
            msg: "no scenes".into(),
        });
    }
    Ok(scenes)
}

/// Mean displacement error of repeating the last observed displacement over
/// the whole horizon. Assumes the context layout documented above.
pub fn constant_velocity_ade(scene: &SceneSample) -> f64 {
    let n = scene.context.len();
    let last = [scene.context[n - 2], scene.context[n - 1]];
    let states = scene.target.states();
    states
        .iter()
        .map(|s| (s[0] - last[0]).hypot(s[1] - last[1]))
        .sum::<f64>()
        / states.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.validation, self.test];
        if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split ratios must be non-negative and sum to 1"));
        }
        if self.train == 0.0 {
            return Err(Error::config("split ratios: train fraction must be > 0"));
        }
        Ok(())
    }

    /// Shuffles `0..n` with `seed` and cuts it into train/validation/test
    /// index lists. Counts are rounded, the test part takes the remainder.
    pub fn assign(&self, n: usize, seed: u64) -> Result<[Vec<usize>; 3]> {
        self.validate()?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((self.train * n as f64).round() as usize).clamp(1.min(n), n);
        let n_val = ((self.validation * n as f64).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok([idx, val, test])
    }
}

/// Per-column standardization computed on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardization {
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| v * s + m).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegressionSplit {
    /// Standardized features.
    pub x: Vec<Vec<f64>>,
    /// Raw targets.
    pub y: Vec<f64>,
    /// Row indices into the source file (0-based, excluding the header).
    pub rows: Vec<usize>,
}

impl RegressionSplit {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTable {
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub stats: Standardization,
    pub train: RegressionSplit,
    pub validation: RegressionSplit,
    pub test: RegressionSplit,
    pub split_seed: u64,
}

fn column_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reads a comma-separated table with a header row, splits rows with
/// `split_seed` and standardizes features with training-split statistics.
pub fn load_regression_table(path: &Path, target: &str, split_seed: u64, ratios: SplitRatios) -> Result<RegressionTable> {
    ratios.validate()?;
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(parse_err(1, "empty file".into()));
    }
    let target_col = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::input(format!("{}: target column '{target}' not found", path.display())))?;
    let feature_names: Vec<String> = headers.iter().enumerate().filter(|&(i, _)| i != target_col).map(|(_, h)| h.to_string()).collect();
    if feature_names.is_empty() {
        return Err(Error::input(format!("{}: no feature columns", path.display())));
    }

    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", headers.len(), record.len())));
        }
        let mut x = Vec::with_capacity(feature_names.len());
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("column '{}': not a finite number: '{cell}'", &headers[col])))?;
            if col == target_col {
                targets.push(v);
            } else {
                x.push(v);
            }
        }
        features.push(x);
    }
    if features.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }

    let [train_rows, val_rows, test_rows] = ratios.assign(features.len(), split_seed)?;
    let mut mean = Vec::with_capacity(feature_names.len());
    let mut std = Vec::with_capacity(feature_names.len());
    for (j, name) in feature_names.iter().enumerate() {
        let (m, s) = column_stats(train_rows.iter().map(|&r| features[r][j]));
        // A single training row fixes the centre but carries no scale.
        if train_rows.len() == 1 {
            mean.push(m);
            std.push(1.0);
            continue;
        }
        if !(s > 0.0) {
            return Err(Error::input(format!(
                "{}: column '{name}' has zero variance on the training split",
                path.display()
            )));
        }
        mean.push(m);
        std.push(s);
    }
    let (target_mean, target_std) = column_stats(train_rows.iter().map(|&r| targets[r]));
    let stats = Standardization {
        mean,
        std,
        target_mean,
        target_std: if target_std > 0.0 { target_std } else { 1.0 },
    };
    let build = |rows: Vec<usize>| RegressionSplit {
        x: rows.iter().map(|&r| stats.apply(&features[r])).collect(),
        y: rows.iter().map(|&r| targets[r]).collect(),
        rows,
    };
    Ok(RegressionTable {
        feature_names,
        target_name: target.to_string(),
        train: build(train_rows),
        validation: build(val_rows),
        test: build(test_rows),
        stats,
        split_seed,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            scenes: 60,
            shifted_scenes: 30,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn constant_velocity_without_noise_repeats_last_displacement() {
        let cfg = SynthConfig {
            noise: 0.0,
            mix: ManeuverMix {
                constant_velocity: 1.0,
                constant_turn: 0.0,
                stop: 0.0,
            },
            ..small(3)
        };
        for scene in generate_scenes(&cfg).unwrap().iter().filter(|s| !s.shifted) {
            let n = scene.context.len();
            let last = [scene.context[n - 2], scene.context[n - 1]];
            for s in scene.target.states() {
                assert!((s[0] - last[0]).abs() < 1e-12 && (s[1] - last[1]).abs() < 1e-12);
            }
            assert!(constant_velocity_ade(scene) < 1e-12);
        }
    }

    #[test]
    fn turns_follow_constant_yaw_rate_arcs() {
        let kin = Kinematics {
            maneuver: Maneuver::ConstantTurn,
            speed: 10.0,
            yaw_rate: 0.4,
            decel: 1.0,
            onset: -1.0,
        };
        // Already turning at t=0: every point lies on the circle of radius
        // v/w centred at (0, v/w).
        let r = 10.0 / 0.4;
        for t in [-1.0, -0.3, 0.5, 2.0, 4.0] {
            let [x, y] = kin.position(t);
            assert!((x.hypot(y - r) - r).abs() < 1e-9, "t={t}");
        }
        let before = kin.position(-2.0);
        let at_onset = kin.position(-1.0);
        // Straight before onset, along the onset heading.
        let h = kin.heading(-1.0);
        let back = [at_onset[0] - 10.0 * h.cos(), at_onset[1] - 10.0 * h.sin()];
        assert!((before[0] - back[0]).abs() < 1e-9 && (before[1] - back[1]).abs() < 1e-9);
    }

    #[test]
    fn stops_come_to_rest() {
        let kin = Kinematics {
            maneuver: Maneuver::Stop,
            speed: 8.0,
            yaw_rate: 0.0,
            decel: 4.0,
            onset: 1.0,
        };
        assert_eq!(kin.position(1.0), [8.0, 0.0]);
        // stopping distance v^2 / 2a after onset
        assert!((kin.position(10.0)[0] - (8.0 + 8.0)).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let a = generate_scenes(&small(11)).unwrap();
        let b = generate_scenes(&small(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 90);
        assert_eq!(a.iter().filter(|s| s.shifted).count(), 30);
        let layout = SceneLayout::of(&a).unwrap();
        assert_eq!(layout.context_dim, 20);
        assert_eq!(layout.horizon, 25);
        assert_ne!(a, generate_scenes(&small(12)).unwrap());

        let fewer = generate_scenes(&SynthConfig { scenes: 10, ..small(11) }).unwrap();
        assert_eq!(fewer[..10], a[..10]);
    }

    #[test]
    fn shifted_partition_is_harder_for_constant_velocity() {
        let cfg = SynthConfig {
            scenes: 300,
            shifted_scenes: 300,
            ..small(5)
        };
        let scenes = generate_scenes(&cfg).unwrap();
        let mean = |shifted: bool| {
            let v: Vec<f64> = scenes.iter().filter(|s| s.shifted == shifted).map(constant_velocity_ade).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false), "{} vs {}", mean(true), mean(false));
    }

    #[test]
    fn scene_file_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.csv");
        let scenes = generate_scenes(&small(2)).unwrap();
        write_scenes(&path, &scenes).unwrap();
        assert_eq!(read_scenes(&path).unwrap(), scenes);
    }

    #[test]
    fn scene_file_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "# eauc-scenes v1 context_dim=1 horizon=1 timestep=0.2\nscene_id,shifted,c0,t0,t1\n0,0,1,2,3\n1,0,1,x,3\n",
        )
        .unwrap();
        match read_scenes(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "scene_id\n").unwrap();
        assert!(matches!(read_scenes(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn invalid_synth_configs_are_rejected() {
        let mut cfg = small(0);
        cfg.mix.stop = 0.5;
        assert!(generate_scenes(&cfg).is_err());
        let cfg = SynthConfig { horizon_steps: 0, ..small(0) };
        assert!(generate_scenes(&cfg).is_err());
        let cfg = SynthConfig { noise: -1.0, ..small(0) };
        assert!(generate_scenes(&cfg).is_err());
    }

    fn write_table(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("table.csv");
        std::fs::write(&path, body).unwrap();
        path
    }

    const THIRDS: SplitRatios = SplitRatios {
        train: 1.0 / 3.0,
        validation: 1.0 / 3.0,
        test: 1.0 / 3.0,
    };

    #[test]
    fn three_row_table_splits_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_table(dir.path(), "a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
        let t1 = load_regression_table(&path, "y", 9, THIRDS).unwrap();
        let t2 = load_regression_table(&path, "y", 9, THIRDS).unwrap();
        assert_eq!(t1, t2);
        assert_eq!((t1.train.len(), t1.validation.len(), t1.test.len()), (1, 1, 1));
        let mut all: Vec<usize> = [&t1.train.rows, &t1.validation.rows, &t1.test.rows].into_iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn table_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ratios = SplitRatios::default();
        let constant = write_table(dir.path(), "a,flat,y\n1,5,1\n2,5,2\n3,5,3\n4,5,4\n");
        let err = load_regression_table(&constant, "y", 0, SplitRatios { train: 1.0, validation: 0.0, test: 0.0 }).unwrap_err();
        assert!(err.to_string().contains("'flat'"), "{err}");

        let path = write_table(dir.path(), "a,b\n1,2\n");
        let err = load_regression_table(&path, "y", 0, ratios).unwrap_err();
        assert!(err.to_string().contains("'y'"), "{err}");

        let path = write_table(dir.path(), "a,y\n1,2\n3,oops\n");
        match load_regression_table(&path, "y", 0, ratios) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("'y'"), "{msg}");
            }
            other => panic!("{other:?}"),
        }

        let path = write_table(dir.path(), "");
        assert!(load_regression_table(&path, "y", 0, ratios).is_err());
        let path = write_table(dir.path(), "a,y\n");
        assert!(load_regression_table(&path, "y", 0, ratios).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn splits_are_disjoint_and_cover(n in 1usize..200, seed in any::<u64>(), a in 0.1f64..0.8, b in 0.0f64..0.1) {
            let ratios = SplitRatios { train: a, validation: b, test: 1.0 - a - b };
            let [tr, va, te] = ratios.assign(n, seed).unwrap();
            let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn standardization_is_invertible_and_centred(
            rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 8..40),
            seed in any::<u64>()
        ) {
            let dir = tempfile::tempdir().unwrap();
            let mut body = String::from("a,b,y\n");
            for r in &rows {
                body.push_str(&format!("{},{},{}\n", r[0], r[1], r[2]));
            }
            let path = write_table(dir.path(), &body);
            let ratios = SplitRatios { train: 0.75, validation: 0.0, test: 0.25 };
            let table = match load_regression_table(&path, "y", seed, ratios) {
                Ok(t) => t,
                Err(_) => return Ok(()), // degenerate draw with a constant column
            };
            for (x, &r) in table.train.x.iter().zip(&table.train.rows) {
                let back = table.stats.invert(x);
                for j in 0..2 {
                    let orig = rows[r][j];
                    prop_assert!((back[j] - orig).abs() <= 1e-9 * orig.abs().max(1.0));
                }
            }
            for j in 0..2 {
                let col: Vec<f64> = table.train.x.iter().map(|x| x[j]).collect();
                let (m, s) = column_stats(col.iter().copied());
                prop_assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn scene_generation_is_pure(seed in any::<u64>()) {
            let cfg = SynthConfig { scenes: 3, shifted_scenes: 2, seed, ..SynthConfig::default() };
            let a = generate_scenes(&cfg).unwrap();
            let b = generate_scenes(&cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let bits = |s: &SceneSample| s.context.iter().chain(s.target.flat().iter()).map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(x), bits(y));
            }
        }
    }
}
