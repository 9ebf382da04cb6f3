//! Dataset assembly for the harness.

use crate::datasets::{generate_scenes, load_regression_table, read_scenes, RegressionTable, SceneLayout};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::trajectory::SceneSample;

/// Scenes split for one experiment. In-distribution scenes are divided by
/// the configured ratios; every shifted scene lands in `test`. Each split
/// is ordered by scene id.
#[derive(Debug, Clone)]
pub struct TrajectoryData {
    pub layout: SceneLayout,
    pub train: Vec<SceneSample>,
    pub validation: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl TrajectoryData {
    pub fn from_scenes(scenes: Vec<SceneSample>, cfg: &ExperimentConfig) -> Result<Self> {
        let layout = SceneLayout::of(&scenes)?;
        let (shifted, ind): (Vec<SceneSample>, Vec<SceneSample>) = scenes.into_iter().partition(|s| s.shifted);
        if ind.is_empty() {
            return Err(Error::input("scene set has no in-distribution scenes to train on"));
        }
        let [tr, va, te] = cfg.data.split.assign(ind.len(), cfg.data.split_seed)?;
        let pick = |idx: Vec<usize>| {
            let mut v: Vec<SceneSample> = idx.into_iter().map(|i| ind[i].clone()).collect();
            v.sort_by_key(|s| s.scene_id);
            v
        };
        let (train, validation) = (pick(tr), pick(va));
        let mut test = pick(te);
        test.extend(shifted);
        test.sort_by_key(|s| s.scene_id);
        Ok(TrajectoryData {
            layout,
            train,
            validation,
            test,
        })
    }

    /// Reads `data.scenes_file` or generates scenes from `[synth]`.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let scenes = match &cfg.data.scenes_file {
            Some(path) => read_scenes(path)?,
            None => generate_scenes(&cfg.synth)?,
        };
        TrajectoryData::from_scenes(scenes, cfg)
    }
}

pub fn load_table(cfg: &ExperimentConfig) -> Result<RegressionTable> {
    let path = cfg
        .data
        .table_file
        .as_ref()
        .ok_or_else(|| Error::config("regression task needs data.table_file"))?;
    let table = load_regression_table(path, &cfg.data.target_column, cfg.data.split_seed, cfg.data.split)?;
    if table.test.is_empty() {
        return Err(Error::config("regression: test split is empty"));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::SynthConfig;

    #[test]
    fn shifted_scenes_only_in_test() {
        let mut cfg = ExperimentConfig::default();
        cfg.synth = SynthConfig {
            scenes: 40,
            shifted_scenes: 10,
            ..SynthConfig::default()
        };
        let data = TrajectoryData::load(&cfg).unwrap();
        assert_eq!(data.train.len() + data.validation.len() + data.test.len(), 50);
        assert!(data.train.iter().chain(&data.validation).all(|s| !s.shifted));
        assert_eq!(data.test.iter().filter(|s| s.shifted).count(), 10);
        assert_eq!(data.train.len(), 28);
        assert!(data.test.windows(2).all(|w| w[0].scene_id < w[1].scene_id));
    }
}
