//! Trajectory, scene and plan-set types shared by the model, the metrics and
//! the dataset generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sequence of planar per-step displacements `(dx, dy)` in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    states: Vec<[f64; 2]>,
    timestep: f64,
}

impl Trajectory {
    pub fn new(states: Vec<[f64; 2]>, timestep: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::input("trajectory must have at least one state"));
        }
        if let Some(t) = states.iter().position(|s| !s[0].is_finite() || !s[1].is_finite()) {
            return Err(Error::input(format!("trajectory state {t} is not finite")));
        }
        if !(timestep > 0.0) {
            return Err(Error::input(format!("timestep must be positive, got {timestep}")));
        }
        Ok(Trajectory { states, timestep })
    }

    /// Builds from a flat `[dx0, dy0, dx1, dy1, ...]` slice.
    pub fn from_flat(flat: &[f64], timestep: f64) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::input("flat trajectory must have an even number of values"));
        }
        Trajectory::new(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(), timestep)
    }

    pub fn states(&self) -> &[[f64; 2]] {
        &self.states
    }

    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn timestep(&self) -> f64 {
        self.timestep
    }

    pub fn flat(&self) -> Vec<f64> {
        self.states.iter().flat_map(|s| s.iter().copied()).collect()
    }
}

/// One scene: history features and the future to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub scene_id: u64,
    pub context: Vec<f64>,
    pub target: Trajectory,
    pub shifted: bool,
}

/// Top-ranked predicted trajectories for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSet {
    /// Ordered by descending certainty.
    pub plans: Vec<Trajectory>,
    /// Per-trajectory log-likelihood scores, non-increasing.
    pub certainties: Vec<f64>,
    /// Per-prediction uncertainty, the negated mean certainty.
    pub uncertainty: f64,
}

impl PlanSet {
    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }
}
