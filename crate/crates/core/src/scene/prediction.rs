use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrameTransform, Point};
use crate::error::{json_error, CoreError, Result};

pub const PREDICTION_SCHEMA: &str = "hamf-pred/1";

/// K candidate futures for the focal agent with their probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scenario_id: String,
    pub trajectories: Vec<Vec<Point>>,
    pub probabilities: Vec<f64>,
}

impl PredictionSet {
    pub fn num_modes(&self) -> usize {
        self.trajectories.len()
    }

    /// Checks the simplex / finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.trajectories.len();
        if k == 0 || self.probabilities.len() != k {
            return Err(CoreError::Invalid(format!(
                "prediction set '{}' has {} trajectories and {} probabilities",
                self.scenario_id,
                k,
                self.probabilities.len()
            )));
        }
        let sum: f64 = self.probabilities.iter().sum();
        if self.probabilities.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(CoreError::Invalid(format!(
                "prediction set '{}' probabilities are not a simplex (sum {sum})",
                self.scenario_id
            )));
        }
        let steps = self.trajectories[0].len();
        for tr in &self.trajectories {
            if tr.len() != steps || tr.iter().flatten().any(|v| !v.is_finite()) {
                return Err(CoreError::Invalid(format!(
                    "prediction set '{}' has ragged or non-finite trajectories",
                    self.scenario_id
                )));
            }
        }
        Ok(())
    }

    /// Mode indices sorted by descending probability (stable: ties keep index order).
    pub fn ranked_modes(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probabilities.len()).collect();
        idx.sort_by(|&a, &b| self.probabilities[b].total_cmp(&self.probabilities[a]));
        idx
    }
}

/// Maps focal-frame predictions back to world coordinates.
pub fn denormalize_predictions(p: &PredictionSet, t: &FrameTransform) -> PredictionSet {
    PredictionSet {
        scenario_id: p.scenario_id.clone(),
        trajectories: p.trajectories.iter().map(|tr| tr.iter().map(|&q| t.invert(q)).collect()).collect(),
        probabilities: p.probabilities.clone(),
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionFile {
    schema: String,
    #[serde(flatten)]
    predictions: PredictionSet,
}

#[derive(Deserialize)]
struct SchemaProbe {
    schema: String,
}

pub fn save_predictions(path: &Path, p: &PredictionSet) -> Result<()> {
    let file = PredictionFile { schema: PREDICTION_SCHEMA.to_string(), predictions: p.clone() };
    let text = serde_json::to_string_pretty(&file).expect("prediction set serializes");
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<PredictionSet> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let probe: SchemaProbe = serde_json::from_str(&text).map_err(|e| json_error(&text, &e))?;
    if probe.schema != PREDICTION_SCHEMA {
        return Err(CoreError::Version { found: probe.schema, expected: PREDICTION_SCHEMA });
    }
    let file: PredictionFile = serde_json::from_str(&text).map_err(|e| json_error(&text, &e))?;
    file.predictions.validate()?;
    Ok(file.predictions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PredictionSet {
        PredictionSet {
            scenario_id: "s".into(),
            trajectories: vec![vec![[1.0, 2.0], [3.0, -4.0]], vec![[0.5, 0.5], [0.0, 0.0]]],
            probabilities: vec![0.25, 0.75],
        }
    }

    #[test]
    fn identity_and_translation() {
        let p = sample();
        assert_eq!(denormalize_predictions(&p, &FrameTransform::IDENTITY), p);
        let shifted = denormalize_predictions(&p, &FrameTransform { translation: [5.0, 0.0], rotation: 0.0 });
        for (a, b) in shifted.trajectories.iter().flatten().zip(p.trajectories.iter().flatten()) {
            assert_eq!(*a, [b[0] + 5.0, b[1]]);
        }
        assert_eq!(shifted.probabilities, p.probabilities);
    }

    #[test]
    fn rotation_round_trip() {
        let p = sample();
        let t = FrameTransform { translation: [-3.0, 8.0], rotation: 2.1 };
        let world = denormalize_predictions(&p, &t);
        for (a, b) in world.trajectories.iter().flatten().zip(p.trajectories.iter().flatten()) {
            let back = t.apply(*a);
            assert!((back[0] - b[0]).abs() < 1e-9 && (back[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn ranked_modes_is_stable() {
        let mut p = sample();
        p.probabilities = vec![0.5, 0.5];
        assert_eq!(p.ranked_modes(), vec![0, 1]);
    }
}
