//! Vectorized scenarios: agent tracks, map polylines, the focal frame, file IO,
//! the synthetic generator and kinematic baselines.

mod audit;
mod baseline;
mod generate;
mod io;
mod prediction;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use audit::{audit_scenario, AuditReport};
pub use baseline::constant_velocity_baseline;
pub use generate::{generate_scenario, generate_scenario_with, GeneratorConfig, Template};
pub use io::{load_scenario, parse_scenario, save_scenario, scenario_to_json, SCENARIO_SCHEMA};
pub use prediction::{denormalize_predictions, load_predictions, save_predictions, PredictionSet, PREDICTION_SCHEMA};

/// Points per map polyline.
pub const POLYLINE_POINTS: usize = 20;
pub const SAMPLE_RATE_HZ: u32 = 10;
pub const HISTORY_STEPS: usize = 50;
pub const FUTURE_STEPS: usize = 60;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentCategory {
    Vehicle,
    Pedestrian,
    Cyclist,
    Other,
}

impl AgentCategory {
    pub const ALL: [AgentCategory; 4] = [Self::Vehicle, Self::Pedestrian, Self::Cyclist, Self::Other];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneType {
    Lane,
    Crosswalk,
    Boundary,
}

impl LaneType {
    pub const ALL: [LaneType; 3] = [Self::Lane, Self::Crosswalk, Self::Boundary];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One agent over history + future. Padded steps carry `valid = false` and zero coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub positions: Vec<Point>,
    pub headings: Vec<f64>,
    pub valid: Vec<bool>,
    pub category: AgentCategory,
}

impl AgentTrack {
    /// Index of the last valid step among the first `history` steps.
    pub fn last_observed(&self, history: usize) -> Option<usize> {
        (0..history.min(self.valid.len())).rev().find(|&t| self.valid[t])
    }

    pub fn observed_count(&self, history: usize) -> usize {
        self.valid.iter().take(history).filter(|&&v| v).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub points: Vec<Point>,
    pub valid: Vec<bool>,
    pub lane_type: LaneType,
}

impl MapPolyline {
    /// Resamples `path` at `POLYLINE_POINTS` uniform arc-length positions.
    pub fn resampled(path: &[Point], lane_type: LaneType) -> Self {
        MapPolyline { points: resample_uniform(path, POLYLINE_POINTS), valid: vec![true; POLYLINE_POINTS], lane_type }
    }

    pub fn valid_points(&self) -> impl Iterator<Item = Point> + '_ {
        self.points.iter().zip(&self.valid).filter(|(_, &v)| v).map(|(p, _)| *p)
    }

    /// Point and tangent heading at half the polyline's arc length (valid points only).
    pub fn midpoint_pose(&self) -> (Point, f64) {
        let pts: Vec<Point> = self.valid_points().collect();
        let total: f64 = pts.windows(2).map(|w| dist(w[0], w[1])).sum();
        let mut remaining = total / 2.0;
        let segments = pts.len().saturating_sub(1);
        for (i, w) in pts.windows(2).enumerate() {
            let d = dist(w[0], w[1]);
            if remaining <= d || i + 1 == segments {
                let f = if d > 0.0 { (remaining / d).min(1.0) } else { 0.0 };
                let p = [w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])];
                return (p, (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]));
            }
            remaining -= d;
        }
        (pts.first().copied().unwrap_or([0.0, 0.0]), 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub sample_rate: u32,
    pub history_steps: usize,
    pub future_steps: usize,
    pub focal_index: usize,
    pub agents: Vec<AgentTrack>,
    pub map: Vec<MapPolyline>,
}

impl Scenario {
    pub fn total_steps(&self) -> usize {
        self.history_steps + self.future_steps
    }

    pub fn focal(&self) -> &AgentTrack {
        &self.agents[self.focal_index]
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate as f64
    }

    /// Focal future positions and their validity.
    pub fn focal_future(&self) -> (Vec<Point>, Vec<bool>) {
        let f = self.focal();
        let h = self.history_steps;
        (f.positions[h..].to_vec(), f.valid[h..].to_vec())
    }

    /// Checks the structural invariants of the type.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::scenario(&self.id, msg));
        if self.sample_rate == 0 || self.history_steps == 0 || self.future_steps == 0 {
            return bad("sample rate and horizons must be positive".into());
        }
        if self.agents.is_empty() || self.focal_index >= self.agents.len() {
            return bad(format!("focal index {} out of {} agents", self.focal_index, self.agents.len()));
        }
        if self.map.is_empty() {
            return bad("no map polylines".into());
        }
        let n = self.total_steps();
        for (i, a) in self.agents.iter().enumerate() {
            if a.positions.len() != n || a.headings.len() != n || a.valid.len() != n {
                return bad(format!("agent {i} does not have {n} steps"));
            }
            for t in 0..n {
                let finite = a.positions[t].iter().all(|v| v.is_finite()) && a.headings[t].is_finite();
                if a.valid[t] && !finite {
                    return bad(format!("agent {i} step {t} is not finite"));
                }
                if !a.valid[t] && (a.positions[t] != [0.0, 0.0] || a.headings[t] != 0.0) {
                    return bad(format!("agent {i} padded step {t} is not zeroed"));
                }
            }
        }
        for (m, p) in self.map.iter().enumerate() {
            if p.points.len() != POLYLINE_POINTS || p.valid.len() != POLYLINE_POINTS {
                return bad(format!("polyline {m} does not have {POLYLINE_POINTS} points"));
            }
            let pts: Vec<Point> = p.valid_points().collect();
            if pts.len() < 2 {
                return bad(format!("polyline {m} has fewer than 2 valid points"));
            }
            if pts.iter().any(|q| !q[0].is_finite() || !q[1].is_finite()) {
                return bad(format!("polyline {m} has non-finite points"));
            }
            if pts.windows(2).any(|w| w[0] == w[1]) {
                return bad(format!("polyline {m} repeats a point"));
            }
        }
        Ok(())
    }
}

/// Planar rigid transform. `apply` maps world coordinates into the frame whose
/// origin is `translation` and whose x-axis points along `rotation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub translation: Point,
    pub rotation: f64,
}

impl FrameTransform {
    pub const IDENTITY: FrameTransform = FrameTransform { translation: [0.0, 0.0], rotation: 0.0 };

    /// World → frame.
    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (p[0] - self.translation[0], p[1] - self.translation[1]);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Frame → world.
    pub fn invert(&self, q: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        [c * q[0] - s * q[1] + self.translation[0], s * q[0] + c * q[1] + self.translation[1]]
    }

    pub fn apply_heading(&self, h: f64) -> f64 {
        wrap_angle(h - self.rotation)
    }

    pub fn invert_heading(&self, h: f64) -> f64 {
        wrap_angle(h + self.rotation)
    }
}

/// A scenario expressed in its focal frame, plus the transform that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedScene {
    pub scenario: Scenario,
    pub transform: FrameTransform,
}

impl NormalizedScene {
    pub fn denormalize(&self) -> Scenario {
        let t = self.transform;
        map_scenario(&self.scenario, |p| t.invert(p), |h| t.invert_heading(h))
    }
}

/// Expresses every coordinate in the frame of the focal agent's last valid observed pose.
pub fn normalize_to_focal(s: &Scenario) -> Result<NormalizedScene> {
    if s.focal_index >= s.agents.len() {
        return Err(CoreError::scenario(&s.id, "focal index out of range"));
    }
    let focal = s.focal();
    let t = focal
        .last_observed(s.history_steps)
        .ok_or_else(|| CoreError::scenario(&s.id, "focal agent has no valid observed step"))?;
    let transform = FrameTransform { translation: focal.positions[t], rotation: focal.headings[t] };
    let scenario = map_scenario(s, |p| transform.apply(p), |h| transform.apply_heading(h));
    Ok(NormalizedScene { scenario, transform })
}

/// Applies a point and heading map to every valid coordinate; padded slots stay zero.
pub fn map_scenario(s: &Scenario, point: impl Fn(Point) -> Point, heading: impl Fn(f64) -> f64) -> Scenario {
    let mut out = s.clone();
    for a in &mut out.agents {
        for t in 0..a.valid.len() {
            if a.valid[t] {
                a.positions[t] = point(a.positions[t]);
                a.headings[t] = heading(a.headings[t]);
            }
        }
    }
    for p in &mut out.map {
        for k in 0..p.valid.len() {
            if p.valid[k] {
                p.points[k] = point(p.points[k]);
            }
        }
    }
    out
}

/// Applies `g` (frame → world direction, i.e. `g.invert`) to the whole scenario.
pub fn transform_scenario(s: &Scenario, g: FrameTransform) -> Scenario {
    map_scenario(s, |p| g.invert(p), |h| g.invert_heading(h))
}

/// Wraps to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Resamples a polyline at `n` points equally spaced in arc length.
pub fn resample_uniform(path: &[Point], n: usize) -> Vec<Point> {
    assert!(path.len() >= 2 && n >= 2);
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let target = total * i as f64 / (n - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let f = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (path[seg], path[seg + 1]);
        out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
    }
    out
}

/// Distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let f = if len2 > 0.0 { (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist(p, [a[0] + f * vx, a[1] + f * vy])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-FRAC_PI_2 - 2.0 * std::f64::consts::PI) + FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn transform_round_trip() {
        let t = FrameTransform { translation: [10.0, -3.0], rotation: FRAC_PI_2 };
        let q = t.apply([10.0, -3.0]);
        assert_eq!(q, [0.0, 0.0]);
        let q = t.apply([10.0, -1.0]);
        assert!((q[0] - 2.0).abs() < 1e-12 && q[1].abs() < 1e-12);
        let p = t.invert(t.apply([1.5, 7.25]));
        assert!((p[0] - 1.5).abs() < 1e-12 && (p[1] - 7.25).abs() < 1e-12);
    }

    #[test]
    fn resample_keeps_endpoints_and_spacing() {
        let out = resample_uniform(&[[0.0, 0.0], [3.0, 0.0], [3.0, 6.0]], 4);
        assert_eq!(out[0], [0.0, 0.0]);
        assert_eq!(out[3], [3.0, 6.0]);
        assert!((out[1][0] - 3.0).abs() < 1e-12 && out[1][1].abs() < 1e-12);
        assert!((out[2][1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_pose_of_straight_line() {
        let p = MapPolyline::resampled(&[[0.0, 0.0], [0.0, 19.0]], LaneType::Lane);
        let (m, h) = p.midpoint_pose();
        assert!(m[0].abs() < 1e-12 && (m[1] - 9.5).abs() < 1e-12);
        assert!((h - FRAC_PI_2).abs() < 1e-12);
    }
}
