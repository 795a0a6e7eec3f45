use super::{dist, point_segment_distance, LaneType, Scenario};

/// Kinematic and geometric checks applied to generated scenarios.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub scenario_id: String,
    pub violations: Vec<String>,
    pub max_speed: f64,
    pub max_accel: f64,
    /// Largest distance from a valid focal future point to the nearest lane centerline.
    pub max_lane_distance: f64,
    /// Distance from the last observed focal position to its final valid future position.
    pub final_displacement: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const SPEED_LIMIT: f64 = 20.0;
pub const ACCEL_LIMIT: f64 = 4.0;
pub const LANE_TOLERANCE: f64 = 2.0;
const SLACK: f64 = 1e-6;

pub fn audit_scenario(s: &Scenario) -> AuditReport {
    let mut violations = Vec::new();
    if let Err(e) = s.validate() {
        violations.push(e.to_string());
    }
    let dt = s.dt();
    let (mut max_speed, mut max_accel) = (0.0f64, 0.0f64);
    for (i, a) in s.agents.iter().enumerate() {
        let n = a.valid.len().min(a.positions.len());
        for t in 1..n {
            if a.valid[t] && a.valid[t - 1] {
                let v = dist(a.positions[t], a.positions[t - 1]) / dt;
                max_speed = max_speed.max(v);
                if v > SPEED_LIMIT + SLACK {
                    violations.push(format!("agent {i} speed {v:.3} m/s at step {t}"));
                }
            }
            if t + 1 < n && a.valid[t - 1] && a.valid[t] && a.valid[t + 1] {
                let (p0, p1, p2) = (a.positions[t - 1], a.positions[t], a.positions[t + 1]);
                let acc = (p2[0] - 2.0 * p1[0] + p0[0]).hypot(p2[1] - 2.0 * p1[1] + p0[1]) / (dt * dt);
                max_accel = max_accel.max(acc);
                if acc > ACCEL_LIMIT + SLACK {
                    violations.push(format!("agent {i} acceleration {acc:.3} m/s² at step {t}"));
                }
            }
        }
    }

    let mut max_lane_distance = 0.0f64;
    let mut final_displacement = 0.0;
    if s.focal_index < s.agents.len() {
        let focal = s.focal();
        let lanes: Vec<Vec<[f64; 2]>> =
            s.map.iter().filter(|p| p.lane_type == LaneType::Lane).map(|p| p.valid_points().collect()).collect();
        for t in s.history_steps..focal.valid.len() {
            if !focal.valid[t] {
                continue;
            }
            let d = lanes
                .iter()
                .flat_map(|l| l.windows(2).map(|w| point_segment_distance(focal.positions[t], w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            max_lane_distance = max_lane_distance.max(d);
        }
        if max_lane_distance > LANE_TOLERANCE {
            violations.push(format!("focal future leaves the lanes by {max_lane_distance:.3} m"));
        }
        let last = focal.last_observed(s.history_steps);
        let end = (s.history_steps..focal.valid.len()).rev().find(|&t| focal.valid[t]);
        if let (Some(a), Some(b)) = (last, end) {
            final_displacement = dist(focal.positions[a], focal.positions[b]);
            let horizon = (b - a) as f64 * dt;
            if final_displacement > SPEED_LIMIT * horizon + SLACK {
                violations.push(format!("focal displacement {final_displacement:.3} m exceeds the speed bound"));
            }
        } else {
            violations.push("focal agent has no valid future".into());
        }
    }
    AuditReport { scenario_id: s.id.clone(), violations, max_speed, max_accel, max_lane_distance, final_displacement }
}
