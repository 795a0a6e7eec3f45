//! Model-ready arrays extracted from a focal-normalized scenario.

use crate::error::{CoreError, Result};
use crate::scene::{normalize_to_focal, AgentCategory, FrameTransform, LaneType, Point, Scenario};

/// Per-step agent channels: Δx, Δy, cos(heading), sin(heading), valid.
pub const AGENT_CHANNELS: usize = 5;
/// Per-point map channels: x, y (relative to the polyline reference point), Δx, Δy
/// to the next point, lane-type one-hot (3), valid.
pub const MAP_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput {
    pub id: String,
    pub history: usize,
    pub future: usize,
    pub n_agents: usize,
    pub n_polylines: usize,
    pub points_per_polyline: usize,
    pub focal: usize,
    /// `[N, T_h, AGENT_CHANNELS]`
    pub agent_steps: Vec<f64>,
    /// `[N, T_h]`
    pub agent_step_valid: Vec<bool>,
    /// Last valid observed step per agent; `None` for fully padded histories.
    pub agent_last: Vec<Option<usize>>,
    /// Reference pose (x, y, cos, sin) per agent: its last observed pose.
    pub agent_pose: Vec<[f64; 4]>,
    pub agent_category: Vec<AgentCategory>,
    /// `[M, L, MAP_CHANNELS]`
    pub map_points: Vec<f64>,
    /// `[M, L]`
    pub map_point_valid: Vec<bool>,
    /// Arc-length midpoint pose per polyline.
    pub map_pose: Vec<[f64; 4]>,
    pub lane_type: Vec<LaneType>,
    /// Focal future in the focal frame, `[T_f]`.
    pub target: Vec<Point>,
    pub target_valid: Vec<bool>,
    /// Future offsets of every agent from its own last observed position, `[N, T_f]`.
    /// Only surrounding agents with an observed history are marked valid.
    pub aux_target: Vec<Point>,
    pub aux_valid: Vec<bool>,
    pub transform: FrameTransform,
}

impl SceneInput {
    pub fn n_tokens(&self) -> usize {
        self.n_agents + self.n_polylines
    }

    /// Validity of the scene tokens (agents first, then polylines).
    pub fn token_valid(&self) -> Vec<bool> {
        self.agent_last
            .iter()
            .map(Option::is_some)
            .chain((0..self.n_polylines).map(|m| {
                let l = self.points_per_polyline;
                self.map_point_valid[m * l..(m + 1) * l].iter().any(|&v| v)
            }))
            .collect()
    }

    /// Reference poses of all scene tokens, agents first.
    pub fn token_poses(&self) -> Vec<[f64; 4]> {
        self.agent_pose.iter().chain(&self.map_pose).copied().collect()
    }

    pub fn has_valid_target(&self) -> bool {
        self.target_valid.iter().any(|&v| v)
    }
}

fn pose(p: Point, h: f64) -> [f64; 4] {
    [p[0], p[1], h.cos(), h.sin()]
}

/// Normalizes `s` to its focal frame and extracts the model inputs and targets.
pub fn scene_input(s: &Scenario) -> Result<SceneInput> {
    s.validate()?;
    let norm = normalize_to_focal(s)?;
    let s = &norm.scenario;
    let (h, fut) = (s.history_steps, s.future_steps);
    let n = s.agents.len();

    let mut agent_steps = vec![0.0; n * h * AGENT_CHANNELS];
    let mut agent_step_valid = vec![false; n * h];
    let mut agent_last = Vec::with_capacity(n);
    let mut agent_pose = Vec::with_capacity(n);
    let mut aux_target = vec![[0.0, 0.0]; n * fut];
    let mut aux_valid = vec![false; n * fut];
    for (i, a) in s.agents.iter().enumerate() {
        let mut prev: Option<Point> = None;
        for t in 0..h {
            if !a.valid[t] {
                continue;
            }
            let p = a.positions[t];
            let d = prev.map_or([0.0, 0.0], |q| [p[0] - q[0], p[1] - q[1]]);
            let row = &mut agent_steps[(i * h + t) * AGENT_CHANNELS..(i * h + t + 1) * AGENT_CHANNELS];
            row.copy_from_slice(&[d[0], d[1], a.headings[t].cos(), a.headings[t].sin(), 1.0]);
            agent_step_valid[i * h + t] = true;
            prev = Some(p);
        }
        let last = a.last_observed(h);
        agent_last.push(last);
        agent_pose.push(last.map_or([0.0; 4], |t| pose(a.positions[t], a.headings[t])));
        if let (Some(t0), true) = (last, i != s.focal_index) {
            let origin = a.positions[t0];
            for k in 0..fut {
                if a.valid[h + k] {
                    let p = a.positions[h + k];
                    aux_target[i * fut + k] = [p[0] - origin[0], p[1] - origin[1]];
                    aux_valid[i * fut + k] = true;
                }
            }
        }
    }

    let m = s.map.len();
    let l = s.map.first().map_or(0, |p| p.points.len());
    let mut map_points = vec![0.0; m * l * MAP_CHANNELS];
    let mut map_point_valid = vec![false; m * l];
    let mut map_pose = Vec::with_capacity(m);
    for (j, poly) in s.map.iter().enumerate() {
        if poly.points.len() != l {
            return Err(CoreError::scenario(&s.id, "polylines have different point counts"));
        }
        let (mid, heading) = poly.midpoint_pose();
        map_pose.push(pose(mid, heading));
        let valid_idx: Vec<usize> = (0..l).filter(|&k| poly.valid[k]).collect();
        for (pos, &k) in valid_idx.iter().enumerate() {
            let p = poly.points[k];
            let next = valid_idx.get(pos + 1).map_or(p, |&q| poly.points[q]);
            let mut row = [0.0; MAP_CHANNELS];
            row[0] = p[0] - mid[0];
            row[1] = p[1] - mid[1];
            row[2] = next[0] - p[0];
            row[3] = next[1] - p[1];
            row[4 + poly.lane_type.index()] = 1.0;
            row[7] = 1.0;
            map_points[(j * l + k) * MAP_CHANNELS..(j * l + k + 1) * MAP_CHANNELS].copy_from_slice(&row);
            map_point_valid[j * l + k] = true;
        }
    }

    let (target, target_valid) = s.focal_future();
    Ok(SceneInput {
        id: s.id.clone(),
        history: h,
        future: fut,
        n_agents: n,
        n_polylines: m,
        points_per_polyline: l,
        focal: s.focal_index,
        agent_steps,
        agent_step_valid,
        agent_last,
        agent_pose,
        agent_category: s.agents.iter().map(|a| a.category).collect(),
        map_points,
        map_point_valid,
        map_pose,
        lane_type: s.map.iter().map(|p| p.lane_type).collect(),
        target,
        target_valid,
        aux_target,
        aux_valid,
        transform: norm.transform,
    })
}
