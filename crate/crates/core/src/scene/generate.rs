use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    AgentCategory, AgentTrack, FrameTransform, LaneType, MapPolyline, Point, Scenario, FUTURE_STEPS, HISTORY_STEPS,
    SAMPLE_RATE_HZ,
};
use crate::error::{CoreError, Result};

const LANE_WIDTH: f64 = 3.5;
const MAX_SPEED: f64 = 20.0;
/// Cap on centripetal acceleration used when choosing speeds for curved paths.
const LATERAL_BUDGET: f64 = 1.8;
const MAX_PIECE_LEN: f64 = 60.0;
/// Road length kept behind the first history position.
const LEAD: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    LeftTurn,
    RightTurn,
    LaneChange,
    Stop,
    IntersectionMix,
}

impl Template {
    pub const ALL: [Template; 6] =
        [Self::Straight, Self::LeftTurn, Self::RightTurn, Self::LaneChange, Self::Stop, Self::IntersectionMix];

    pub fn name(self) -> &'static str {
        match self {
            Self::Straight => "straight",
            Self::LeftTurn => "left_turn",
            Self::RightTurn => "right_turn",
            Self::LaneChange => "lane_change",
            Self::Stop => "stop",
            Self::IntersectionMix => "intersection_mix",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CoreError::Unknown { kind: "template", name: s.to_string() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub history_steps: usize,
    pub future_steps: usize,
    pub sample_rate: u32,
    /// Scale of speed and lateral perturbations; 0 reproduces the bare template.
    pub noise: f64,
    /// Place each scenario at a random global position and orientation.
    pub random_pose: bool,
    /// Probability that an agent track starts late or ends early.
    pub partial_tracks: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            history_steps: HISTORY_STEPS,
            future_steps: FUTURE_STEPS,
            sample_rate: SAMPLE_RATE_HZ,
            noise: 1.0,
            random_pose: true,
            partial_tracks: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn noiseless() -> Self {
        Self { noise: 0.0, partial_tracks: 0.0, ..Self::default() }
    }
}

pub fn generate_scenario(seed: u64, template: Template, n_agents: usize, n_polylines: usize) -> Result<Scenario> {
    generate_scenario_with(&GeneratorConfig::default(), seed, template, n_agents, n_polylines)
}

/// Builds one synthetic scenario. Deterministic in `(config, seed, template, sizes)`.
pub fn generate_scenario_with(
    config: &GeneratorConfig,
    seed: u64,
    template: Template,
    n_agents: usize,
    n_polylines: usize,
) -> Result<Scenario> {
    if n_agents < 1 || n_polylines < 1 {
        return Err(CoreError::Invalid("need at least one agent and one polyline".into()));
    }
    if config.history_steps < 2 || config.future_steps < 1 || config.sample_rate == 0 {
        return Err(CoreError::Config("generator horizons must be positive".into()));
    }
    if !(config.noise >= 0.0) || !(0.0..=1.0).contains(&config.partial_tracks) {
        return Err(CoreError::Config("noise must be ≥ 0 and partial_tracks in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (template as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut g = Builder::new(config, &mut rng);
    let plan = g.plan(template);
    let mut agents = vec![g.focal_track(&plan)];
    let mut polylines = g.map(&plan, n_polylines);
    for _ in 1..n_agents {
        let track = g.other_track(&plan);
        agents.push(track);
    }

    let pose = if config.random_pose {
        FrameTransform {
            translation: [g.rng.random_range(-500.0..500.0), g.rng.random_range(-500.0..500.0)],
            rotation: g.rng.random_range(-PI..PI),
        }
    } else {
        FrameTransform::IDENTITY
    };
    for a in &mut agents {
        for t in 0..a.valid.len() {
            if a.valid[t] {
                a.positions[t] = pose.invert(a.positions[t]);
                a.headings[t] = pose.invert_heading(a.headings[t]);
            }
        }
    }
    for p in &mut polylines {
        for q in &mut p.points {
            *q = pose.invert(*q);
        }
    }
    let s = Scenario {
        id: format!("{}-{seed:08}", template.name()),
        sample_rate: config.sample_rate,
        history_steps: config.history_steps,
        future_steps: config.future_steps,
        focal_index: 0,
        agents,
        map: polylines,
    };
    s.validate()?;
    Ok(s)
}

#[derive(Clone, Copy, Debug)]
enum Piece {
    Line {
        len: f64,
    },
    /// Signed sweep: positive turns left.
    Arc {
        radius: f64,
        sweep: f64,
    },
    /// Smooth lateral displacement by `offset` (positive = left) over `len` meters.
    Shift {
        len: f64,
        offset: f64,
    },
}

impl Piece {
    fn len(&self) -> f64 {
        match *self {
            Piece::Line { len } | Piece::Shift { len, .. } => len,
            Piece::Arc { radius, sweep } => radius * sweep.abs(),
        }
    }

    fn pose(&self, start: Point, h0: f64, u: f64) -> (Point, f64) {
        let (fwd, left) = ([h0.cos(), h0.sin()], [-h0.sin(), h0.cos()]);
        match *self {
            Piece::Line { .. } => ([start[0] + u * fwd[0], start[1] + u * fwd[1]], h0),
            Piece::Arc { radius, sweep } => {
                let sign = sweep.signum();
                let h = h0 + sign * u / radius;
                let p =
                    [start[0] + sign * radius * (h.sin() - h0.sin()), start[1] - sign * radius * (h.cos() - h0.cos())];
                (p, h)
            }
            Piece::Shift { len, offset } => {
                let f = u / len;
                let d = offset * (1.0 - (PI * f).cos()) / 2.0;
                let slope = offset * PI / (2.0 * len) * (PI * f).sin();
                let p = [start[0] + u * fwd[0] + d * left[0], start[1] + u * fwd[1] + d * left[1]];
                (p, h0 + slope.atan())
            }
        }
    }
}

/// Piecewise reference path evaluated analytically by arc length.
#[derive(Clone, Debug)]
struct Path {
    start: Point,
    heading: f64,
    pieces: Vec<Piece>,
}

impl Path {
    fn straight(start: Point, heading: f64, len: f64) -> Self {
        Path { start, heading, pieces: vec![Piece::Line { len }] }
    }

    fn length(&self) -> f64 {
        self.pieces.iter().map(Piece::len).sum()
    }

    /// Pose at arc length `s`; the path is extended straight before its start and past its end.
    fn pose(&self, s: f64) -> (Point, f64) {
        let (mut p, mut h) = (self.start, self.heading);
        if s < 0.0 {
            return ([p[0] + s * h.cos(), p[1] + s * h.sin()], h);
        }
        let mut rest = s;
        for piece in &self.pieces {
            let len = piece.len();
            if rest <= len {
                return piece.pose(p, h, rest);
            }
            (p, h) = piece.pose(p, h, len);
            rest -= len;
        }
        ([p[0] + rest * h.cos(), p[1] + rest * h.sin()], h)
    }

    /// Parallel path at lateral offset `d` (positive = left).
    fn offset(&self, d: f64) -> Path {
        let h = self.heading;
        Path {
            start: [self.start[0] - d * h.sin(), self.start[1] + d * h.cos()],
            heading: h,
            pieces: self
                .pieces
                .iter()
                .map(|&piece| match piece {
                    Piece::Arc { radius, sweep } => {
                        Piece::Arc { radius: (radius - d * sweep.signum()).max(1.0), sweep }
                    }
                    other => other,
                })
                .collect(),
        }
    }

    fn min_radius(&self) -> f64 {
        self.pieces
            .iter()
            .filter_map(|p| match *p {
                Piece::Arc { radius, .. } => Some(radius),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn sample(&self, s0: f64, s1: f64) -> Vec<Point> {
        let n = (((s1 - s0) / 0.5).ceil() as usize).max(2);
        (0..=n).map(|i| self.pose(s0 + (s1 - s0) * i as f64 / n as f64).0).collect()
    }
}

/// Everything the focal maneuver decides, shared by the map and other agents.
struct Plan {
    /// The focal agent's own path (including any lane shift).
    path: Path,
    /// Arc length along `path` per time step.
    s: Vec<f64>,
    /// Road reference the map lanes are laid along (ego lane centerline).
    road: Path,
    /// Where the ego lane ends (arc length along `road`).
    road_end: f64,
    /// Alternative branches at an intersection, with their visible range.
    branches: Vec<(Path, f64, f64)>,
    /// Lane-change target offset, if any.
    target_offset: Option<f64>,
    crosswalks: Vec<[Point; 2]>,
    sway: Sway,
}

#[derive(Clone, Copy)]
struct Sway {
    amp: f64,
    omega: f64,
    phase: f64,
}

impl Sway {
    fn at(&self, t: f64) -> f64 {
        self.amp * (self.omega * t + self.phase).sin()
    }
}

struct Builder<'a> {
    cfg: &'a GeneratorConfig,
    rng: &'a mut ChaCha8Rng,
    steps: usize,
    dt: f64,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a GeneratorConfig, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { cfg, rng, steps: cfg.history_steps + cfg.future_steps, dt: 1.0 / cfg.sample_rate as f64 }
    }

    fn current(&self) -> usize {
        self.cfg.history_steps - 1
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            self.rng.random_range(lo..hi)
        } else {
            lo
        }
    }

    /// A step index near the present, clamped into the sequence.
    fn event_step(&mut self, before: i64, after: i64) -> usize {
        let k = self.current() as i64 + self.rng.random_range(-before..=after);
        k.clamp(0, self.steps as i64 - 1) as usize
    }

    fn accel_noise(&mut self) -> impl Fn(f64) -> f64 {
        let amp = 0.3 * self.cfg.noise;
        let (w1, w2) = (self.uniform(0.3, 1.2), self.uniform(0.3, 1.2));
        let (p1, p2) = (self.uniform(0.0, 2.0 * PI), self.uniform(0.0, 2.0 * PI));
        move |t| amp * (0.6 * (w1 * t + p1).sin() + 0.4 * (w2 * t + p2).sin())
    }

    fn sway(&mut self) -> Sway {
        Sway {
            amp: 0.15 * self.cfg.noise,
            omega: 2.0 * PI / self.uniform(3.0, 6.0),
            phase: self.uniform(0.0, 2.0 * PI),
        }
    }

    /// Integrates a speed profile into arc lengths; speeds stay in [0, MAX_SPEED].
    fn integrate(&self, v0: f64, accel: impl Fn(usize, f64) -> f64) -> Vec<f64> {
        let mut s = vec![0.0; self.steps];
        let mut v = v0;
        for k in 1..self.steps {
            let t = k as f64 * self.dt;
            let v_next = (v + accel(k - 1, t) * self.dt).clamp(0.0, MAX_SPEED);
            let a = (v_next - v) / self.dt;
            s[k] = s[k - 1] + v * self.dt + 0.5 * a * self.dt * self.dt;
            v = v_next;
        }
        s
    }

    fn turn_radius(&mut self, left: bool) -> f64 {
        if left {
            self.uniform(14.0, 22.0)
        } else {
            self.uniform(10.0, 15.0)
        }
    }

    fn plan(&mut self, template: Template) -> Plan {
        let sway = if template == Template::Stop { Sway { amp: 0.0, omega: 0.0, phase: 0.0 } } else { self.sway() };
        let noise = self.accel_noise();
        let mut crosswalks = Vec::new();
        let mut branches = Vec::new();
        let mut target_offset = None;
        let (path, s, road) = match template {
            Template::Straight => {
                let v0 = self.uniform(2.0, 18.0);
                let s = self.integrate(v0, |_, t| noise(t));
                let path = Path::straight([0.0, 0.0], 0.0, LEAD + s[self.steps - 1] + 100.0);
                (path.clone(), s, path)
            }
            Template::Stop => {
                let v0 = self.uniform(4.0, 14.0);
                let decel = self.uniform(1.5, 3.0);
                let kb = self.event_step(5, 25);
                let s = self.integrate(v0, |k, t| if k >= kb { -decel } else { noise(t) });
                // Stopping point of the braking phase, possibly beyond the horizon.
                let vb = if kb + 1 < self.steps { (s[kb + 1] - s[kb]) / self.dt } else { 0.0 };
                let s_stop = (s[kb] + vb * vb / (2.0 * decel)).max(s[self.steps - 1]);
                let x = LEAD + s_stop + 2.5;
                crosswalks.push([[x, -LANE_WIDTH * 1.5 - 1.0], [x, LANE_WIDTH * 1.5 + 1.0]]);
                let path = Path::straight([0.0, 0.0], 0.0, LEAD + s_stop + 100.0);
                (path.clone(), s, path)
            }
            Template::LaneChange => {
                let v0 = self.uniform(5.0, 16.0);
                let s = self.integrate(v0, |_, t| noise(t));
                let k = self.event_step(10, 20);
                let dir = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let shift_len = self.uniform(40.0, 70.0).max(v0 * 3.0);
                let start = LEAD + s[k];
                let path = Path {
                    start: [0.0, 0.0],
                    heading: 0.0,
                    pieces: vec![
                        Piece::Line { len: start },
                        Piece::Shift { len: shift_len, offset: dir * LANE_WIDTH },
                        Piece::Line { len: 300.0 },
                    ],
                };
                target_offset = Some(dir * LANE_WIDTH);
                let road = Path::straight([0.0, 0.0], 0.0, path.length());
                (path, s, road)
            }
            Template::LeftTurn | Template::RightTurn | Template::IntersectionMix => {
                let turn = match template {
                    Template::LeftTurn => Some(true),
                    Template::RightTurn => Some(false),
                    _ => [None, Some(true), Some(false)][self.rng.random_range(0..3)],
                };
                let (rl, rr) = (self.turn_radius(true), self.turn_radius(false));
                let radius = match turn {
                    Some(true) => rl,
                    Some(false) => rr,
                    None => f64::INFINITY,
                };
                let v_cap = (LATERAL_BUDGET * rr.min(radius)).sqrt().min(14.0);
                let v0 = self.uniform(3.0_f64.min(v_cap), v_cap);
                let s = self.integrate(v0, |_, t| noise(t));
                let k = self.event_step(10, 25);
                let junction = LEAD + s[k];
                let branch = |turn: Option<bool>| Path {
                    start: [0.0, 0.0],
                    heading: 0.0,
                    pieces: match turn {
                        None => vec![Piece::Line { len: junction + 200.0 }],
                        Some(left) => vec![
                            Piece::Line { len: junction },
                            Piece::Arc {
                                radius: if left { rl } else { rr },
                                sweep: if left { FRAC_PI_2 } else { -FRAC_PI_2 },
                            },
                            Piece::Line { len: 200.0 },
                        ],
                    },
                };
                let path = branch(turn);
                if template == Template::IntersectionMix {
                    for other in [None, Some(true), Some(false)] {
                        if other != turn {
                            let b = branch(other);
                            let end = junction + b.pieces.get(1).map_or(0.0, Piece::len) + 30.0;
                            branches.push((b, junction - 5.0, end));
                        }
                    }
                    let w = LANE_WIDTH * 1.5 + 1.0;
                    let x = junction - 4.0;
                    crosswalks.push([[x, -w], [x, w]]);
                }
                (path.clone(), s, path)
            }
        };
        let mut road_end = LEAD + s[self.steps - 1] + 15.0;
        if let Some(Piece::Arc { .. }) = road.pieces.get(1) {
            road_end = road_end.max(road.pieces[0].len() + road.pieces[1].len() + 20.0);
        }
        Plan { path, s, road, road_end, branches, target_offset, crosswalks, sway }
    }

    fn focal_track(&mut self, plan: &Plan) -> AgentTrack {
        let arc: Vec<f64> = plan.s.iter().map(|s| LEAD + s).collect();
        let mut track = self.track_along(&plan.path, &arc, plan.sway, AgentCategory::Vehicle);
        if self.rng.random_bool(self.cfg.partial_tracks * 0.5) {
            let start = self.rng.random_range(0..=(self.cfg.history_steps / 5));
            pad(&mut track, 0, start);
        }
        track
    }

    fn track_along(&self, path: &Path, arc: &[f64], sway: Sway, category: AgentCategory) -> AgentTrack {
        let t0 = self.current() as f64 * self.dt;
        let mut positions = Vec::with_capacity(self.steps);
        let mut headings = Vec::with_capacity(self.steps);
        for (k, &s) in arc.iter().enumerate() {
            let (p, h) = path.pose(s);
            let d = sway.at(k as f64 * self.dt - t0);
            positions.push([p[0] - d * h.sin(), p[1] + d * h.cos()]);
            headings.push(h);
        }
        AgentTrack { positions, headings, valid: vec![true; self.steps], category }
    }

    fn other_track(&mut self, plan: &Plan) -> AgentTrack {
        let r: f64 = self.rng.random();
        let category = match r {
            r if r < 0.6 => AgentCategory::Vehicle,
            r if r < 0.75 => AgentCategory::Pedestrian,
            r if r < 0.9 => AgentCategory::Cyclist,
            _ => AgentCategory::Other,
        };
        let focal_start = LEAD + plan.s[0];
        let side = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let noise = self.accel_noise();
        let base = self.sway();
        let sway = Sway { amp: 0.5 * base.amp, ..base };
        let (path, v0, start) = match category {
            AgentCategory::Vehicle => {
                let lane = [0.0, LANE_WIDTH, -LANE_WIDTH][self.rng.random_range(0..3)];
                let path = plan.road.offset(lane);
                let v_cap = (LATERAL_BUDGET * path.min_radius()).sqrt().min(16.0);
                let gap = self.uniform(10.0, 40.0) * if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (path, self.uniform(1.0_f64.min(v_cap), v_cap), focal_start + gap)
            }
            AgentCategory::Cyclist => {
                let path = plan.road.offset(side * (LANE_WIDTH * 1.5 + 0.8));
                let v_cap = (LATERAL_BUDGET * path.min_radius()).sqrt().min(6.0);
                (path, self.uniform(2.0_f64.min(v_cap), v_cap), focal_start + self.uniform(-20.0, 40.0))
            }
            AgentCategory::Pedestrian => {
                if let Some(&[a, b]) = plan.crosswalks.first() {
                    let (a, b) = if side > 0.0 { (a, b) } else { (b, a) };
                    let h = (b[1] - a[1]).atan2(b[0] - a[0]);
                    let path = Path::straight(a, h, 200.0);
                    (path, self.uniform(0.8, 1.6), self.uniform(-8.0, 2.0))
                } else {
                    let path = plan.road.offset(side * (LANE_WIDTH * 1.5 + 2.5));
                    (path, self.uniform(0.8, 1.6), focal_start + self.uniform(-10.0, 60.0))
                }
            }
            AgentCategory::Other => {
                let path = plan.road.offset(side * (LANE_WIDTH * 1.5 + 1.5));
                (path, 0.0, focal_start + self.uniform(0.0, 80.0))
            }
        };
        let moving = v0 > 0.0;
        let s = self.integrate(v0, |_, t| if moving { noise(t) * 0.5 } else { 0.0 });
        let arc: Vec<f64> = s.iter().map(|s| start + s).collect();
        let sway = if moving { sway } else { Sway { amp: 0.0, ..sway } };
        let mut track = self.track_along(&path, &arc, sway, category);
        if self.rng.random_bool(self.cfg.partial_tracks) {
            let h = self.cfg.history_steps;
            let first = self.rng.random_range(0..=h.saturating_sub(5));
            let last = self.rng.random_range((h + 1).min(self.steps)..=self.steps);
            pad(&mut track, 0, first);
            pad(&mut track, last, self.steps);
        }
        track
    }

    fn map(&mut self, plan: &Plan, budget: usize) -> Vec<MapPolyline> {
        let s0 = LEAD + plan.s[0] - 5.0;
        let s1 = plan.road_end;
        let mut curves: Vec<(Vec<Point>, LaneType, usize)> = Vec::new();
        // Ego lane (and a lane-change target) get enough of the budget to cover the whole range.
        let core = if plan.target_offset.is_some() { 2 } else { 1 };
        let share = (budget / core).max(1);
        let pieces = (((s1 - s0) / MAX_PIECE_LEN).ceil() as usize).clamp(1, share);
        curves.push((plan.road.sample(s0, s1), LaneType::Lane, pieces));
        if let Some(d) = plan.target_offset {
            curves.push((plan.road.offset(d).sample(s0, s1), LaneType::Lane, pieces));
        }
        for (b, a, e) in &plan.branches {
            curves.push((b.sample(*a, *e), LaneType::Lane, 0));
        }
        for d in [LANE_WIDTH, -LANE_WIDTH] {
            if plan.target_offset != Some(d) {
                curves.push((plan.road.offset(d).sample(s0, s1), LaneType::Lane, 0));
            }
        }
        for cw in &plan.crosswalks {
            curves.push((cw.to_vec(), LaneType::Crosswalk, 1));
        }
        for d in [LANE_WIDTH * 1.5, -LANE_WIDTH * 1.5] {
            curves.push((plan.road.offset(d).sample(s0, s1), LaneType::Boundary, 0));
        }
        let mut extra = 2.0;
        let mut out = Vec::new();
        let mut i = 0;
        while out.len() < budget {
            if i == curves.len() {
                // Out of structural elements: add further parallel lanes.
                for sign in [1.0, -1.0] {
                    curves.push((plan.road.offset(sign * extra * LANE_WIDTH).sample(s0, s1), LaneType::Lane, 0));
                }
                extra += 1.0;
            }
            let (pts, lane_type, n) = &curves[i];
            let n = if *n == 0 {
                let len: f64 = pts.windows(2).map(|w| super::dist(w[0], w[1])).sum();
                ((len / MAX_PIECE_LEN).ceil() as usize).max(1)
            } else {
                *n
            };
            for part in split_even(pts, n) {
                if out.len() < budget {
                    out.push(MapPolyline::resampled(&part, *lane_type));
                }
            }
            i += 1;
        }
        out
    }
}

fn pad(track: &mut AgentTrack, from: usize, to: usize) {
    for t in from..to {
        track.valid[t] = false;
        track.positions[t] = [0.0, 0.0];
        track.headings[t] = 0.0;
    }
}

/// Splits a densely sampled curve into `n` consecutive parts of equal point count.
fn split_even(pts: &[Point], n: usize) -> Vec<Vec<Point>> {
    let segs = pts.len() - 1;
    let n = n.min(segs).max(1);
    (0..n)
        .map(|i| {
            let a = i * segs / n;
            let b = (i + 1) * segs / n;
            pts[a..=b].to_vec()
        })
        .collect()
}
