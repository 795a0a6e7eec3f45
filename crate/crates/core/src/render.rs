//! Static SVG figures: map, agent histories, ground truth and predicted modes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::scene::{LaneType, Point, PredictionSet, Scenario};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 800.0;
const MARGIN_M: f64 = 15.0;
const LEGEND_W: f64 = 190.0;
const MODE_COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"];

struct View {
    min: Point,
    scale: f64,
}

impl View {
    fn fit(points: impl Iterator<Item = Point>) -> View {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        if !lo[0].is_finite() {
            lo = [-1.0, -1.0];
            hi = [1.0, 1.0];
        }
        let min = [lo[0] - MARGIN_M, lo[1] - MARGIN_M];
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]) + 2.0 * MARGIN_M;
        View { min, scale: (WIDTH - LEGEND_W).min(HEIGHT) / span }
    }

    /// World meters to pixels (y up in the world, down in SVG).
    fn px(&self, p: Point) -> (f64, f64) {
        ((p[0] - self.min[0]) * self.scale, HEIGHT - (p[1] - self.min[1]) * self.scale)
    }

    fn path(&self, pts: &[Point]) -> String {
        let mut d = String::new();
        for (i, &p) in pts.iter().enumerate() {
            let (x, y) = self.px(p);
            let _ = write!(d, "{}{x:.2},{y:.2}", if i == 0 { "M" } else { " L" });
        }
        d
    }
}

/// Splits `pts` at invalid flags into runs of at least two points.
fn runs(pts: &[Point], valid: &[bool]) -> Vec<Vec<Point>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for (&p, &v) in pts.iter().zip(valid) {
        if v {
            cur.push(p);
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out.retain(|r| r.len() >= 2);
    out
}

/// Renders `scenario` with `predictions` (in the scenario's frame) as SVG text.
pub fn render_svg(scenario: &Scenario, predictions: &PredictionSet) -> Result<String> {
    if scenario.id != predictions.scenario_id {
        return Err(CoreError::Invalid(format!(
            "prediction set is for scenario '{}', not '{}'",
            predictions.scenario_id, scenario.id
        )));
    }
    predictions.validate()?;
    let h = scenario.history_steps;
    let focal = scenario.focal();
    let (gt, gt_valid) = scenario.focal_future();

    let focus = focal
        .positions
        .iter()
        .zip(&focal.valid)
        .filter(|(_, &v)| v)
        .map(|(&p, _)| p)
        .chain(predictions.trajectories.iter().flatten().copied());
    let view = View::fit(focus);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(svg, r#"<g id="map" fill="none">"#);
    for poly in &scenario.map {
        let style = match poly.lane_type {
            LaneType::Lane => r##"stroke="#b0b0b0" stroke-width="1.5""##,
            LaneType::Crosswalk => r##"stroke="#9e9e9e" stroke-width="3" stroke-dasharray="4 3""##,
            LaneType::Boundary => r##"stroke="#505050" stroke-width="1""##,
        };
        for run in runs(&poly.points, &poly.valid) {
            let _ = writeln!(svg, r#"<path d="{}" {style}/>"#, view.path(&run));
        }
    }
    let _ = writeln!(svg, "</g>");

    // Histories fade in towards the last observed step.
    let _ = writeln!(svg, r#"<g id="history" fill="none" stroke-linecap="round">"#);
    for (i, agent) in scenario.agents.iter().enumerate() {
        let color = if i == scenario.focal_index { "#2ca02c" } else { "#4a6fa5" };
        for t in 1..h {
            if agent.valid[t - 1] && agent.valid[t] {
                let opacity = 0.15 + 0.85 * t as f64 / (h - 1) as f64;
                let (a, b) = (view.px(agent.positions[t - 1]), view.px(agent.positions[t]));
                let _ = writeln!(
                    svg,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2.5" stroke-opacity="{opacity:.3}"/>"#,
                    a.0, a.1, b.0, b.1
                );
            }
        }
        if let Some(t) = agent.last_observed(h) {
            let (x, y) = view.px(agent.positions[t]);
            let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{color}"/>"#);
        }
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g id="ground-truth" fill="none">"#);
    for run in runs(&gt, &gt_valid) {
        let _ = writeln!(
            svg,
            r##"<path d="{}" stroke="#000000" stroke-width="2" stroke-dasharray="6 4"/>"##,
            view.path(&run)
        );
    }
    let _ = writeln!(svg, "</g>");

    let p_max = predictions.probabilities.iter().copied().fold(0.0, f64::max);
    let _ = writeln!(svg, r#"<g id="predictions" fill="none">"#);
    // Least likely first so the most likely mode is drawn on top.
    for &m in predictions.ranked_modes().iter().rev() {
        let p = predictions.probabilities[m];
        let opacity = if p_max > 0.0 { 0.15 + 0.85 * p / p_max } else { 0.15 };
        let color = MODE_COLORS[m % MODE_COLORS.len()];
        let traj = &predictions.trajectories[m];
        let _ = writeln!(
            svg,
            r#"<path d="{}" stroke="{color}" stroke-width="2" stroke-opacity="{opacity:.3}"/>"#,
            view.path(traj)
        );
        if let Some(&end) = traj.last() {
            let (x, y) = view.px(end);
            let _ =
                writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}" fill-opacity="{opacity:.3}"/>"#);
        }
    }
    let _ = writeln!(svg, "</g>");

    let x0 = WIDTH - LEGEND_W + 10.0;
    let _ = writeln!(svg, r#"<g id="legend" font-family="monospace" font-size="12">"#);
    let _ = writeln!(svg, r#"<text x="{x0}" y="20">{}</text>"#, escape(&scenario.id));
    for (row, &m) in predictions.ranked_modes().iter().enumerate() {
        let y = 44.0 + 18.0 * row as f64;
        let color = MODE_COLORS[m % MODE_COLORS.len()];
        let _ = writeln!(svg, r#"<rect x="{x0}" y="{}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
        let _ = writeln!(
            svg,
            r#"<text class="probability" x="{}" y="{y}" data-mode="{m}" data-p="{:.9}">mode {m}: {:.3}</text>"#,
            x0 + 18.0,
            predictions.probabilities[m],
            predictions.probabilities[m]
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn write_svg(path: &Path, scenario: &Scenario, predictions: &PredictionSet) -> Result<()> {
    let svg = render_svg(scenario, predictions)?;
    std::fs::write(path, svg).map_err(|e| CoreError::io(path, e))
}
