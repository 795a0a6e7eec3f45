//! Displacement, miss-rate and Brier metrics over top-K modes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scene::{dist, Point, PredictionSet};

pub const MISS_THRESHOLD: f64 = 2.0;
pub const CSV_HEADER: &str = "scenario_id,minADE1,minFDE1,minADE6,minFDE6,miss6,bminFDE6";

fn last_valid(valid: &[bool]) -> Option<usize> {
    valid.iter().rposition(|&v| v)
}

/// Top-`k` modes by probability (capped at the number available).
fn top_k(p: &PredictionSet, k: usize) -> Vec<usize> {
    let mut r = p.ranked_modes();
    r.truncate(k.max(1));
    r
}

fn ade(tr: &[Point], gt: &[Point], valid: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for ((a, b), &v) in tr.iter().zip(gt).zip(valid) {
        if v {
            s += dist(*a, *b);
            n += 1;
        }
    }
    s / n as f64
}

/// Smallest mean displacement over the top-`k` modes. `None` without a valid step.
pub fn min_ade(p: &PredictionSet, gt: &[Point], valid: &[bool], k: usize) -> Option<f64> {
    last_valid(valid)?;
    top_k(p, k).into_iter().map(|m| ade(&p.trajectories[m], gt, valid)).reduce(f64::min)
}

/// Smallest final-step displacement over the top-`k` modes.
pub fn min_fde(p: &PredictionSet, gt: &[Point], valid: &[bool], k: usize) -> Option<f64> {
    let t = last_valid(valid)?;
    top_k(p, k).into_iter().map(|m| dist(p.trajectories[m][t], gt[t])).reduce(f64::min)
}

/// True when every top-`k` endpoint misses the ground truth by more than `threshold`.
pub fn is_miss(p: &PredictionSet, gt: &[Point], valid: &[bool], k: usize, threshold: f64) -> Option<bool> {
    min_fde(p, gt, valid, k).map(|d| d > threshold)
}

/// minFDE over the top-`k` modes plus (1 − p̂)², p̂ being the probability of the
/// endpoint-minimizing mode (first such mode in probability order).
pub fn brier_min_fde(p: &PredictionSet, gt: &[Point], valid: &[bool], k: usize) -> Option<f64> {
    let t = last_valid(valid)?;
    let mut best = (f64::INFINITY, 0.0);
    for m in top_k(p, k) {
        let d = dist(p.trajectories[m][t], gt[t]);
        if d < best.0 {
            best = (d, p.probabilities[m]);
        }
    }
    Some(best.0 + (1.0 - best.1).powi(2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario_id: String,
    pub min_ade1: f64,
    pub min_fde1: f64,
    pub min_ade6: f64,
    pub min_fde6: f64,
    pub miss6: bool,
    pub brier_min_fde6: f64,
}

/// All metrics of one scenario; `None` when the ground truth has no valid step.
pub fn scenario_metrics(p: &PredictionSet, gt: &[Point], valid: &[bool]) -> Option<ScenarioMetrics> {
    Some(ScenarioMetrics {
        scenario_id: p.scenario_id.clone(),
        min_ade1: min_ade(p, gt, valid, 1)?,
        min_fde1: min_fde(p, gt, valid, 1)?,
        min_ade6: min_ade(p, gt, valid, 6)?,
        min_fde6: min_fde(p, gt, valid, 6)?,
        miss6: is_miss(p, gt, valid, 6, MISS_THRESHOLD)?,
        brier_min_fde6: brier_min_fde(p, gt, valid, 6)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub min_ade1: f64,
    pub min_fde1: f64,
    pub min_ade6: f64,
    pub min_fde6: f64,
    pub miss_rate6: f64,
    pub brier_min_fde6: f64,
    pub n_scenarios: usize,
    /// Scenarios skipped for lack of a valid future step.
    pub n_excluded: usize,
}

/// Averages per-scenario rows (in order).
pub fn summarize(rows: &[ScenarioMetrics], excluded: usize) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(CoreError::Invalid("no scenarios to evaluate".into()));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&ScenarioMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        min_ade1: mean(|r| r.min_ade1),
        min_fde1: mean(|r| r.min_fde1),
        min_ade6: mean(|r| r.min_ade6),
        min_fde6: mean(|r| r.min_fde6),
        miss_rate6: mean(|r| f64::from(u8::from(r.miss6))),
        brier_min_fde6: mean(|r| r.brier_min_fde6),
        n_scenarios: rows.len(),
        n_excluded: excluded,
    })
}

/// Scores each prediction against its ground truth `(gt, valid)`.
pub fn evaluate_predictions<'a>(
    items: impl IntoIterator<Item = (&'a PredictionSet, &'a [Point], &'a [bool])>,
) -> Result<(MetricReport, Vec<ScenarioMetrics>)> {
    let mut rows = Vec::new();
    let mut excluded = 0;
    for (p, gt, valid) in items {
        p.validate()?;
        match scenario_metrics(p, gt, valid) {
            Some(r) => rows.push(r),
            None => excluded += 1,
        }
    }
    let report = summarize(&rows, excluded)?;
    Ok((report, rows))
}

pub fn metrics_csv(rows: &[ScenarioMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scenario_id,
            r.min_ade1,
            r.min_fde1,
            r.min_ade6,
            r.min_fde6,
            u8::from(r.miss6),
            r.brier_min_fde6
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[ScenarioMetrics]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| CoreError::io(path, e))
}
