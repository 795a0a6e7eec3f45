//! Winner-take-all multi-task loss.

use hamf_tensor::{Scalar, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::scene::Point;

/// SmoothL1 transition point, in meters.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub regression: f64,
    pub classification: f64,
    pub auxiliary: f64,
    pub winner: usize,
}

/// Loss terms as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub regression: Var,
    pub classification: Var,
    pub auxiliary: Option<Var>,
    pub winner: usize,
}

/// Mean displacement over valid steps.
pub fn masked_ade(pred: &[Point], gt: &[Point], valid: &[bool]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, g), &v) in pred.iter().zip(gt).zip(valid) {
        if v {
            sum += (p[0] - g[0]).hypot(p[1] - g[1]);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mode with the smallest masked ADE; ties go to the lowest index.
pub fn select_winner(modes: &[Vec<Point>], gt: &[Point], valid: &[bool]) -> Result<usize> {
    if modes.is_empty() {
        return Err(CoreError::Invalid("no modes to choose a winner from".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (k, m) in modes.iter().enumerate() {
        let ade = masked_ade(m, gt, valid).ok_or_else(|| CoreError::Invalid("no valid future step".into()))?;
        if ade < best.1 {
            best = (k, ade);
        }
    }
    Ok(best.0)
}

fn points_of<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<Point>> {
    let (k, steps) = (t.shape()[0], t.shape()[1]);
    let d = t.to_f64_vec();
    (0..k).map(|m| (0..steps).map(|s| [d[(m * steps + s) * 2], d[(m * steps + s) * 2 + 1]]).collect()).collect()
}

/// Masked smooth-L1 between `pred` and constant targets, averaged over valid
/// steps and both coordinates. `None` when nothing is valid.
fn masked_smooth_l1<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &[Point], valid: &[bool]) -> Result<Option<Var>> {
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Ok(None);
    }
    let shape = tape.shape(pred).to_vec();
    let flat: Vec<f64> = target.iter().flat_map(|p| [p[0], p[1]]).collect();
    let gt = tape.constant(Tensor::from_f64(&shape, &flat)?);
    let mask: Vec<f64> = valid.iter().flat_map(|&v| [f64::from(u8::from(v)); 2]).collect();
    let mask = tape.constant(Tensor::from_f64(&shape, &mask)?);
    let diff = tape.sub(pred, gt)?;
    let l = tape.smooth_l1(diff, T::from_f64_lossy(SMOOTH_L1_BETA))?;
    let l = tape.mul(l, mask)?;
    let s = tape.sum(l, None)?;
    Ok(Some(tape.scale(s, T::from_f64_lossy(1.0 / (2 * count) as f64))?))
}

/// `trajectories: [K, T_f, 2]`, `logits: [K]`; `aux`: `[N, T_f, 2]` predictions with
/// flattened targets/validity of length `N·T_f`.
pub fn wta_loss<T: Scalar>(
    tape: &mut Tape<T>,
    trajectories: Var,
    logits: Var,
    gt: &[Point],
    gt_valid: &[bool],
    aux: Option<(Var, &[Point], &[bool])>,
) -> Result<(LossVars, LossReport)> {
    let shape = tape.shape(trajectories).to_vec();
    if shape.len() != 3 || shape[2] != 2 || shape[1] != gt.len() || gt_valid.len() != gt.len() {
        return Err(CoreError::Invalid(format!(
            "trajectories {shape:?} do not match a ground truth of {} steps",
            gt.len()
        )));
    }
    let k = shape[0];
    let modes = points_of(tape.value(trajectories));
    let winner = select_winner(&modes, gt, gt_valid)?;
    let pred = tape.slice(trajectories, 0, winner, 1)?;
    let pred = tape.reshape(pred, &shape[1..])?;
    let regression = masked_smooth_l1(tape, pred, gt, gt_valid)?.expect("winner implies a valid step");

    if tape.shape(logits) != [k] {
        return Err(CoreError::Invalid(format!("logits {:?} for {k} modes", tape.shape(logits))));
    }
    let logp = tape.log_softmax(logits, 0)?;
    let lw = tape.slice(logp, 0, winner, 1)?;
    let lw = tape.sum(lw, None)?;
    let classification = tape.scale(lw, -T::one())?;

    let auxiliary = match aux {
        Some((pred, target, valid)) => {
            if target.len() != valid.len() || tape.value(pred).len() != 2 * target.len() {
                return Err(CoreError::Invalid("auxiliary predictions and targets differ in size".into()));
            }
            masked_smooth_l1(tape, pred, target, valid)?
        }
        None => None,
    };
    let mut total = tape.add(regression, classification)?;
    if let Some(a) = auxiliary {
        total = tape.add(total, a)?;
    }
    let value = |tape: &Tape<T>, v: Var| tape.value(v).item().to_f64_lossy();
    let report = LossReport {
        total: value(tape, total),
        regression: value(tape, regression),
        classification: value(tape, classification),
        auxiliary: auxiliary.map_or(0.0, |a| value(tape, a)),
        winner,
    };
    Ok((LossVars { total, regression, classification, auxiliary, winner }, report))
}
