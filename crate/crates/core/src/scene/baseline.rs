use super::{PredictionSet, Scenario};

/// Extrapolates the focal agent's last observed velocity (from its last two valid
/// observed steps) over the future horizon. With fewer than two valid observed
/// steps the last position is held.
pub fn constant_velocity_baseline(s: &Scenario) -> PredictionSet {
    let focal = s.focal();
    let h = s.history_steps;
    let observed: Vec<usize> = (0..h).filter(|&t| focal.valid[t]).collect();
    let (last, velocity) = match observed.as_slice() {
        [] => (None, [0.0, 0.0]),
        [only] => (Some(*only), [0.0, 0.0]),
        [.., a, b] => {
            let (pa, pb) = (focal.positions[*a], focal.positions[*b]);
            let span = (b - a) as f64;
            (Some(*b), [(pb[0] - pa[0]) / span, (pb[1] - pa[1]) / span])
        }
    };
    let trajectory = match last {
        Some(t) => {
            let p = focal.positions[t];
            (0..s.future_steps)
                .map(|k| {
                    let steps = (h + k - t) as f64;
                    [p[0] + velocity[0] * steps, p[1] + velocity[1] * steps]
                })
                .collect()
        }
        None => vec![[0.0, 0.0]; s.future_steps],
    };
    PredictionSet { scenario_id: s.id.clone(), trajectories: vec![trajectory], probabilities: vec![1.0] }
}
