#![allow(dead_code)]

use hamf_core::encoder::Attention;
use hamf_core::features::{scene_input, SceneInput};
use hamf_core::nn::Linear;
use hamf_core::scene::{generate_scenario_with, GeneratorConfig, Point, PredictionSet, Scenario, Template};
use hamf_core::ModelConfig;
use hamf_tensor::{ParamId, ParamStore, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor64 {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor64::new(shape.to_vec(), data).unwrap()
}

/// Small model: C=16, two encoder layers, three motion tokens, 10/12-step horizons.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.d_model = 16;
    c.pointnet_hidden = 16;
    c.pe_frequencies = 4;
    c.history_steps = 10;
    c.future_steps = 12;
    c.motion_tokens = 3;
    c.encoder.layers = 2;
    c.encoder.heads = 2;
    c.ssm.state = 4;
    c.decoder.head_hidden = 16;
    c
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig { history_steps: 10, future_steps: 12, ..GeneratorConfig::default() }
}

pub fn tiny_scene(seed: u64, template: Template) -> Scenario {
    generate_scenario_with(&tiny_generator(), seed, template, 3, 4).unwrap()
}

pub fn tiny_input(seed: u64, template: Template) -> SceneInput {
    scene_input(&tiny_scene(seed, template)).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Samples `count` scalar parameters (every tensor at least once, the rest uniformly
/// by tensor) and compares `grads` with central differences of `loss`.
/// Returns the worst relative error and the number of entries checked.
pub fn fd_check(
    store: &mut ParamStore<f64>,
    grads: &[Tensor64],
    count: usize,
    seed: u64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> (f64, usize) {
    let eps = 1e-6;
    let mut rng = rng(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut picks: Vec<(ParamId, usize)> =
        ids.iter().map(|&id| (id, rng.random_range(0..store.get(id).len()))).collect();
    while picks.len() < count {
        let id = ids[rng.random_range(0..ids.len())];
        picks.push((id, rng.random_range(0..store.get(id).len())));
    }
    let mut worst: f64 = 0.0;
    for &(id, j) in &picks {
        let orig = store.get(id).data()[j];
        store.data_mut(id)[j] = orig + eps;
        let up = loss(store);
        store.data_mut(id)[j] = orig - eps;
        let down = loss(store);
        store.data_mut(id)[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_err(grads[id.0].data()[j], numeric));
    }
    (worst, picks.len())
}

/// One gradient per parameter of `store`, zeros for parameters not on the tape.
pub fn aligned(store: &ParamStore<f64>, pairs: Vec<(ParamId, Tensor64)>) -> Vec<Tensor64> {
    let mut out: Vec<Tensor64> = store.ids().map(|id| Tensor64::zeros(store.get(id).shape())).collect();
    for (id, g) in pairs {
        out[id.0] = g;
    }
    out
}

/// Scalar multi-head attention: per-head softmax(q·k/√d) over valid keys, weighted
/// sum of values, output projection.
pub fn naive_attention(
    store: &ParamStore<f64>,
    a: &Attention,
    q_in: &Tensor64,
    kv_in: &Tensor64,
    valid: &[bool],
) -> Vec<f64> {
    let lin = |x: &[f64], l: &Linear| naive_linear(store, l, x);
    let nq = q_in.shape()[0];
    let nk = kv_in.shape()[0];
    let c = a.wo.d_out;
    let dh = c / a.heads;
    let keys: Vec<Vec<f64>> = (0..nk).map(|j| lin(kv_in.row(j), &a.wk)).collect();
    let vals: Vec<Vec<f64>> = (0..nk).map(|j| lin(kv_in.row(j), &a.wv)).collect();
    let mut out = Vec::new();
    for i in 0..nq {
        let q = lin(q_in.row(i), &a.wq);
        let mut concat = vec![0.0; c];
        for h in 0..a.heads {
            let r = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..nk)
                .map(|j| {
                    q[r.clone()].iter().zip(&keys[j][r.clone()]).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = (0..nk).filter(|&j| valid[j]).map(|j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..nk).map(|j| if valid[j] { (scores[j] - m).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            for d in r.clone() {
                concat[d] = (0..nk).map(|j| e[j] / z * vals[j][d]).sum();
            }
        }
        out.extend(lin(&concat, &a.wo));
    }
    out
}

/// `x·W + b` with scalar loops.
pub fn naive_linear(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.w);
    (0..l.d_out)
        .map(|o| {
            let b = l.b.map_or(0.0, |b| store.get(b).data()[o]);
            b + (0..l.d_in).map(|i| x[i] * w.data()[i * l.d_out + o]).sum::<f64>()
        })
        .collect()
}

/// Scalar metric recomputation: `[minADE1, minFDE1, minADE6, minFDE6, miss6, b-minFDE6]`.
/// The top-K set is found by enumerating every mode subset and keeping the one
/// whose members all outrank the non-members (probability, then index).
pub fn brute_metrics(p: &PredictionSet, gt: &[Point], valid: &[bool]) -> Option<[f64; 6]> {
    let last = (0..gt.len()).filter(|&t| valid[t]).max()?;
    let n = p.probabilities.len();
    let outranks = |i: usize, j: usize| {
        p.probabilities[i] > p.probabilities[j] || (p.probabilities[i] == p.probabilities[j] && i < j)
    };
    let top = |k: usize| -> Vec<usize> {
        let k = k.min(n);
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| (0..n).filter(|&i| m >> i & 1 == 1).collect::<Vec<_>>())
            .find(|set| (0..n).filter(|j| !set.contains(j)).all(|j| set.iter().all(|&i| outranks(i, j))))
            .expect("a top-k set exists")
    };
    let d = |a: Point, b: Point| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let ade = |m: usize| {
        let steps: Vec<usize> = (0..gt.len()).filter(|&t| valid[t]).collect();
        steps.iter().map(|&t| d(p.trajectories[m][t], gt[t])).sum::<f64>() / steps.len() as f64
    };
    let fde = |m: usize| d(p.trajectories[m][last], gt[last]);
    let min = |set: &[usize], f: &dyn Fn(usize) -> f64| set.iter().map(|&m| f(m)).fold(f64::INFINITY, f64::min);
    let (t1, t6) = (top(1), top(6));
    let fde6 = min(&t6, &fde);
    let best =
        t6.iter().copied().filter(|&m| fde(m) == fde6).reduce(|a, b| if outranks(a, b) { a } else { b }).unwrap();
    Some([
        min(&t1, &ade),
        min(&t1, &fde),
        min(&t6, &ade),
        fde6,
        if fde6 > 2.0 { 1.0 } else { 0.0 },
        fde6 + (1.0 - p.probabilities[best]).powi(2),
    ])
}

/// Random prediction set near a random ground truth; some cases get tied probabilities.
pub fn random_case(rng: &mut ChaCha8Rng, steps: usize) -> (PredictionSet, Vec<Point>, Vec<bool>) {
    let k = if rng.random_bool(0.8) { 6 } else { rng.random_range(1..=6) };
    let gt: Vec<Point> = (0..steps).map(|_| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)]).collect();
    let mut valid: Vec<bool> = (0..steps).map(|_| rng.random_bool(0.8)).collect();
    if rng.random_bool(0.5) {
        valid[rng.random_range(0..steps)] = true;
    }
    let spread = rng.random_range(0.1..6.0);
    let trajectories = (0..k)
        .map(|_| {
            gt.iter()
                .map(|g| [g[0] + rng.random_range(-spread..spread), g[1] + rng.random_range(-spread..spread)])
                .collect()
        })
        .collect();
    let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    if rng.random_bool(0.15) {
        w.iter_mut().for_each(|x| *x = 1.0);
    }
    let z: f64 = w.iter().sum();
    let probabilities = w.iter().map(|x| x / z).collect();
    let p = PredictionSet { scenario_id: "case".into(), trajectories, probabilities };
    (p, gt, valid)
}
