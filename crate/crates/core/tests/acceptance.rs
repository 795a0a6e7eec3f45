//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line straight to
//! stdout (bypassing libtest capture) and then asserts.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{aligned, brute_metrics, fd_check, random_case, rng, tiny_config, tiny_generator, tiny_input};
use hamf_core::ablation::{run_suite, suite_variants, train_and_evaluate, AblationConfig, Suite};
use hamf_core::dataset::{scene_inputs, synthetic_split, SplitConfig};
use hamf_core::encoder::EncoderVariant;
use hamf_core::features::{scene_input, SceneInput};
use hamf_core::loss::wta_loss;
use hamf_core::metrics::{evaluate_predictions, metrics_csv, scenario_metrics, summarize, MetricReport};
use hamf_core::render::render_svg;
use hamf_core::scene::{
    constant_velocity_baseline, denormalize_predictions, transform_scenario, FrameTransform, PredictionSet, Scenario,
    Template,
};
use hamf_core::training::{evaluate_model, TrainConfig, Trainer};
use hamf_core::{Hamf32, Hamf64, ModelConfig};
use hamf_tensor::scan::{scan_chunked, scan_sequential, ScanDims, ScanInputs};
use hamf_tensor::{ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::Rng;

fn verdict(n: usize, name: &str, pass: bool, detail: String) {
    let mut out = std::io::stdout().lock();
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "criterion {n:>2} [{status}] {name}: {detail}");
    let _ = out.flush();
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn tiny_loss(model: &Hamf64, input: &SceneInput) -> (f64, hamf_tensor::Gradients<f64>) {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, input).unwrap();
    let aux = out.aux.map(|a| (a, input.aux_target.as_slice(), input.aux_valid.as_slice()));
    let (vars, report) =
        wta_loss(&mut tape, out.trajectories, out.logits, &input.target, &input.target_valid, aux).unwrap();
    (report.total, tape.backward(vars.total).unwrap())
}

#[test]
fn c01_gradient_integrity() {
    let start = Instant::now();
    let config = tiny_config();
    let model = Hamf64::new(config.clone(), 3).unwrap();
    let input = tiny_input(11, Template::LeftTurn);
    assert!(input.aux_valid.iter().any(|&v| v));
    let (_, grads) = tiny_loss(&model, &input);
    let grads = aligned(&model.params, grads.param_grads());
    let mut store = model.params.clone();
    let (worst, n) = fd_check(&mut store, &grads, 240, 7, |s: &ParamStore<f64>| {
        let m = Hamf64::from_params(config.clone(), s.clone()).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &input).unwrap();
        let aux = out.aux.map(|a| (a, input.aux_target.as_slice(), input.aux_valid.as_slice()));
        wta_loss(&mut tape, out.trajectories, out.logits, &input.target, &input.target_valid, aux).unwrap().1.total
    });
    let elapsed = start.elapsed();
    verdict(
        1,
        "gradient integrity",
        worst < 1e-4 && n >= 200 && elapsed < Duration::from_secs(300),
        format!("{n} parameters, worst relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn c02_scan_equivalence() {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dims = ScanDims {
            batch: r.random_range(1..=3),
            len: r.random_range(1..=64),
            channels: r.random_range(1..=8),
            state: r.random_range(1..=8),
        };
        let seq = dims.batch * dims.len * dims.channels;
        let bc = dims.batch * dims.len * dims.state;
        let mut uniform = |n: usize, lo: f32, hi: f32| (0..n).map(|_| r.random_range(lo..hi)).collect::<Vec<f32>>();
        let u = uniform(seq, -2.0, 2.0);
        let delta = uniform(seq, 1e-3, 1.0);
        let a: Vec<f32> = uniform(dims.channels * dims.state, 0.0, 2.5).into_iter().map(|v| -v.exp()).collect();
        let b = uniform(bc, -1.0, 1.0);
        let c = uniform(bc, -1.0, 1.0);
        let x = ScanInputs { u: &u, delta: &delta, a: &a, b: &b, c: &c };
        let chunk = r.random_range(1..=dims.len + 4);
        let (want, _) = scan_sequential(&x, dims);
        let got = scan_chunked(&x, dims, chunk);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max(((g - w).abs() / w.abs().max(1.0)) as f64);
        }
    }
    verdict(2, "scan equivalence", worst <= 1e-5, format!("1000 f32 cases, worst error {worst:.2e}"));
}

#[test]
fn c03_architecture_fidelity() {
    let reference = Hamf32::new(ModelConfig::reference(), 0).unwrap().num_params();
    let depth: Vec<usize> = (4..=6)
        .map(|l| {
            let mut c = ModelConfig::reference();
            c.encoder.layers = l;
            Hamf32::new(c, 0).unwrap().num_params()
        })
        .collect();
    let in_range = (2_500_000..=3_500_000).contains(&reference);
    let monotone = depth.windows(2).all(|w| w[0] < w[1]);
    verdict(
        3,
        "architecture fidelity",
        in_range && monotone,
        format!("reference config {reference} parameters, depth 4/5/6 -> {depth:?}"),
    );
}

#[test]
fn c04_wta_sparsity() {
    let mut r = rng(4);
    let mut checked = 0;
    let mut violations = 0;
    for b in 0..100u64 {
        let model = Hamf64::new(tiny_config(), b).unwrap();
        let mut tape = Tape::new();
        let mut total = None;
        let mut outputs = Vec::new();
        for _ in 0..4 {
            let template = Template::ALL[r.random_range(0..Template::ALL.len())];
            let input = tiny_input(r.random(), template);
            let out = model.forward(&mut tape, &input).unwrap();
            let (vars, _) =
                wta_loss(&mut tape, out.trajectories, out.logits, &input.target, &input.target_valid, None).unwrap();
            total = Some(match total {
                None => vars.regression,
                Some(t) => tape.add(t, vars.regression).unwrap(),
            });
            outputs.push((out.trajectories, vars.winner));
        }
        let grads = tape.backward(total.unwrap()).unwrap();
        for (traj, winner) in outputs {
            let g = grads.get(traj);
            let per_mode = g.len() / g.shape()[0];
            for (m, row) in g.data().chunks(per_mode).enumerate() {
                let zero = row.iter().all(|&v| v == 0.0);
                if (m == winner) == zero {
                    violations += 1;
                }
                checked += 1;
            }
        }
    }
    verdict(
        4,
        "WTA sparsity",
        violations == 0,
        format!("100 batches, {checked} mode gradients, {violations} violations"),
    );
}

fn monotone(r: &MetricReport) -> bool {
    r.min_fde6 <= r.min_fde1 && r.min_ade6 <= r.min_ade1
}

#[test]
fn c05_metric_oracle() {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    let mut mismatched_presence = 0;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for i in 0..1000 {
        let steps = r.random_range(1..=60);
        let (p, gt, valid) = random_case(&mut r, steps);
        match (scenario_metrics(&p, &gt, &valid), brute_metrics(&p, &gt, &valid)) {
            (Some(m), Some(b)) => {
                let got =
                    [m.min_ade1, m.min_fde1, m.min_ade6, m.min_fde6, if m.miss6 { 1.0 } else { 0.0 }, m.brier_min_fde6];
                for (g, w) in got.iter().zip(b) {
                    worst = worst.max((g - w).abs());
                }
                rows.push(m);
            }
            (None, None) => {}
            _ => mismatched_presence += 1,
        }
        if i % 100 == 99 {
            reports.push(summarize(&rows, 0).unwrap());
            rows.clear();
        }
    }

    let split = SplitConfig {
        seed: 9,
        train: 0,
        val: 40,
        agents: 3,
        polylines: 4,
        generator: tiny_generator(),
        ..SplitConfig::default()
    };
    let (_, val) = synthetic_split(&split).unwrap();
    let cv: Vec<PredictionSet> = val.iter().map(constant_velocity_baseline).collect();
    let fut: Vec<_> = val.iter().map(Scenario::focal_future).collect();
    let (cv_report, _) =
        evaluate_predictions(cv.iter().zip(&fut).map(|(p, (g, v))| (p, g.as_slice(), v.as_slice()))).unwrap();
    reports.push(cv_report);
    let model = Hamf64::new(tiny_config(), 5).unwrap();
    reports.push(evaluate_model(&model, &scene_inputs(&val).unwrap()).unwrap().0);
    let all_monotone = reports.iter().all(monotone);

    verdict(
        5,
        "metric oracle",
        worst <= 1e-9 && mismatched_presence == 0 && all_monotone,
        format!("1000 cases, worst deviation {worst:.2e}, {} reports monotone: {all_monotone}", reports.len()),
    );
}

struct Overfit {
    model: Hamf32,
    scenes: Vec<Scenario>,
    min_ade6: f64,
    elapsed: Duration,
}

fn overfit() -> &'static Overfit {
    static CELL: OnceLock<Overfit> = OnceLock::new();
    CELL.get_or_init(|| {
        let (scenes, _) = synthetic_split(&SplitConfig { train: 8, val: 0, ..SplitConfig::default() }).unwrap();
        let inputs = scene_inputs(&scenes).unwrap();
        let mut config = ModelConfig::desk();
        config.d_model = 64;
        let train = TrainConfig { epochs: 500, batch_size: 8, seed: 1, eval_every: 0, ..TrainConfig::default() };
        let start = Instant::now();
        let mut trainer = Trainer::new(Hamf32::new(config, 1).unwrap(), train).unwrap();
        trainer.fit(&inputs, None, |_, _| Ok(())).unwrap();
        let elapsed = start.elapsed();
        let (report, _) = evaluate_model(&trainer.model, &inputs).unwrap();
        Overfit { model: trainer.model, scenes, min_ade6: report.min_ade6, elapsed }
    })
}

fn world_predictions(model: &Hamf64, s: &Scenario) -> PredictionSet {
    let input = scene_input(s).unwrap();
    denormalize_predictions(&model.predict(&input).unwrap(), &input.transform)
}

fn max_gap(a: &PredictionSet, b: &PredictionSet) -> f64 {
    let traj = a.trajectories.iter().flatten().zip(b.trajectories.iter().flatten());
    let pts = traj.map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]));
    let probs = a.probabilities.iter().zip(&b.probabilities).map(|(p, q)| (p - q).abs());
    pts.chain(probs).fold(0.0, f64::max)
}

#[test]
fn c06_equivariance() {
    let fit = overfit();
    let model: Hamf64 = fit.model.cast();
    let (_, fresh) = synthetic_split(&SplitConfig { seed: 17, train: 0, val: 8, ..SplitConfig::default() }).unwrap();
    let mut r = rng(6);
    let (mut se2, mut perm) = (0.0f64, 0.0f64);
    for s in fit.scenes.iter().chain(&fresh) {
        let base = world_predictions(&model, s);
        for _ in 0..3 {
            let g = FrameTransform {
                translation: [r.random_range(-500.0..500.0), r.random_range(-500.0..500.0)],
                rotation: r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            };
            let moved = world_predictions(&model, &transform_scenario(s, g));
            let expected = PredictionSet {
                scenario_id: base.scenario_id.clone(),
                trajectories: base.trajectories.iter().map(|m| m.iter().map(|&p| g.invert(p)).collect()).collect(),
                probabilities: base.probabilities.clone(),
            };
            se2 = se2.max(max_gap(&moved, &expected));
        }

        let mut shuffled = s.clone();
        let mut agent_order: Vec<usize> = (0..s.agents.len()).collect();
        agent_order.shuffle(&mut r);
        shuffled.agents = agent_order.iter().map(|&i| s.agents[i].clone()).collect();
        shuffled.focal_index = agent_order.iter().position(|&i| i == s.focal_index).unwrap();
        shuffled.map.shuffle(&mut r);
        let focal = |x: &Scenario| model.predict(&scene_input(x).unwrap()).unwrap();
        perm = perm.max(max_gap(&focal(s), &focal(&shuffled)));
    }
    verdict(
        6,
        "equivariance",
        se2 <= 1e-4 && perm <= 1e-6,
        format!("16 scenes, SE(2) gap {se2:.2e} m, permutation gap {perm:.2e}"),
    );
}

#[test]
fn c07_overfit_capacity() {
    let fit = overfit();
    verdict(
        7,
        "overfit capacity",
        fit.min_ade6 < 0.1 && fit.elapsed < Duration::from_secs(900),
        format!("training minADE6 {:.4} m after 500 steps, {:.0}s", fit.min_ade6, fit.elapsed.as_secs_f64()),
    );
}

fn signal_config() -> AblationConfig {
    AblationConfig::default()
}

fn signal_data() -> &'static (Vec<SceneInput>, Vec<SceneInput>, MetricReport) {
    static CELL: OnceLock<(Vec<SceneInput>, Vec<SceneInput>, MetricReport)> = OnceLock::new();
    CELL.get_or_init(|| {
        let (train, val) = synthetic_split(&signal_config().split).unwrap();
        let cv: Vec<PredictionSet> = val.iter().map(constant_velocity_baseline).collect();
        let fut: Vec<_> = val.iter().map(Scenario::focal_future).collect();
        let (cv_report, _) =
            evaluate_predictions(cv.iter().zip(&fut).map(|(p, (g, v))| (p, g.as_slice(), v.as_slice()))).unwrap();
        (scene_inputs(&train).unwrap(), scene_inputs(&val).unwrap(), cv_report)
    })
}

fn seed_runs(variant: EncoderVariant) -> Vec<MetricReport> {
    let cfg = signal_config();
    let (train, val, _) = signal_data();
    let mut model = cfg.model.clone();
    model.encoder.variant = variant;
    cfg.seeds.iter().map(|&seed| train_and_evaluate(&model, &cfg.train, seed, train, val).unwrap().1).collect()
}

fn full_runs() -> &'static [MetricReport] {
    static CELL: OnceLock<Vec<MetricReport>> = OnceLock::new();
    CELL.get_or_init(|| seed_runs(EncoderVariant::Full))
}

fn mean_fde6(runs: &[MetricReport]) -> f64 {
    runs.iter().map(|r| r.min_fde6).sum::<f64>() / runs.len() as f64
}

#[test]
fn c08_learning_signal() {
    let (_, _, cv) = signal_data();
    let runs = full_runs();
    let model = mean_fde6(runs);
    let gain = 1.0 - model / cv.min_fde6;
    verdict(
        8,
        "learning signal",
        gain >= 0.3 && runs.iter().all(monotone),
        format!(
            "val minFDE6 {model:.3} (seeds {:?}) vs constant velocity {:.3}, improvement {:.1}%",
            runs.iter().map(|r| (r.min_fde6 * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            cv.min_fde6,
            gain * 100.0
        ),
    );
}

fn expected_rows(suite: Suite) -> Vec<&'static str> {
    match suite {
        Suite::Encoder => vec!["Mb", "M1", "M2", "M3", "Ours"],
        Suite::Decoder => vec![
            "Md",
            "Uni-Mamba-1",
            "Uni-Mamba-2",
            "Bi-Mamba-1",
            "Bi-Mamba-2",
            "Bi-Mamba-3",
            "Attention-1",
            "Attention-2",
            "Attention-3",
        ],
        Suite::Depth => vec!["L=4", "L=5", "L=6"],
        Suite::Ke => vec!["Ke=1", "Ke=2", "Ke=3", "Ke=6"],
        Suite::Arch => vec!["Mp", "Mc", "Ours"],
    }
}

#[test]
fn c09_ablation_direction() {
    let tiny = AblationConfig {
        seeds: vec![0],
        model: tiny_config(),
        train: TrainConfig { epochs: 1, batch_size: 4, eval_every: 0, ..TrainConfig::default() },
        split: SplitConfig {
            seed: 5,
            train: 4,
            val: 2,
            agents: 3,
            polylines: 4,
            generator: tiny_generator(),
            ..SplitConfig::default()
        },
    };
    let mut missing = Vec::new();
    for suite in Suite::ALL {
        let report = run_suite(suite, &tiny, |_, _, _| {}).unwrap();
        let want = expected_rows(suite);
        let md = report.to_markdown();
        let csv = report.to_csv();
        let csv_rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap_or("")).collect();
        let labels: Vec<String> = suite_variants(suite).into_iter().map(|v| v.label).collect();
        for label in &want {
            if !md.contains(&format!("| {label} |")) {
                missing.push(format!("{suite}/{label} (markdown)"));
            }
        }
        if csv_rows != want || labels != want || report.rows.iter().any(|r| r.runs.len() != 1) {
            missing.push(format!("{suite} (csv {csv_rows:?})"));
        }
    }

    let full = mean_fde6(full_runs());
    let mb_runs = seed_runs(EncoderVariant::NoMotionTokens);
    let mb = mean_fde6(&mb_runs);
    verdict(
        9,
        "ablation direction",
        full <= mb && missing.is_empty(),
        format!("val minFDE6 full {full:.3} vs Mb {mb:.3}; row sets complete: {}", missing.is_empty()),
    );
}

fn determinism_run() -> (String, String) {
    let split = SplitConfig {
        seed: 3,
        train: 8,
        val: 4,
        agents: 3,
        polylines: 4,
        generator: tiny_generator(),
        ..SplitConfig::default()
    };
    let (train, val) = synthetic_split(&split).unwrap();
    let val_inputs = scene_inputs(&val).unwrap();
    let train_cfg = TrainConfig { epochs: 3, batch_size: 4, seed: 8, eval_every: 0, ..TrainConfig::default() };
    let mut trainer = Trainer::new(Hamf32::new(tiny_config(), 8).unwrap(), train_cfg).unwrap();
    trainer.fit(&scene_inputs(&train).unwrap(), None, |_, _| Ok(())).unwrap();
    let (_, rows) = evaluate_model(&trainer.model, &val_inputs).unwrap();
    let pred = trainer.model.predict(&val_inputs[0]).unwrap();
    let svg = render_svg(&val[0], &denormalize_predictions(&pred, &val_inputs[0].transform)).unwrap();
    (metrics_csv(&rows), svg)
}

#[test]
fn c10_determinism() {
    let (csv_a, svg_a) = determinism_run();
    let (csv_b, svg_b) = determinism_run();
    verdict(
        10,
        "determinism",
        csv_a == csv_b && svg_a.as_bytes() == svg_b.as_bytes(),
        format!("metrics CSV identical: {}, SVG identical: {} ({} bytes)", csv_a == csv_b, svg_a == svg_b, svg_a.len()),
    );
}
