mod common;

use common::{tiny_config, tiny_input};
use hamf_core::checkpoint::{decode, encode, header_of, load_checkpoint, save_trainer, MAGIC};
use hamf_core::features::SceneInput;
use hamf_core::scene::Template;
use hamf_core::training::{evaluate_model, LogRecord, TrainConfig, Trainer};
use hamf_core::{CoreError, Hamf32, Hamf64};

fn data(n: u64) -> Vec<SceneInput> {
    (0..n).map(|i| tiny_input(i, Template::ALL[i as usize % 6])).collect()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 3, seed: 5, eval_every: 0, ..TrainConfig::default() }
}

fn trainer(epochs: usize) -> Trainer<f32> {
    Trainer::new(Hamf32::new(tiny_config(), 5).unwrap(), config(epochs)).unwrap()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

#[test]
fn schedule_starts_at_the_base_rate() {
    let train = data(7);
    let mut t = trainer(3);
    let log = t.fit(&train, None, |_, _| Ok(())).unwrap();
    assert_eq!(log[0].lr, 0.001);
    assert_eq!(log[0].step, 0);
    assert_eq!(t.step, t.config.total_steps(train.len()));
    assert_eq!(t.config.total_steps(7), 9);
    assert!(log.windows(2).all(|w| w[1].lr < w[0].lr));
}

#[test]
fn same_seed_gives_identical_runs() {
    let train = data(6);
    let val = data(2);
    let run = || {
        let mut t = trainer(2);
        let log = t.fit(&train, Some(&val), |_, _| Ok(())).unwrap();
        (log, t.model.params)
    };
    let (log_a, params_a) = run();
    let (log_b, params_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(params_a, params_b);
    assert!(log_a.last().unwrap().val.is_some());
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let t = trainer(1);
    let a = t.epoch_order(0, 50);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, t.epoch_order(0, 50));
    assert_ne!(a, t.epoch_order(1, 50));
}

#[test]
fn training_reduces_the_loss() {
    let train = data(4);
    let mut t = Trainer::new(
        Hamf32::new(tiny_config(), 1).unwrap(),
        TrainConfig { epochs: 150, batch_size: 4, lr: 3e-3, eval_every: 0, ..TrainConfig::default() },
    )
    .unwrap();
    let log = t.fit(&train, None, |_, _| Ok(())).unwrap();
    assert!(log.last().unwrap().loss < 0.5 * log[0].loss, "{} → {}", log[0].loss, log.last().unwrap().loss);
    for r in &log {
        assert!(r.regression >= 0.0 && r.classification >= 0.0 && r.auxiliary >= 0.0);
        assert!((r.loss - (r.regression + r.classification + r.auxiliary)).abs() < 1e-5 * r.loss.max(1.0));
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let train = data(5);
    let mut t = trainer(1);
    t.fit(&train, None, |_, _| Ok(())).unwrap();
    let bytes = encode(&header_of(&t), &t.model.params, Some(&t.optimizer));
    assert_eq!(&bytes[..8], MAGIC);
    let ck = decode::<f32>(&bytes).unwrap();
    assert_eq!(ck.dtype, "f32");
    assert_eq!(ck.params, t.model.params);
    assert_eq!(ck.header, header_of(&t));
    let (step, first, second) = ck.optimizer.as_ref().unwrap();
    assert_eq!(*step, t.optimizer.step_count());
    assert_eq!(first.as_slice(), t.optimizer.first_moments());
    assert_eq!(second.as_slice(), t.optimizer.second_moments());
    let model = ck.model().unwrap();
    assert_eq!(model.predict(&train[0]).unwrap(), t.model.predict(&train[0]).unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let train = data(7);
    let mut straight = trainer(3);
    let full_log = straight.fit(&train, None, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mut first = trainer(3);
    let mut log: Vec<LogRecord> = vec![first.run_epoch(&train).unwrap()];
    save_trainer(&path, &first).unwrap();
    drop(first);
    let mut resumed = load_checkpoint::<f32>(&path).unwrap().trainer().unwrap();
    assert_eq!(resumed.epoch, 1);
    log.extend(resumed.fit(&train, None, |_, _| Ok(())).unwrap());
    assert_eq!(log, full_log);
    assert_eq!(resumed.model.params, straight.model.params);
}

#[test]
fn corrupt_truncated_and_future_checkpoints_are_rejected() {
    let model = Hamf64::new(tiny_config(), 0).unwrap();
    let t = Trainer::new(model, config(1)).unwrap();
    let bytes = encode(&header_of(&t), &t.model.params, None);
    assert!(decode::<f64>(&bytes).unwrap().optimizer.is_none());

    let mut flipped = bytes.clone();
    flipped[100] ^= 1;
    assert!(decode::<f64>(&flipped).unwrap_err().to_string().contains("checksum"));
    assert!(decode::<f64>(&bytes[..bytes.len() / 2]).is_err());
    assert!(decode::<f64>(b"not a checkpoint at all").is_err());

    let mut future = bytes[..bytes.len() - 8].to_vec();
    future[8..12].copy_from_slice(&2u32.to_le_bytes());
    let sum = fnv1a(&future);
    future.extend_from_slice(&sum.to_le_bytes());
    assert!(matches!(decode::<f64>(&future), Err(CoreError::Version { .. })));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint::<f64>(&dir.path().join("missing.bin")), Err(CoreError::Io { .. })));
}

#[test]
fn checkpoint_for_a_different_layout_is_rejected() {
    let t = trainer(1);
    let mut header = header_of(&t);
    header.model.encoder.layers = 3;
    let bytes = encode(&header, &t.model.params, None);
    assert!(decode::<f32>(&bytes).unwrap().model().is_err());
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let train = data(4);
    let mut t = trainer(1);
    let bias = t.model.decoder.traj_head.l2.b.unwrap();
    t.model.params.data_mut(bias)[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    t.dump_dir = Some(dir.path().to_path_buf());
    let err = t.run_epoch(&train).unwrap_err();
    let CoreError::NonFiniteLoss { epoch, batch, scenario_ids } = err else { panic!("unexpected {err}") };
    assert_eq!((epoch, batch), (0, 0));
    let order = t.epoch_order(0, 4);
    let first_batch: Vec<String> = order[..3].iter().map(|&i| train[i].id.clone()).collect();
    assert_eq!(scenario_ids, first_batch);
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("nan_batch.json")).unwrap()).unwrap();
    assert_eq!(dump["batch"], 0);
    assert_eq!(dump["scenario_ids"].as_array().unwrap().len(), 3);
    assert_eq!(t.step, 0);
}

#[test]
fn train_config_validation_and_strict_keys() {
    assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr_min: 0.1, ..TrainConfig::default() }.validate().is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "momentum": 0.9}"#).is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!((c.epochs, c.batch_size, c.lr, c.weight_decay), (3, 32, 0.001, 0.01));
}

#[test]
fn log_records_round_trip_as_json_lines() {
    let train = data(3);
    let mut t = trainer(1);
    let log = t.fit(&train, Some(&train), |_, _| Ok(())).unwrap();
    let line = serde_json::to_string(&log[0]).unwrap();
    assert!(!line.contains('\n'));
    assert_eq!(serde_json::from_str::<LogRecord>(&line).unwrap(), log[0]);
}

#[test]
fn evaluation_is_deterministic_and_consistent() {
    let inputs = data(6);
    let model = Hamf32::new(tiny_config(), 2).unwrap();
    let (a, rows_a) = evaluate_model(&model, &inputs).unwrap();
    let (b, rows_b) = evaluate_model(&model, &inputs).unwrap();
    assert_eq!(a, b);
    assert_eq!(rows_a, rows_b);
    assert!(a.min_fde6 <= a.min_fde1 && a.brier_min_fde6 >= a.min_fde6);
    assert!((0.0..=1.0).contains(&a.miss_rate6));
}
