//! Mini-batch training with AdamW and a cosine schedule, plus evaluation helpers.

use std::path::PathBuf;

use hamf_tensor::{cosine_lr, AdamW, AdamWConfig, Scalar, StepOutcome, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::SceneInput;
use crate::loss::{wta_loss, LossReport};
use crate::metrics::{evaluate_predictions, MetricReport, ScenarioMetrics};
use crate::model::{prediction_from, Hamf};
use crate::scene::PredictionSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Validate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 120, batch_size: 32, lr: 1e-3, lr_min: 0.0, weight_decay: 0.01, seed: 0, eval_every: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr || !(self.weight_decay >= 0.0) {
            return Err(CoreError::Config("need 0 ≤ lr_min ≤ lr, lr > 0 and weight_decay ≥ 0".into()));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        (self.epochs * self.batches_per_epoch(n_train)) as u64
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Global step at the start of the epoch.
    pub step: u64,
    /// Learning rate used by that step.
    pub lr: f64,
    pub loss: f64,
    pub regression: f64,
    pub classification: f64,
    pub auxiliary: f64,
    pub skipped_steps: usize,
    pub val: Option<MetricReport>,
}

/// Sums per-sample gradients in a fixed order.
struct GradSum<T: Scalar> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradSum<T> {
    fn new(model: &Hamf<T>) -> Self {
        GradSum { grads: model.params.ids().map(|id| Tensor::zeros(model.params.get(id).shape())).collect() }
    }

    fn add(&mut self, parts: Vec<(hamf_tensor::ParamId, Tensor<T>)>) {
        for (id, g) in parts {
            for (a, &b) in self.grads[id.0].data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    fn scaled(mut self, c: f64) -> Vec<Tensor<T>> {
        let c = T::from_f64_lossy(c);
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
        self.grads
    }
}

/// Forward + loss + backward for one scene. Returns the loss report and parameter gradients.
pub fn sample_gradients<T: Scalar>(
    model: &Hamf<T>,
    input: &SceneInput,
) -> Result<(LossReport, Vec<(hamf_tensor::ParamId, Tensor<T>)>)> {
    let mut tape = Tape::new();
    tape.set_check_finite(false);
    let out = model.forward(&mut tape, input)?;
    let aux = out.aux.map(|a| (a, input.aux_target.as_slice(), input.aux_valid.as_slice()));
    let (vars, report) = wta_loss(&mut tape, out.trajectories, out.logits, &input.target, &input.target_valid, aux)?;
    if !report.total.is_finite() {
        return Ok((report, Vec::new()));
    }
    let grads = tape.backward(vars.total)?;
    Ok((report, grads.param_grads()))
}

pub struct Trainer<T: Scalar> {
    pub model: Hamf<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    /// Where the offending batch is described when the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Hamf<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer =
            AdamW::new(&model.params, AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() });
        Ok(Trainer { model, optimizer, config, epoch: 0, step: 0, dump_dir: None })
    }

    /// Sample order of `epoch`: a permutation fixed by (seed, epoch).
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on the mean loss of `batch`.
    pub fn train_batch(
        &mut self,
        batch: &[&SceneInput],
        total_steps: u64,
        batch_index: usize,
    ) -> Result<(LossReport, StepOutcome)> {
        let mut sum = GradSum::new(&self.model);
        let mut mean = LossReport::default();
        let batch: Vec<&SceneInput> = batch.iter().copied().filter(|s| s.has_valid_target()).collect();
        if batch.is_empty() {
            return Ok((mean, StepOutcome::Applied));
        }
        for input in &batch {
            let (report, grads) = sample_gradients(&self.model, input)?;
            if !report.total.is_finite() {
                return Err(self.non_finite(&batch, batch_index));
            }
            sum.add(grads);
            mean.total += report.total;
            mean.regression += report.regression;
            mean.classification += report.classification;
            mean.auxiliary += report.auxiliary;
        }
        let n = batch.len() as f64;
        mean.total /= n;
        mean.regression /= n;
        mean.classification /= n;
        mean.auxiliary /= n;
        let lr = cosine_lr(self.step, total_steps, self.config.lr, self.config.lr_min);
        let grads = sum.scaled(1.0 / n);
        let outcome = self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok((mean, outcome))
    }

    fn non_finite(&self, batch: &[&SceneInput], batch_index: usize) -> CoreError {
        let ids: Vec<String> = batch.iter().map(|s| s.id.clone()).collect();
        if let Some(dir) = &self.dump_dir {
            let dump = serde_json::json!({
                "epoch": self.epoch,
                "batch": batch_index,
                "step": self.step,
                "scenario_ids": ids,
            });
            let _ = std::fs::create_dir_all(dir);
            let _ = std::fs::write(dir.join("nan_batch.json"), dump.to_string());
        }
        CoreError::NonFiniteLoss { epoch: self.epoch, batch: batch_index, scenario_ids: ids }
    }

    /// Runs the next epoch over `train`, returning its log record (without validation).
    pub fn run_epoch(&mut self, train: &[SceneInput]) -> Result<LogRecord> {
        if train.is_empty() {
            return Err(CoreError::Invalid("empty training set".into()));
        }
        let total = self.config.total_steps(train.len());
        let order = self.epoch_order(self.epoch, train.len());
        let start_step = self.step;
        let lr = cosine_lr(start_step, total, self.config.lr, self.config.lr_min);
        let mut acc = LossReport::default();
        let mut skipped = 0;
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&SceneInput> = idx.iter().map(|&i| &train[i]).collect();
            let (r, outcome) = self.train_batch(&batch, total, b)?;
            if outcome != StepOutcome::Applied {
                skipped += 1;
            }
            acc.total += r.total;
            acc.regression += r.regression;
            acc.classification += r.classification;
            acc.auxiliary += r.auxiliary;
        }
        let nb = batches.len() as f64;
        let record = LogRecord {
            epoch: self.epoch,
            step: start_step,
            lr,
            loss: acc.total / nb,
            regression: acc.regression / nb,
            classification: acc.classification / nb,
            auxiliary: acc.auxiliary / nb,
            skipped_steps: skipped,
            val: None,
        };
        self.epoch += 1;
        Ok(record)
    }

    /// Trains the remaining epochs. `on_epoch` sees each record (e.g. to log or checkpoint).
    pub fn fit(
        &mut self,
        train: &[SceneInput],
        val: Option<&[SceneInput]>,
        mut on_epoch: impl FnMut(&LogRecord, &Trainer<T>) -> Result<()>,
    ) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        while self.epoch < self.config.epochs {
            let mut record = self.run_epoch(train)?;
            let last = self.epoch == self.config.epochs;
            let due = self.config.eval_every > 0 && self.epoch.is_multiple_of(self.config.eval_every);
            if let (Some(v), true) = (val, last || due) {
                record.val = Some(evaluate_model(&self.model, v)?.0);
            }
            on_epoch(&record, self)?;
            log.push(record);
        }
        Ok(log)
    }
}

/// Focal-frame predictions for every scene.
pub fn predict_all<T: Scalar>(model: &Hamf<T>, inputs: &[SceneInput]) -> Result<Vec<PredictionSet>> {
    inputs
        .iter()
        .map(|input| {
            let mut tape = Tape::new();
            tape.set_check_finite(false);
            let out = model.forward(&mut tape, input)?;
            Ok(prediction_from(&tape, &out, &input.id))
        })
        .collect()
}

/// Metrics of the model on `inputs` (focal frame predictions vs focal frame targets).
pub fn evaluate_model<T: Scalar>(
    model: &Hamf<T>,
    inputs: &[SceneInput],
) -> Result<(MetricReport, Vec<ScenarioMetrics>)> {
    let preds = predict_all(model, inputs)?;
    evaluate_predictions(preds.iter().zip(inputs).map(|(p, s)| (p, s.target.as_slice(), s.target_valid.as_slice())))
}
