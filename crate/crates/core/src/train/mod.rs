//! Optimisation harness: AdamW, warmup + cosine schedule, label-smoothed
//! loss, gradient accumulation, early stopping and resumable checkpoints.

mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use optim::AdamW;
pub use schedule::Schedule;

use crate::data::TensorSet;
use crate::error::{Error, Result};
use crate::nn::{AnyTensor, Checkpoint, Mode, Model};
use crate::rng::{Purpose, SeedTree};
use crate::tensor::{Graph, Scalar, Tensor};

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

/// Missing fields in a config file take their [`TrainConfig::peft`] value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub micro_batch: usize,
    pub grad_accum_steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub min_lr_ratio: f64,
    pub label_smoothing: f64,
    pub patience: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps_adam: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::peft()
    }
}

impl TrainConfig {
    /// Adapter fine-tuning: 80 epochs, batch 4 × 8 accumulation, lr 1e-4
    /// with 3% warmup and cosine decay to 10%, patience 5.
    pub fn peft() -> Self {
        Self {
            epochs: 80,
            micro_batch: 4,
            grad_accum_steps: 8,
            peak_lr: 1e-4,
            weight_decay: 0.01,
            warmup_ratio: 0.03,
            min_lr_ratio: 0.1,
            label_smoothing: 0.1,
            patience: 5,
            seed: 42,
            betas: (0.9, 0.999),
            eps_adam: 1e-8,
        }
    }

    /// Frozen backbone with a trained head: batch 8 × 4, lr 1e-3, patience 5.
    pub fn frozen() -> Self {
        Self {
            micro_batch: 8,
            grad_accum_steps: 4,
            peak_lr: 1e-3,
            warmup_ratio: 0.0,
            min_lr_ratio: 0.0,
            ..Self::peft()
        }
    }

    /// CNN from scratch: 150 epochs, batch 32, lr 1e-3, patience 10.
    pub fn scratch_cnn() -> Self {
        Self {
            epochs: 150,
            micro_batch: 32,
            grad_accum_steps: 1,
            peak_lr: 1e-3,
            patience: 10,
            ..Self::frozen()
        }
    }

    /// ViT from scratch: as the CNN but with lr 5e-5.
    pub fn scratch_vit() -> Self {
        Self {
            peak_lr: 5e-5,
            ..Self::scratch_cnn()
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.grad_accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.micro_batch == 0 || self.grad_accum_steps == 0 {
            return bad("epochs, micro_batch and grad_accum_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || self.eps_adam <= 0.0 {
            return bad("AdamW betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        Schedule::new(self.peak_lr, self.min_lr_ratio, self.warmup_ratio, 1_000_000).map(|_| ())
    }

    /// Optimizer steps per epoch for `n` training samples.
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.effective_batch()) as u64
    }

    pub fn schedule(&self, n: usize) -> Result<Schedule> {
        let total = self.epochs as u64 * self.steps_per_epoch(n);
        Schedule::new(self.peak_lr, self.min_lr_ratio, self.warmup_ratio, total)
    }
}

/// Patience counter on validation accuracy. Only a strictly higher accuracy
/// counts as an improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records the accuracy of 1-based `epoch`. Returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, accuracy: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| accuracy > b);
        if improved {
            self.best = Some(accuracy);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        (improved, self.bad_epochs >= self.patience)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_loss.to_bits() == other.val_loss.to_bits()
            && self.val_accuracy.to_bits() == other.val_accuracy.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in history {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

/// Mean loss, accuracy and predicted labels of `model` on `set`, in eval
/// mode. Batches run in parallel; results are order-independent.
pub fn evaluate<T: Scalar>(model: &Model<T>, set: &TensorSet<T>, smoothing: f64) -> Result<(f64, f64, Vec<usize>)> {
    if set.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let parts: Vec<(f64, Vec<usize>)> = idx
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<(f64, Vec<usize>)> {
            let x = set.gather(chunk)?;
            let labels = set.labels_of(chunk);
            let mut g = Graph::new();
            let y = model.forward_logits(&mut g, &x, &mut Mode::Eval)?;
            let loss = g.cross_entropy_label_smoothed(y, &labels, smoothing)?;
            let loss = g.value(loss).item().expect("scalar").as_f64() * chunk.len() as f64;
            Ok((loss, argmax_rows(g.value(y))))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(set.len());
    for (l, p) in parts {
        total += l;
        preds.extend(p);
    }
    let correct = preds.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
    Ok((total / set.len() as f64, correct as f64 / set.len() as f64, preds))
}

/// Index of the largest entry per row; ties go to the lower index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Averaged gradients of the label-smoothed loss over `batches` (lists of
/// sample indices), weighting each micro-batch by its share of samples so
/// that the result equals the gradient of the mean loss over their union.
/// Returns the gradients and the mean loss.
pub fn accumulate_grads<T: Scalar>(
    model: &Model<T>,
    set: &TensorSet<T>,
    batches: &[&[usize]],
    smoothing: f64,
    mut dropout_rng: impl FnMut(usize) -> Option<crate::rng::StreamRng>,
) -> Result<(BTreeMap<String, Vec<T>>, f64)> {
    let total: usize = batches.iter().map(|b| b.len()).sum();
    let mut acc: BTreeMap<String, Vec<T>> = BTreeMap::new();
    let mut loss_sum = 0.0;
    for (k, idx) in batches.iter().enumerate() {
        let x = set.gather(idx)?;
        let labels = set.labels_of(idx);
        let mut g = Graph::new();
        let mut rng = dropout_rng(k);
        let mut mode = match rng.as_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let y = model.forward_logits(&mut g, &x, &mut mode)?;
        let loss = g.cross_entropy_label_smoothed(y, &labels, smoothing)?;
        let weight = idx.len() as f64 / total as f64;
        loss_sum += g.value(loss).item().expect("scalar").as_f64() * weight;
        let scaled = g.scale(loss, T::from_f64(weight));
        g.backward(scaled)?;
        for (name, grad) in model.collect_grads(&g) {
            match acc.get_mut(&name) {
                Some(a) => a.iter_mut().zip(&grad).for_each(|(a, &b)| *a = *a + b),
                None => {
                    acc.insert(name, grad);
                }
            }
        }
    }
    if !loss_sum.is_finite() {
        return Err(Error::Numeric(format!("training loss became {loss_sum}")));
    }
    Ok((acc, loss_sum))
}

const TRAIN_PREFIX: &str = "@";

/// Training state between epochs; checkpointable and resumable.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub schedule: Schedule,
    pub opt: AdamW,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub stopper: EarlyStopping,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    train_len: usize,
    best: BTreeMap<String, Tensor<T>>,
    elapsed: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(Error::Data("training split is empty".into()));
        }
        Ok(Self {
            schedule: cfg.schedule(train_len)?,
            opt: AdamW::new(cfg.betas.0, cfg.betas.1, cfg.eps_adam, cfg.weight_decay),
            step: 0,
            epoch: 0,
            stopper: EarlyStopping::new(cfg.patience),
            history: Vec::new(),
            stopped_early: false,
            train_len,
            best: BTreeMap::new(),
            elapsed: 0.0,
            cfg: cfg.clone(),
        })
    }

    pub fn finished(&self) -> bool {
        self.stopped_early || self.epoch >= self.cfg.epochs
    }

    /// Sample order of 0-based `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train_len).collect();
        let mut rng = SeedTree::new(self.cfg.seed).stream(Purpose::Shuffle, epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Runs one epoch of training followed by validation.
    pub fn run_epoch(&mut self, model: &mut Model<T>, train: &TensorSet<T>, val: &TensorSet<T>) -> Result<EpochRecord> {
        if self.finished() {
            return Err(Error::Contract("training has already finished".into()));
        }
        if train.len() != self.train_len {
            return Err(Error::Data(format!(
                "training split has {} samples, trainer was built for {}",
                train.len(),
                self.train_len
            )));
        }
        if val.is_empty() {
            return Err(Error::Data("validation split is empty".into()));
        }
        let start = Instant::now();
        let seeds = SeedTree::new(self.cfg.seed);
        let names = model.trainable_names();
        let order = self.epoch_order(self.epoch);
        let micro: Vec<&[usize]> = order.chunks(self.cfg.micro_batch).collect();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for group in micro.chunks(self.cfg.grad_accum_steps) {
            let step = self.step;
            let (grads, loss) = accumulate_grads(model, train, group, self.cfg.label_smoothing, |k| {
                Some(seeds.stream2(Purpose::Dropout, step, k as u64))
            })?;
            let n: usize = group.iter().map(|b| b.len()).sum();
            loss_sum += loss * n as f64;
            lr = self.schedule.lr_at(self.step)?;
            self.opt.step(model.params_mut(), &names, &grads, lr)?;
            self.step += 1;
        }
        let (val_loss, val_accuracy, _) = evaluate(model, val, self.cfg.label_smoothing)?;
        self.epoch += 1;
        let (improved, stop) = self.stopper.update(self.epoch, val_accuracy);
        if improved {
            self.best = names
                .iter()
                .map(|n| (n.clone(), model.params()[n].clone()))
                .collect();
        }
        self.stopped_early = stop && self.epoch < self.cfg.epochs;
        self.elapsed += start.elapsed().as_secs_f64();
        let rec = EpochRecord {
            epoch: self.epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy,
            lr,
            wall_seconds: self.elapsed,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Restores the best-validation parameters into `model`.
    pub fn finish(self, model: &mut Model<T>) -> Result<TrainOutcome> {
        for (name, t) in &self.best {
            *model.param_mut(name)? = t.clone();
        }
        Ok(TrainOutcome {
            best_epoch: self.stopper.best_epoch,
            best_val_accuracy: self.stopper.best.unwrap_or(0.0),
            stopped_early: self.stopped_early,
            history: self.history,
        })
    }

    /// Model, optimizer moments, schedule position, early-stopping state and
    /// configuration in one checkpoint.
    pub fn checkpoint(&self, model: &Model<T>) -> Checkpoint {
        let state = json!({
            "config": self.cfg,
            "schedule": self.schedule,
            "step": self.step,
            "epoch": self.epoch,
            "stopper": self.stopper,
            "history": self.history,
            "stopped_early": self.stopped_early,
            "train_len": self.train_len,
            "elapsed": self.elapsed,
            "adam": {
                "beta1": self.opt.beta1,
                "beta2": self.opt.beta2,
                "eps": self.opt.eps,
                "weight_decay": self.opt.weight_decay,
                "step": self.opt.step,
            },
        });
        let mut ck = model.to_checkpoint(json!({ "kind": "train", "trainer": state }));
        let f64_tensor = |v: &Vec<f64>| AnyTensor::F64(Tensor::new([v.len()], v.clone()).expect("1-d"));
        for (name, v) in &self.opt.first {
            ck.tensors.insert(format!("{TRAIN_PREFIX}adam.m/{name}"), f64_tensor(v));
        }
        for (name, v) in &self.opt.second {
            ck.tensors.insert(format!("{TRAIN_PREFIX}adam.v/{name}"), f64_tensor(v));
        }
        for (name, t) in &self.best {
            ck.tensors.insert(format!("{TRAIN_PREFIX}best/{name}"), AnyTensor::from_tensor(t));
        }
        ck
    }

    /// Inverse of [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<(Model<T>, Self)> {
        if ck.manifest.get("kind").and_then(Value::as_str) != Some("train") {
            return Err(Error::Format("not a training checkpoint".into()));
        }
        let state = ck
            .manifest
            .get("trainer")
            .ok_or_else(|| Error::Format("manifest lacks trainer state".into()))?;
        let field = |k: &str| -> Result<Value> {
            state
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("trainer state lacks `{k}`")))
        };
        fn parse<V: serde::de::DeserializeOwned>(k: &str, v: Value) -> Result<V> {
            serde_json::from_value(v).map_err(|e| Error::Format(format!("trainer {k}: {e}")))
        }
        let adam = field("adam")?;
        let mut opt: AdamW = AdamW::new(
            parse("beta1", adam["beta1"].clone())?,
            parse("beta2", adam["beta2"].clone())?,
            parse("eps", adam["eps"].clone())?,
            parse("weight_decay", adam["weight_decay"].clone())?,
        );
        opt.step = parse("adam step", adam["step"].clone())?;
        let mut model_ck = Checkpoint::new(ck.manifest.clone());
        model_ck.quantized = ck.quantized.clone();
        let mut best = BTreeMap::new();
        for (name, t) in &ck.tensors {
            let Some(rest) = name.strip_prefix(TRAIN_PREFIX) else {
                model_ck.tensors.insert(name.clone(), t.clone());
                continue;
            };
            let as_vec = || -> Result<Vec<f64>> {
                match t {
                    AnyTensor::F64(t) => Ok(t.data().to_vec()),
                    AnyTensor::F32(_) => Err(Error::Format(format!("{name}: moments must be f64"))),
                }
            };
            if let Some(p) = rest.strip_prefix("adam.m/") {
                opt.first.insert(p.to_string(), as_vec()?);
            } else if let Some(p) = rest.strip_prefix("adam.v/") {
                opt.second.insert(p.to_string(), as_vec()?);
            } else if let Some(p) = rest.strip_prefix("best/") {
                best.insert(p.to_string(), t.to_tensor::<T>());
            } else {
                return Err(Error::Format(format!("unknown training record {name}")));
            }
        }
        let model = Model::from_checkpoint(&model_ck)?;
        let trainer = Self {
            cfg: parse("config", field("config")?)?,
            schedule: parse("schedule", field("schedule")?)?,
            opt,
            step: parse("step", field("step")?)?,
            epoch: parse("epoch", field("epoch")?)?,
            stopper: parse("stopper", field("stopper")?)?,
            history: parse("history", field("history")?)?,
            stopped_early: parse("stopped_early", field("stopped_early")?)?,
            train_len: parse("train_len", field("train_len")?)?,
            elapsed: parse("elapsed", field("elapsed")?)?,
            best,
        };
        Ok((model, trainer))
    }
}

/// Trains the model's trainable parameters until the epoch budget runs out
/// or validation accuracy stops improving, then restores the best epoch.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    train: &TensorSet<T>,
    val: &TensorSet<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, train.len())?;
    while !trainer.finished() {
        trainer.run_epoch(model, train, val)?;
    }
    trainer.finish(model)
}
