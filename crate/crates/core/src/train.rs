//! Minibatch SGD training and evaluation.
//!
//! The optimizer is heavy-ball momentum, `v = m * v + g; theta -= lr * v`,
//! with L2 weight decay added to the gradient of conv and dense weights
//! only. The learning rate is divided by `lr_divisor` at every milestone.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{augment, load_dataset, Augment, Dataset, DatasetSource, Split};
use crate::error::{Error, Result};
use crate::mask::clamp_sigma;
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::zoo::{apply_policy, build_named, ConvPolicy, ModelName};

/// Stream of the data-order generator; stream 0 is left to initialization.
const DATA_STREAM: u64 = 1;
const EVAL_BATCH: usize = 250;

fn one() -> f64 {
    1.0
}
fn ten() -> f64 {
    10.0
}
fn momentum() -> f64 {
    0.9
}
fn weight_decay() -> f64 {
    1e-4
}

/// A training run. Serialized as JSON; see `configs/` for examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelName,
    /// Channel multiplier (resnet20-slim only).
    #[serde(default = "one")]
    pub width: f64,
    #[serde(default)]
    pub policy: ConvPolicy,
    pub dataset: DatasetSource,
    /// Use only the first `n` training images.
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs after which the rate is divided; strictly increasing, `< epochs`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "ten")]
    pub lr_divisor: f64,
    #[serde(default = "momentum")]
    pub momentum: f64,
    #[serde(default = "weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub augment: Augment,
    #[serde(default)]
    pub seed: u64,
    /// Directory receiving `metrics.csv` and `checkpoint.bin` after every epoch.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        // lr = 0 is accepted as a null update
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.lr_divisor > 0.0) || !self.lr_divisor.is_finite() {
            return fail(format!("lr_divisor must be positive, got {}", self.lr_divisor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.width > 0.0) {
            return fail(format!("width must be positive, got {}", self.width));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("milestones {:?} are not strictly increasing", self.milestones));
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return fail(format!("milestone {last} is not below epochs {}", self.epochs));
            }
        }
        if self.train_subset == Some(0) || self.test_subset == Some(0) {
            return fail("subset sizes must be positive".into());
        }
        self.policy.validate()
    }

    /// Rate used during zero-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr / self.lr_divisor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy on the (augmented) training batches as they were seen.
    pub train_acc: f64,
    pub test_acc: f64,
    /// Effective (clamped) sigma of every static GMConv layer.
    pub sigmas: Vec<f64>,
}

/// `epoch,train_loss,test_acc,sigma_0..sigma_n`, one row per epoch.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let n = history.first().map_or(0, |m| m.sigmas.len());
    let mut out = String::from("epoch,train_loss,test_acc");
    for i in 0..n {
        out.push_str(&format!(",sigma_{i}"));
    }
    out.push('\n');
    for m in history {
        out.push_str(&format!("{},{},{}", m.epoch, m.train_loss, m.test_acc));
        for s in &m.sigmas {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: Option<f64>,
    pub total: usize,
}

/// Top-1 (and optionally top-5) accuracy over every item of `data`.
pub fn evaluate(model: &Model, data: &Dataset, top5: bool) -> Result<Accuracy> {
    let spec = model.spec();
    if spec.num_classes != data.num_classes {
        return Err(Error::Data(format!(
            "model predicts {} classes, dataset has {}",
            spec.num_classes, data.num_classes
        )));
    }
    if spec.input_channels != data.channels {
        return Err(Error::Data(format!(
            "model expects {} input channels, dataset has {}",
            spec.input_channels, data.channels
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.logits(&x)?;
        let k = spec.num_classes;
        for (row, &y) in logits.data().chunks(k).zip(&labels) {
            // strict comparisons keep first-index tie breaking
            let above = row.iter().enumerate().filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y)).count();
            hit1 += (above == 0) as usize;
            hit5 += (above < 5) as usize;
        }
    }
    let n = data.len() as f64;
    Ok(Accuracy { top1: hit1 as f64 / n, top5: top5.then(|| hit5 as f64 / n), total: data.len() })
}

/// Load both splits of `config.dataset`, truncated to the configured subsets.
pub fn load_splits(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let mut train = load_dataset(&config.dataset, Split::Train)?;
    let mut test = load_dataset(&config.dataset, Split::Test)?;
    if let Some(n) = config.train_subset {
        train = train.take(n);
    }
    if let Some(n) = config.test_subset {
        test = test.take(n);
    }
    Ok((train, test))
}

/// Fresh model for `config` sized to `data`.
pub fn build_for(config: &TrainConfig, data: &Dataset) -> Result<Model> {
    let spec = build_named(config.model, data.num_classes, config.width)?;
    let spec = apply_policy(&spec, &config.policy)?;
    let spec = if spec.input_channels != data.channels { spec.with_input_channels(data.channels)? } else { spec };
    Model::new(spec, config.seed)
}

pub struct Trainer {
    config: TrainConfig,
    train: Dataset,
    test: Dataset,
    model: Model,
    velocity: Vec<Tensor>,
    rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_splits(&config)?;
        let model = build_for(&config, &train)?;
        Self::with_parts(config, train, test, model)
    }

    /// Train an existing model (for example a converted twin).
    pub fn with_parts(config: TrainConfig, train: Dataset, test: Dataset, model: Model) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let velocity = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self { config, train, test, model, velocity, rng, epoch: 0, history: Vec::new() })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        let (train, test) = load_splits(&config)?;
        let mut t = Self::with_parts(config, train, test, ckpt.model)?;
        if !ckpt.velocity.is_empty() {
            t.velocity = ckpt.velocity;
        }
        t.rng = ckpt.rng.restore()?;
        t.epoch = ckpt.epoch;
        t.history = ckpt.history;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            velocity: self.velocity.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
            config: Some(self.config.clone()),
        }
    }

    fn static_sigmas(&self) -> Vec<f64> {
        self.model.static_sigmas().into_iter().map(|(_, s)| clamp_sigma(s).magnitude).collect()
    }

    /// Run one epoch and return its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let lr = self.config.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let shape = (self.train.channels, self.train.height, self.train.width);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut pixels = Vec::with_capacity(chunk.len() * self.train.image_len());
            for &i in chunk {
                pixels.extend(augment(self.train.image(i), shape, self.config.augment, &mut self.rng));
            }
            let x = Tensor::new(&[chunk.len(), shape.0, shape.1, shape.2], pixels)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| self.train.labels()[i]).collect();

            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let logits = self.model.forward(&mut tape, &bound, xv, None)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(self.diverged(b, lr, loss_value));
            }
            let preds = tape.value(logits).argmax_rows()?;
            correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
            loss_sum += loss_value * chunk.len() as f64;

            let mut grads = tape.backward(loss)?;
            let (m, wd) = (self.config.momentum, self.config.weight_decay);
            for ((p, v), var) in self.model.params_mut().iter_mut().zip(&mut self.velocity).zip(&bound.vars) {
                let Some(g) = grads.take(*var) else { continue };
                let decay = if p.group.decays() { wd } else { 0.0 };
                for ((theta, vel), gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vel = m * *vel + gi + decay * *theta;
                    *theta -= lr * *vel;
                }
            }
        }
        let test_acc = if self.test.is_empty() { f64::NAN } else { evaluate(&self.model, &self.test, false)?.top1 };
        self.epoch += 1;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / self.train.len() as f64,
            train_acc: correct as f64 / self.train.len() as f64,
            test_acc,
            sigmas: self.static_sigmas(),
        };
        info!(
            "epoch {} lr {} loss {:.4} train {:.4} test {:.4}",
            metrics.epoch, lr, metrics.train_loss, metrics.train_acc, metrics.test_acc
        );
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    fn diverged(&self, batch: usize, lr: f64, loss: f64) -> Error {
        let max_abs = self.model.params().iter().flat_map(|p| p.value.data()).fold(0.0f64, |a, v| {
            if v.is_finite() {
                a.max(v.abs())
            } else {
                f64::INFINITY
            }
        });
        let mut msg = format!(
            "loss {loss} at epoch {} batch {batch} (lr {lr}); max |param| {max_abs}; sigmas {:?}",
            self.epoch + 1,
            self.static_sigmas()
        );
        if let Some(dir) = &self.config.output {
            let path = dir.join("diverged.bin");
            match fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).and_then(|_| self.checkpoint().save(&path)) {
                Ok(()) => msg.push_str(&format!("; snapshot written to {}", path.display())),
                Err(e) => warn!("could not write divergence snapshot: {e}"),
            }
        }
        Error::Diverged(msg)
    }

    /// Write `metrics.csv` and `checkpoint.bin` into the configured output.
    pub fn write_outputs(&self) -> Result<()> {
        let Some(dir) = &self.config.output else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, metrics_csv(&self.history)).map_err(|e| Error::io(&csv, e))?;
        self.checkpoint().save(&dir.join("checkpoint.bin"))
    }

    /// Train until `config.epochs` epochs are complete.
    pub fn run(&mut self) -> Result<&[EpochMetrics]> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
            self.write_outputs()?;
        }
        Ok(&self.history)
    }
}

/// Train from scratch and return the finished trainer.
pub fn train(config: TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(config)?;
    t.run()?;
    Ok(t)
}
