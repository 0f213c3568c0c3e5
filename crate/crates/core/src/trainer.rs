//! Deterministic minibatch training with AdamW and gradient accumulation.
//!
//! Each epoch visits the training set in a permutation drawn from stream
//! `(seed, Shuffle, epoch)`. Minibatches of `batch_size` samples produce
//! batch-mean gradients; every `accumulation_steps` minibatches (and once
//! more for a trailing partial window) the mean of the accumulated
//! gradients drives one AdamW step. After each epoch the model is scored on
//! the validation set and the best macro-F1 snapshot is kept, the earliest
//! epoch winning ties.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassDistribution, FrameSequence, Sample};
use crate::error::{Error, Result};
use crate::losses::{class_weights, LossConfig};
use crate::metrics::f1_report;
use crate::model::{ClassifierModel, Gradients, Input, Layer};
use crate::rng::{epoch_position, stream_rng, Stream};

/// Anything the trainer can learn from.
pub trait Example: Sync {
    fn input(&self) -> Input<'_>;
    fn label(&self) -> usize;
}

impl Example for Sample {
    fn input(&self) -> Input<'_> {
        Input::from(self.features.as_slice())
    }

    fn label(&self) -> usize {
        self.label
    }
}

impl Example for FrameSequence {
    fn input(&self) -> Input<'_> {
        Input::from(&self.frames)
    }

    fn label(&self) -> usize {
        self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    /// Set from the experiment's top-level `loss`.
    #[serde(skip)]
    pub loss: LossConfig,
    /// Set from the experiment's top-level `seed`.
    #[serde(skip)]
    pub seed: u64,
    /// Parallel per-sample forward/backward; results do not depend on it.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            accumulation_steps: 4,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.01,
            loss: LossConfig::wce(),
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("train.batch_size must be >= 1");
        }
        if self.accumulation_steps == 0 {
            return fail("train.accumulation_steps must be >= 1");
        }
        if self.epochs == 0 {
            return fail("train.epochs must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("train.learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if self.adam_epsilon.is_nan()
            || self.adam_epsilon <= 0.0
            || !self.weight_decay.is_finite()
            || self.weight_decay < 0.0
        {
            return fail("train.adam_epsilon must be > 0 and train.weight_decay >= 0");
        }
        self.loss.validate()
    }
}

/// First and second moment estimates, one buffer per trainable tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

/// One AdamW update with decoupled weight decay:
/// `p <- p - lr*wd*p`, then `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Shape("parameter and gradient shapes differ".into()));
    }
    if state.step == 0 {
        state.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.second = state.first.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = config.learning_rate;
    let (b1, b2) = (config.beta1, config.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * config.weight_decay;
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            let updated = p[i] * decay - lr * m_hat / (v_hat.sqrt() + config.adam_epsilon);
            if !updated.is_finite() {
                return Err(Error::NonFinite(format!("AdamW update of tensor {k}")));
            }
            p[i] = updated;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

/// Keeps the first snapshot with the highest score.
#[derive(Debug, Clone)]
pub struct BestTracker<T> {
    best: Option<(usize, f64, T)>,
}

impl<T> Default for BestTracker<T> {
    fn default() -> Self {
        Self { best: None }
    }
}

impl<T> BestTracker<T> {
    /// Offers epoch `epoch`'s score; `snapshot` runs only on improvement.
    pub fn offer(&mut self, epoch: usize, score: f64, snapshot: impl FnOnce() -> T) {
        if self.best.as_ref().is_none_or(|(_, best, _)| score > *best) {
            self.best = Some((epoch, score, snapshot()));
        }
    }

    pub fn into_best(self) -> Option<(usize, f64, T)> {
        self.best
    }
}

/// `(epoch, score)` of the earliest maximum in a 1-based per-epoch series.
pub fn select_best(scores: &[f64]) -> Option<(usize, f64)> {
    let mut tracker = BestTracker::default();
    for (i, &s) in scores.iter().enumerate() {
        tracker.offer(i + 1, s, || ());
    }
    tracker.into_best().map(|(e, s, ())| (e, s))
}

pub fn predict<E: Example>(model: &ClassifierModel, examples: &[E]) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| {
            Ok(argmax(
                model.forward(e.input())?.as_slice().expect("contiguous"),
            ))
        })
        .collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn validation_f1<E: Example>(model: &ClassifierModel, examples: &[E]) -> Result<f64> {
    let predicted = predict(model, examples)?;
    let truth: Vec<usize> = examples.iter().map(Example::label).collect();
    Ok(f1_report(&truth, &predicted, model.output_dim())?.macro_f1)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_model: ClassifierModel,
    pub final_model: ClassifierModel,
    pub report: TrainReport,
}

/// Observation points inside [`train_with`].
pub enum TrainEvent<'a> {
    /// After optimizer step `step` (1-based, counted across epochs).
    Step {
        epoch: usize,
        step: u64,
        model: &'a ClassifierModel,
    },
    EpochEnd {
        record: &'a EpochRecord,
        model: &'a ClassifierModel,
    },
}

pub fn train<E: Example>(
    model: ClassifierModel,
    train_set: &[E],
    val_set: &[E],
    dist: &ClassDistribution,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, dist, config, &mut |_| {})
}

pub fn train_with<E: Example>(
    mut model: ClassifierModel,
    train_set: &[E],
    val_set: &[E],
    dist: &ClassDistribution,
    config: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = model.output_dim();
    if dist.num_classes() != classes {
        return Err(Error::Shape(format!(
            "model has {classes} outputs but the distribution has {} classes",
            dist.num_classes()
        )));
    }
    if let Some(bad) = train_set
        .iter()
        .chain(val_set)
        .find(|e| e.label() >= classes)
    {
        return Err(Error::InvalidArgument(format!(
            "label {} outside {classes} classes",
            bad.label()
        )));
    }
    let weights = class_weights(dist);
    let uses_dropout = model
        .layers()
        .iter()
        .any(|l| matches!(l, Layer::Lora(lora) if lora.dropout > 0.0));

    let mut state = AdamState::default();
    let mut records = Vec::with_capacity(config.epochs);
    let mut tracker = BestTracker::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(config.seed, Stream::Shuffle, epoch as u64));

        let mut pending: Option<Gradients> = None;
        let mut pending_count = 0usize;
        let mut loss_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let start = b * config.batch_size;
            let forward = |(offset, &idx): (usize, &usize)| {
                let mut rng = uses_dropout.then(|| {
                    stream_rng(
                        config.seed,
                        Stream::Dropout,
                        epoch_position(epoch, start + offset),
                    )
                });
                model.forward_trace(
                    train_set[idx].input(),
                    rng.as_mut().map(|r| r as &mut dyn RngCore),
                )
            };
            let traces: Vec<_> = if config.threads > 1 {
                batch
                    .par_iter()
                    .enumerate()
                    .map(forward)
                    .collect::<Result<_>>()
            } else {
                batch.iter().enumerate().map(forward).collect::<Result<_>>()
            }
            .map_err(|e| numeric_context(e, epoch, b + 1))?;

            let mut logits = Array2::zeros((batch.len(), classes));
            for (mut row, trace) in logits.axis_iter_mut(Axis(0)).zip(&traces) {
                row.assign(&trace.logits);
            }
            let targets: Vec<usize> = batch.iter().map(|&i| train_set[i].label()).collect();
            let loss = config
                .loss
                .evaluate(logits.view(), &targets, &weights, dist)
                .map_err(|e| numeric_context(e, epoch, b + 1))?;
            if !loss.value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }
            loss_sum += loss.value;

            let backward = |(i, trace)| model.backward(trace, loss.grad.row(i));
            let parts: Vec<Gradients> = if config.threads > 1 {
                traces
                    .par_iter()
                    .enumerate()
                    .map(backward)
                    .collect::<Result<_>>()?
            } else {
                traces
                    .iter()
                    .enumerate()
                    .map(backward)
                    .collect::<Result<_>>()?
            };
            let grad = Gradients::tree_sum(parts).expect("non-empty batch");
            match pending.as_mut() {
                Some(acc) => acc.add_assign(&grad),
                None => pending = Some(grad),
            }
            pending_count += 1;

            if pending_count == config.accumulation_steps || b + 1 == batches.len() {
                let mut grad = pending.take().expect("accumulated gradient");
                grad.scale(1.0 / pending_count as f64);
                pending_count = 0;
                if !grad.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b + 1,
                    });
                }
                let grads = grad.tensors();
                adamw_step(
                    &mut model.trainable_tensors_mut(),
                    &grads,
                    &mut state,
                    config,
                )
                .map_err(|e| numeric_context(e, epoch, b + 1))?;
                observer(TrainEvent::Step {
                    epoch,
                    step: state.step,
                    model: &model,
                });
            }
        }

        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_macro_f1: validation_f1(&model, val_set)?,
        };
        tracker.offer(epoch, record.val_macro_f1, || model.clone());
        observer(TrainEvent::EpochEnd {
            record: &record,
            model: &model,
        });
        records.push(record);
    }

    let (best_epoch, best_val_f1, best_model) = tracker.into_best().expect("epochs >= 1");
    Ok(TrainOutcome {
        best_model,
        final_model: model,
        report: TrainReport {
            epochs: records,
            best_epoch,
            best_val_f1,
        },
    })
}

fn numeric_context(e: Error, epoch: usize, batch: usize) -> Error {
    if e.is_numerical() {
        Error::NonFiniteLoss { epoch, batch }
    } else {
        e
    }
}
