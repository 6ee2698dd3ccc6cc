//! Training: one Adam optimizer over every parameter, linear warmup then
//! linear decay, optional global-norm clipping, and per-epoch evaluation
//! with best-dev model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::dataset::DialogueRecord;
use crate::data::schema::Schema;
use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::eval::{evaluate, PrevStateMode};
use crate::model::{batch_weights, weighted_sum, DstModel, ReuseSpec, TrainingExample};
use crate::param::{ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub warmup_proportion: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub reuse: ReuseSpec,
    pub clip_norm: Option<f64>,
    pub max_value_len: usize,
    /// Stop once train joint accuracy reaches this value.
    pub target_train_jga: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale settings for a randomly initialised toy model.
    pub fn desk(vocab_size: usize) -> Self {
        let mut model = ModelConfig::toy(vocab_size);
        // From random init at this width, 0.02 leaves training too slow to
        // fit the synthetic corpus within 200 epochs.
        model.init_std = 0.1;
        TrainConfig {
            model,
            learning_rate: 1e-3,
            warmup_proportion: 0.1,
            batch_size: 16,
            epochs: 200,
            seed: 42,
            reuse: ReuseSpec::best(),
            clip_norm: Some(1.0),
            max_value_len: 8,
            target_train_jga: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return bad("warmup_proportion must be in [0, 1]");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be > 0");
        }
        self.model.validate()
    }
}

/// Linear warmup to `peak` over the first `ceil(warmup·total)` steps, then
/// linear decay to 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_proportion: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_proportion * total_steps as f64).ceil() as usize;
        LrSchedule {
            peak,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else if self.total_steps == self.warmup_steps {
            self.peak
        } else {
            let left = self.total_steps.saturating_sub(step) as f64;
            self.peak * left / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

/// Adam with bias correction, `β = (0.9, 0.999)`, `ε = 1e-8`.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    /// One optimizer covering every trainable parameter.
    pub fn new(params: &ParamSet<F>) -> Self {
        let ids: Vec<ParamId> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        let zeros = |id: &ParamId| Tensor::zeros(params.get(*id).shape());
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    /// Parameters this optimizer updates.
    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated grads.
    pub fn step(&mut self, params: &mut ParamSet<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::lit(1.0 - self.beta1.powi(t));
        let c2 = F::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (F::lit(lr), F::lit(self.eps));
        let one = F::one();
        for (k, &id) in self.ids.iter().enumerate() {
            let p = params.get_mut(id);
            let grad = p.grad().data().to_vec();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let value = p.value_mut().data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all trainable grads.
pub fn grad_norm<F: Scalar>(params: &ParamSet<F>) -> f64 {
    params
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad().data().iter().map(|g| g.as_f64() * g.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescales grads so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Scalar>(params: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        for p in params.iter_mut().filter(|p| p.trainable) {
            for g in p.grad_mut().data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

/// One line of the metric log. Wall-clock time is kept separately so the
/// log itself is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_jga: f64,
    pub dev_jga: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    /// Model from the epoch with the best dev joint accuracy, ties broken
    /// by train joint accuracy, then by the earlier epoch.
    pub best: DstModel<F>,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Seconds spent in each epoch (training and evaluation).
    pub epoch_seconds: Vec<f64>,
    pub steps: usize,
}

/// Hooks called while training runs.
pub trait TrainObserver {
    fn epoch_end(&mut self, _metrics: &EpochMetrics, _seconds: f64) {}
}

impl TrainObserver for () {}

/// Trains from random initialisation. Deterministic for a fixed config:
/// initialisation and data order both derive from `config.seed`.
pub fn train<F: Scalar>(
    config: &TrainConfig,
    vocab: Vocab,
    schema: Schema,
    train_set: &[DialogueRecord],
    dev_set: &[DialogueRecord],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome<F>> {
    let mut model_config = config.model.clone();
    model_config.vocab_size = vocab.len();
    TrainConfig { model: model_config.clone(), ..config.clone() }.validate()?;
    let mut model = DstModel::<F>::new(
        model_config,
        vocab,
        schema,
        config.reuse.clone(),
        config.max_value_len,
        config.seed,
    )?;
    let examples = model.build_examples(train_set)?;
    if examples.is_empty() {
        return Err(Error::Contract("training set has no turns".into()));
    }
    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let schedule = LrSchedule::new(
        config.learning_rate,
        config.warmup_proportion,
        steps_per_epoch * config.epochs,
    );
    let mut adam = Adam::new(model.params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();

    let mut metrics = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best: Option<((f64, f64), usize, DstModel<F>)> = None;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let loss = batch_step(&mut model, &batch, &config.reuse).map_err(|e| match e {
                Error::NonFinite { value, .. } => Error::NonFinite {
                    step,
                    batch: b,
                    value,
                },
                e => e,
            })?;
            loss_sum += loss;
            if let Some(c) = config.clip_norm {
                clip_grad_norm(model.params_mut(), c);
            }
            adam.step(model.params_mut(), schedule.at(step));
            step += 1;
        }
        let train_jga = evaluate(&model, train_set, PrevStateMode::Predicted, 1)?.joint_goal_accuracy;
        let dev_jga = if dev_set.is_empty() {
            train_jga
        } else {
            evaluate(&model, dev_set, PrevStateMode::Predicted, 1)?.joint_goal_accuracy
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            train_jga,
            dev_jga,
        };
        let secs = start.elapsed().as_secs_f64();
        observer.epoch_end(&m, secs);
        // Dev accuracy on a small corpus is often flat (even 0 throughout);
        // train accuracy breaks ties so selection does not stick at epoch 1.
        let key = (dev_jga, train_jga);
        if best.as_ref().map_or(true, |(b, _, _)| key > *b) {
            best = Some((key, epoch, model.clone()));
        }
        metrics.push(m);
        epoch_seconds.push(secs);
        if matches!(config.target_train_jga, Some(t) if train_jga >= t) {
            break;
        }
    }
    let (_, best_epoch, best) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        best,
        best_epoch,
        metrics,
        epoch_seconds,
        steps: step,
    })
}

/// Accumulates the batch gradient into the model's grad buffers and returns
/// the batch loss. Each example gets its own graph.
pub fn batch_step<F: Scalar>(
    model: &mut DstModel<F>,
    batch: &[&TrainingExample],
    spec: &ReuseSpec,
) -> Result<f64> {
    let updates: usize = batch.iter().map(|e| e.num_updates()).sum();
    let (ws, wv) = batch_weights::<F>(batch.len(), updates);
    model.params_mut().zero_grad();
    let mut total = 0.0;
    for ex in batch {
        let grads = {
            let mut g = Graph::new(model.params());
            let l = model.example_losses(&mut g, ex, spec)?;
            let part = weighted_sum(&mut g, &l, ws, wv)?;
            let v = g.value(part).item().as_f64();
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step: 0,
                    batch: 0,
                    value: v,
                });
            }
            total += v;
            g.backward(part)?
        };
        grads.accumulate_into(model.params_mut());
    }
    Ok(total)
}
