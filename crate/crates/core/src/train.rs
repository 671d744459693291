//! Layer-subset SGD training and evaluation.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::{AccordionModel, ArchSpec, DepthConfig, Scheme};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nncore::{argmax_rows, sgd_step, softmax_xent, RngState, Scalar, Tensor};
use crate::policy::DepthPolicy;

/// Stream used to shuffle the training set in epoch `e` is `SHUFFLE_STREAM_BASE + e`.
pub const SHUFFLE_STREAM_BASE: u64 = 1 << 40;
/// Stream feeding the depth policy.
pub const POLICY_STREAM: u64 = 1 << 41;

const EVAL_BATCH: usize = 1024;

/// Step-wise learning rate: `initial` divided by every divisor whose epoch has been reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            milestones: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 0.0 && self.initial.is_finite()) {
            return Err(Error::config(format!("initial learning rate {} is invalid", self.initial)));
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::config("schedule epochs must be strictly increasing"));
        }
        if self.milestones.iter().any(|&(_, d)| !(d > 0.0 && d.is_finite())) {
            return Err(Error::config("schedule divisors must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|&&(at, _)| epoch >= at)
            .fold(self.initial, |lr, &(_, d)| lr / d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub policy: DepthPolicy,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// The desk-scale recipe: 60 epochs of batch 124 with lr 0.01 divided by 10 at epochs 30 and 45.
    pub fn desk(policy: DepthPolicy, seed: u64) -> Self {
        Self {
            epochs: 60,
            batch_size: 124,
            schedule: LrSchedule {
                initial: 0.01,
                milestones: vec![(30, 10.0), (45, 10.0)],
            },
            policy,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
        }
    }

    pub fn validate(&self, spec: &ArchSpec) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        self.schedule.validate()?;
        self.policy.validate()?;
        if self.policy.total_units != spec.total_units() {
            return Err(Error::config(format!(
                "policy covers {} units, network has {}",
                self.policy.total_units,
                spec.total_units()
            )));
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Residual units that received a gradient this step.
    pub units_trained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub full_error: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub wall_time: Duration,
    pub iterations: usize,
    /// Sum over iterations of the number of units back-propagated.
    pub unit_updates: u64,
    pub digest: String,
}

impl TrainReport {
    pub fn mean_units_per_iteration(&self) -> f64 {
        self.unit_updates as f64 / self.iterations as f64
    }

    /// CSV with columns `epoch,loss,full_error,lr`; `full_error` is empty without validation data.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,full_error,lr\n");
        for e in &self.epochs {
            let err = e.full_error.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", e.epoch, e.loss, err, e.lr).unwrap();
        }
        out
    }
}

/// One SGD step on `config`: only the active units, stem and head are updated.
#[allow(clippy::too_many_arguments)]
pub fn accordion_step<T: Scalar>(
    model: &mut AccordionModel<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    config: &DepthConfig,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<StepStats> {
    if batch.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "accordion_step",
            left: batch.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    model.set_trainable_for(config);
    model.params_mut().zero_trainable_grads();
    let trace = model.forward_traced(config, batch)?;
    let (loss, grad) = softmax_xent(&trace.logits, labels)?;
    let units_trained = model.backward(&trace, &grad)?;
    let cast = |v: f64| T::from(v).ok_or_else(|| Error::config(format!("{v} not representable")));
    sgd_step(model.params_mut(), cast(lr)?, cast(momentum)?, cast(weight_decay)?)?;
    Ok(StepStats { loss, units_trained })
}

/// The sample order used in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, samples: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut RngState::stream(seed, SHUFFLE_STREAM_BASE + epoch as u64));
    order
}

/// Trains `model` in place. With a validation set, the full-configuration
/// error is recorded after every epoch.
pub fn train(
    model: &mut AccordionModel<f32>,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    cfg.validate(model.spec())?;
    if dataset.dim() != model.spec().input_dim {
        return Err(Error::Dimension {
            op: "train",
            left: vec![dataset.len(), dataset.dim()],
            right: vec![model.spec().input_dim],
        });
    }
    let started = Instant::now();
    let full = DepthConfig::full(cfg.policy.scheme, model.spec());
    let mut policy_rng = RngState::stream(cfg.seed, POLICY_STREAM);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut iterations = 0;
    let mut unit_updates = 0u64;

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let order = epoch_order(cfg.seed, epoch, dataset.len());
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = dataset.batch(chunk);
            let config = cfg.policy.sample(&mut policy_rng);
            let stats = accordion_step(model, &x, &y, &config, lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += stats.loss;
            unit_updates += stats.units_trained as u64;
            steps += 1;
        }
        iterations += steps;
        let full_error = validation.map(|v| evaluate(model, &full, v)).transpose()?;
        epochs.push(EpochStats {
            epoch,
            loss: loss_sum / steps as f64,
            full_error,
            lr,
        });
    }
    Ok(TrainReport {
        epochs,
        wall_time: started.elapsed(),
        iterations,
        unit_updates,
        digest: model.params().digest(),
    })
}

/// Fraction of samples whose arg-max prediction differs from the label.
pub fn evaluate<T: Scalar>(model: &AccordionModel<T>, config: &DepthConfig, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    let mut wrong = 0usize;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, y) = dataset.batch(chunk);
        let logits = model.forward(config, &x.cast::<T>())?;
        wrong += argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / dataset.len() as f64)
}

/// Builds a fresh model from `spec` with `model_seed` and trains it.
pub fn train_new(
    spec: &ArchSpec,
    model_seed: u64,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(AccordionModel<f32>, TrainReport)> {
    let mut model = AccordionModel::build(spec.clone(), model_seed)?;
    let report = train(&mut model, dataset, validation, cfg)?;
    Ok((model, report))
}

/// Error of every `(scheme, n)` for `n = 1..=B·K`, in that order.
pub fn error_curve<T: Scalar>(model: &AccordionModel<T>, scheme: Scheme, dataset: &Dataset) -> Result<Vec<f64>> {
    (1..=model.spec().total_units())
        .map(|n| evaluate(model, &DepthConfig::new(scheme, n, model.spec())?, dataset))
        .collect()
}
