//! Mini-batch training with AdamW and plateau learning-rate decay.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Sample};
use crate::error::{CsnError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::CsnModel;
use crate::params::{Gradients, ParamKind, ParamStore};
use crate::seeding::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Factor applied to the learning rate after a non-improving epoch; 1
    /// keeps it constant.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Stop as soon as validation R@1 reaches this value.
    pub target_r_at_1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            learning_rate: 0.001,
            lr_decay: 0.5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 20,
            patience: 2,
            target_r_at_1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(CsnError::Config(format!("train.learning_rate = {} must be > 0", self.learning_rate)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(CsnError::Config(format!("train.lr_decay = {} not in (0, 1]", self.lr_decay)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(CsnError::Config("train.batch_size and train.max_epochs must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(CsnError::Config("train.weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam. Embedding tables are not decayed.
pub struct AdamW {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            weight_decay: config.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let decay = match store.get(id).kind {
                ParamKind::Embedding => 0.0,
                _ => self.weight_decay,
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.value_mut(id);
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * (mhat / (vhat.sqrt() + self.epsilon) + decay * *pi);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub valid_r_at_1: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: EvalReport,
}

fn non_finite(model: &CsnModel, grads: &Gradients) -> CsnError {
    let grad_name = model
        .store
        .iter()
        .find(|(id, _)| grads.get(*id).is_some_and(|g| !g.is_finite()))
        .map(|(_, p)| p.name.clone());
    let msg = match (model.store.first_non_finite(), grad_name) {
        (Some(p), _) => format!("parameter {p} became non-finite"),
        (None, Some(p)) => format!("gradient of parameter {p} is non-finite"),
        (None, None) => "loss is non-finite".to_string(),
    };
    CsnError::NonFinite(msg)
}

/// Trains `model` in place and restores the parameters of the best
/// validation epoch. `on_epoch` is called after every epoch.
pub fn train(
    model: &mut CsnModel,
    train_sets: &[CandidateSet],
    valid_sets: &[CandidateSet],
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_sets.is_empty() || valid_sets.is_empty() {
        return Err(CsnError::EmptyCorpus);
    }
    let mut data_rng = stream_rng(seed, Stream::Data);
    let mut dropout_rng = stream_rng(seed, Stream::Dropout);
    let mut opt = AdamW::new(&model.store, config);
    let mut order: Vec<(usize, usize)> = train_sets
        .iter()
        .enumerate()
        .flat_map(|(s, set)| (0..set.candidates.len()).map(move |c| (s, c)))
        .collect();

    let mut history = Vec::new();
    let mut best: Option<(usize, EvalReport, ParamStore)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut data_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<Sample<'_>> = batch.iter().map(|&(s, c)| train_sets[s].sample(c)).collect();
            let (loss, grads) = model.batch_gradients(&samples, Some(&mut dropout_rng))?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(non_finite(model, &grads));
            }
            opt.update(&mut model.store, &grads);
            if model.store.first_non_finite().is_some() {
                return Err(non_finite(model, &grads));
            }
            epoch_loss += loss;
        }
        let report = evaluate(model, valid_sets)?;
        let improved = best.as_ref().is_none_or(|(_, b, _)| report.r_at_1 > b.r_at_1);
        let record = EpochRecord {
            epoch,
            learning_rate: opt.lr,
            train_loss: epoch_loss / order.len() as f64,
            valid_r_at_1: report.r_at_1,
            improved,
        };
        on_epoch(&record);
        history.push(record);
        let reached = config.target_r_at_1.is_some_and(|t| report.r_at_1 >= t);
        if improved {
            stale = 0;
            best = Some((epoch, report, model.store.clone()));
        } else {
            stale += 1;
            opt.lr *= config.lr_decay;
            if stale >= config.patience {
                break;
            }
        }
        if reached {
            break;
        }
    }
    let (best_epoch, best_valid, store) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_valid,
    })
}
