use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, MetricsRecord, Sample, Split};
use crate::error::{Error, Result};
use crate::pipeline::model::Model;
use crate::pipeline::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of the shuffled data held out for validation, in `[0, 1)`.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            batch_size: 32,
            epochs: 10,
            seed: 0,
            validation_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::contract(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Mean loss and accuracy of a model over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy of one logit vector against `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn evaluate_refs(model: &Model, samples: &[(&Sample, usize)]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let per_sample: Vec<(f64, bool)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, (sample, label))| {
            let logits = model.forward(sample)?;
            if *label >= logits.len() {
                return Err(Error::contract(format!(
                    "sample {i} has label {label} but the model produces {} logits",
                    logits.len()
                )));
            }
            Ok((cross_entropy(&logits, *label), argmax(&logits) == *label))
        })
        .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / n;
    let correct = per_sample.iter().filter(|(_, c)| *c).count();
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / n,
    })
}

/// Mean cross-entropy and accuracy of `model` on `dataset`.
pub fn evaluate(model: &Model, dataset: &LabeledDataset) -> Result<Evaluation> {
    if dataset.classes() > model.classes() {
        return Err(Error::contract(format!(
            "dataset has {} classes but the model produces {} logits",
            dataset.classes(),
            model.classes()
        )));
    }
    let refs: Vec<(&Sample, usize)> = dataset.samples().iter().map(|(s, l)| (s, *l)).collect();
    evaluate_refs(model, &refs)
}

/// Trains `model` in place with Adam on mini-batches, returning train and
/// validation metrics after every epoch.
pub fn train(model: &mut Model, dataset: &LabeledDataset, config: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    config.validate()?;
    if dataset.classes() > model.classes() {
        return Err(Error::contract(format!(
            "dataset has {} classes but the model produces {} logits",
            dataset.classes(),
            model.classes()
        )));
    }
    let spec = model.spec().clone();
    if let (false, Some(expected)) = (spec.aggregator.accepts_variable_cardinality(), spec.cardinality) {
        for (i, (sample, _)) in dataset.samples().iter().enumerate() {
            let n = spec.feature_cardinality(sample)?;
            if n != expected {
                return Err(Error::contract(format!(
                    "sample {i} has cardinality {n} but the {} aggregator expects {expected}",
                    spec.aggregator.name()
                )));
            }
        }
    }
    if config.epochs == 0 {
        return Ok(Vec::new());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_valid = (config.validation_fraction * dataset.len() as f64).floor() as usize;
    let (valid_idx, train_idx) = order.split_at(n_valid);
    if train_idx.is_empty() {
        return Err(Error::contract("validation split leaves no training samples"));
    }
    let samples = dataset.samples();
    let pick =
        |idx: &[usize]| -> Vec<(&Sample, usize)> { idx.iter().map(|&i| (&samples[i].0, samples[i].1)).collect() };
    let train_set = pick(train_idx);
    let valid_set = pick(valid_idx);

    let mut adam = Adam::new(config.optimizer, model.params())?;
    let mut train_order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(2 * config.epochs);
    for epoch in 1..=config.epochs {
        train_order.shuffle(&mut rng);
        for (b, chunk) in train_order.chunks(config.batch_size).enumerate() {
            let diverged = |detail: String| Error::Divergence {
                epoch,
                batch: b + 1,
                detail,
            };
            let batch: Vec<(&Sample, usize)> = chunk.iter().map(|&i| train_set[i]).collect();
            let (loss, grads) = model.loss_and_grads(&batch).map_err(|e| match e {
                Error::NonFinite { .. } | Error::Domain { .. } => diverged(e.to_string()),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            adam.step(model.params_mut(), &grads)?;
            if let Some(i) = model.params().iter().position(|p| !p.is_finite()) {
                return Err(diverged(format!(
                    "parameter {} is no longer finite",
                    model.param_names()[i]
                )));
            }
        }
        let t = evaluate_refs(model, &train_set)?;
        records.push(MetricsRecord {
            epoch,
            split: Split::Train,
            loss: t.loss,
            accuracy: t.accuracy,
        });
        if !valid_set.is_empty() {
            let v = evaluate_refs(model, &valid_set)?;
            records.push(MetricsRecord {
                epoch,
                split: Split::Valid,
                loss: v.loss,
                accuracy: v.accuracy,
            });
        }
    }
    Ok(records)
}
