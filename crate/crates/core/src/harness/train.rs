use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bankio::{LayerBank, Split, TaskFlavor};
use crate::error::{Error, Result};
use crate::gradcheck::Parameterized;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::tape::GradientTape;
use crate::tensor::BnMode;

use super::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for fine-tuning a full pre-trained encoder.
    pub fn paper_scale() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            ..Default::default()
        }
    }

    /// Looks up a named preset: `desk` or `paper-scale`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(Error::Config(format!(
                "unknown training preset {other:?} (expected desk or paper-scale)"
            ))),
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer().validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mini-batch loss after each optimizer step.
    pub loss_curve: Vec<f64>,
    /// Loss on the whole training split (batch statistics) before training.
    pub initial_loss: f64,
    /// Same, after training.
    pub final_loss: f64,
}

/// Splits a shuffled order into mini-batches. A trailing batch of one
/// sentence is folded into its predecessor: batch normalization over a
/// single pooled vector has no variance to normalize by.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Fits `model` to the training split of `bank` with AdamW.
pub fn train(model: &Model, bank: &LayerBank, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_bank(bank)?;
    let train_idx = bank.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Data("the bank has no training sentences".into()));
    }
    let initial_loss = model.loss(bank, &train_idx, BnMode::Training)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model: model.clone(),
            loss_curve: Vec::new(),
            initial_loss,
            final_loss: initial_loss,
        });
    }

    let mut model = model.clone();
    let mut opt = AdamW::new(cfg.optimizer(), &model.parameters())?;
    let mut shuffle = rng::stream(cfg.seed, "train.shuffle");
    let mut loss_curve = Vec::new();
    model.set_mode(BnMode::Training);
    for _ in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle);
        for batch in batches(&order, cfg.batch_size) {
            let inputs = model.system.gather(bank, &batch)?;
            let mut tape = GradientTape::new();
            let trace = model.record(&mut tape, &inputs)?;
            let loss = tape.cross_entropy(trace.logits, &model.targets(bank, &batch)?)?;
            let grads = tape.backward(loss, 1.0)?.named(&tape);
            let value = tape.value(loss).as_scalar().expect("scalar loss");
            if !value.is_finite() {
                return Err(Error::Data(format!("training loss became non-finite ({value})")));
            }
            loss_curve.push(value);
            opt.step(model.parameters_mut(), &grads)?;
            if let Some(stats) = &trace.batch_stats {
                model.apply_batch_stats(stats);
            }
        }
    }
    model.set_mode(BnMode::Evaluation);
    let final_loss = model.loss(bank, &train_idx, BnMode::Training)?;
    Ok(TrainOutcome {
        model,
        loss_curve,
        initial_loss,
        final_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl F1Counts {
    /// Pools counts over every class except `ignore`.
    pub fn from_predictions(predictions: &[usize], gold: &[usize], ignore: Option<usize>) -> Self {
        let mut c = F1Counts::default();
        for (&p, &g) in predictions.iter().zip(gold) {
            let counted = |k: usize| Some(k) != ignore;
            if p == g {
                if counted(g) {
                    c.tp += 1;
                }
            } else {
                if counted(p) {
                    c.fp += 1;
                }
                if counted(g) {
                    c.fn_ += 1;
                }
            }
        }
        c
    }

    /// `2TP / (2TP + FP + FN)`; 1.0 when there is nothing to find and nothing was predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub count: usize,
}

/// Scores predictions. Token tasks exclude class 0 from F1, as an
/// outside-of-entity tag would be.
pub fn score(predictions: &[usize], gold: &[usize], flavor: TaskFlavor) -> Result<Metrics> {
    if predictions.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    let ignore = match flavor {
        TaskFlavor::Sentence => None,
        TaskFlavor::Token => Some(0),
    };
    Ok(Metrics {
        accuracy: correct as f64 / gold.len() as f64,
        micro_f1: F1Counts::from_predictions(predictions, gold, ignore).f1(),
        count: gold.len(),
    })
}

const EVAL_CHUNK: usize = 256;

/// Arg-max class per logit row (lowest index wins ties), in evaluation mode.
pub fn predict(model: &Model, bank: &LayerBank, indices: &[usize]) -> Result<Vec<usize>> {
    model.check_bank(bank)?;
    let mut m = model.clone();
    m.set_mode(BnMode::Evaluation);
    let mut out = Vec::new();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let logits = m.logits(&m.system.gather(bank, chunk)?)?;
        let k = logits.shape().channels;
        for row in logits.data().chunks_exact(k) {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Evaluation-mode metrics on `indices` of `bank`.
pub fn evaluate_indices(model: &Model, bank: &LayerBank, indices: &[usize]) -> Result<Metrics> {
    let predictions = predict(model, bank, indices)?;
    score(&predictions, &model.targets(bank, indices)?, model.flavor)
}

/// Evaluation-mode metrics on one split of `bank`.
pub fn evaluate(model: &Model, bank: &LayerBank, split: Split) -> Result<Metrics> {
    let idx = bank.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("the bank has no {split:?} sentences")));
    }
    evaluate_indices(model, bank, &idx)
}
