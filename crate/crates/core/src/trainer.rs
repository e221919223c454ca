//! Soft-prompt training on a frozen encoder.
//!
//! Only the prompt matrix is updated. Loss is cross-entropy over the
//! verbalizer tokens' logits at the mask position; the optimizer is Adam.
//! Validation accuracy is measured once per epoch and the best prompt seen
//! (including the untrained starting point) is returned.

use std::borrow::Cow;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{DoeError, Result};
use crate::model::{forward_batch, predict_label, ForwardOptions, ModelWeights, PromptState, VerbalizerMap};
use crate::tensor::{Eager, Graph, Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop as soon as validation accuracy reaches 1.0, since no later
    /// epoch can improve on it.
    pub stop_at_perfect: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            max_epochs: 100,
            patience: 10,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            stop_at_perfect: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(DoeError::Config("learning rate must be finite and non-negative".into()));
        }
        if self.patience == 0 {
            return Err(DoeError::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DoeError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Epoch 0 is the starting prompt (no update, loss measured only).
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainLog {
    pub fn initial_val_accuracy(&self) -> f64 {
        self.records.first().map_or(0.0, |r| r.val_accuracy)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_accuracy", "elapsed_ms"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_accuracy.to_string(),
                format!("{:.3}", r.elapsed_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loss and prompt gradient for one minibatch, accumulated example by
/// example in index order.
fn batch_gradient(
    weights: &ModelWeights<'_, f64>,
    prompt: &Tensor<f64>,
    batch: &[&Example],
    verbalizer: &VerbalizerMap,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; prompt.numel()];
    let mut loss = 0.0;
    for ex in batch {
        let mut tape = Tape::new();
        let p = (prompt.numel() > 0).then(|| tape.param(prompt.clone()));
        let out = forward_batch(&mut tape, weights, p, &[&ex.tokens], &ForwardOptions::default())?;
        let picked = tape.select_cols(out.logits, verbalizer.tokens())?;
        let l = tape.cross_entropy(picked, &[ex.label])?;
        loss += tape.value(l)[0];
        let grads = tape.backward(l)?;
        if let Some(p) = p {
            for (g, &v) in grad.iter_mut().zip(grads.get(p).unwrap_or(&[])) {
                *g += v;
            }
        }
    }
    Ok((loss, grad))
}

/// Adam hyperparameters shared by prompt tuning and backbone pretraining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update at step `step` (1-based).
pub fn adam_update(data: &mut [f64], m: &mut [f64], v: &mut [f64], grad: &[f64], step: u64, p: AdamParams) {
    let t = step.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - p.beta1.powi(t);
    let bc2 = 1.0 - p.beta2.powi(t);
    for i in 0..data.len() {
        let g = grad[i];
        m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g;
        v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g * g;
        data[i] -= p.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + p.eps);
    }
}

fn adam_step(state: &mut PromptState, grad: &[f64], cfg: &TrainConfig) {
    state.step += 1;
    let p = AdamParams {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };
    adam_update(
        state.matrix.data_mut(),
        &mut state.first_moment,
        &mut state.second_moment,
        grad,
        state.step,
        p,
    );
}

/// Trains the prompt on `train`, selecting by accuracy on `val`.
///
/// The weights are only borrowed; the backbone cannot change. Passing the
/// view of an excised model trains the prompt for that expert.
pub fn prompt_tune(
    weights: &ModelWeights<'_, f64>,
    prompt: &PromptState,
    train: &[Example],
    val: &[Example],
    verbalizer: &VerbalizerMap,
    cfg: &TrainConfig,
) -> Result<(PromptState, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DoeError::Input("prompt tuning needs non-empty train and validation splits".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = prompt.clone();
    let mut best = state.clone();
    let initial = evaluate(weights, &state.matrix, val, verbalizer)?;
    let mut log = TrainLog {
        records: vec![EpochRecord {
            epoch: 0,
            train_loss: f64::NAN,
            val_accuracy: initial,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        }],
        best_epoch: 0,
        best_val_accuracy: initial,
    };
    if cfg.stop_at_perfect && initial >= 1.0 {
        return Ok((best, log));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grad) = batch_gradient(weights, &state.matrix, &batch, verbalizer)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(DoeError::NonFiniteLoss {
                    epoch,
                    last_finite: Box::new(state),
                });
            }
            total += loss;
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam_step(&mut state, &grad, cfg);
        }
        let acc = evaluate(weights, &state.matrix, val, verbalizer)?;
        log.records.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_accuracy: acc,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if acc > log.best_val_accuracy {
            log.best_val_accuracy = acc;
            log.best_epoch = epoch;
            best = state.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience || (cfg.stop_at_perfect && log.best_val_accuracy >= 1.0) {
            break;
        }
    }
    Ok((best, log))
}

/// Predicted label for every example, in order.
pub fn predict_all<F: Scalar>(
    weights: &ModelWeights<'_, F>,
    prompt: &Tensor<F>,
    examples: &[Example],
    verbalizer: &VerbalizerMap,
) -> Result<Vec<usize>> {
    // Equal-length examples share one batched pass; rows are computed
    // independently so batching does not change any value.
    let mut preds = vec![0; examples.len()];
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, ex) in examples.iter().enumerate() {
        by_len.entry(ex.tokens.len()).or_default().push(i);
    }
    let (pr, pc) = prompt.as_matrix_dims();
    for idx in by_len.values() {
        for chunk in idx.chunks(32) {
            let mut g: Eager<'_, F> = Eager::new();
            let p = if prompt.numel() > 0 {
                Some(g.constant(Cow::Owned(prompt.data().to_vec()), pr, pc)?)
            } else {
                None
            };
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| examples[i].tokens.as_slice()).collect();
            let out = forward_batch(&mut g, weights, p, &batch, &ForwardOptions::default())?;
            let v = weights.config.vocab_size;
            let logits = g.value(out.logits);
            for (row, &i) in chunk.iter().enumerate() {
                preds[i] = predict_label(&logits[row * v..(row + 1) * v], verbalizer);
            }
        }
    }
    Ok(preds)
}

/// Fraction of examples whose predicted label equals the gold label.
pub fn evaluate<F: Scalar>(
    weights: &ModelWeights<'_, F>,
    prompt: &Tensor<F>,
    examples: &[Example],
    verbalizer: &VerbalizerMap,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(DoeError::Input("cannot evaluate an empty split".into()));
    }
    let preds = predict_all(weights, prompt, examples, verbalizer)?;
    let correct = preds.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    Ok(correct as f64 / examples.len() as f64)
}
