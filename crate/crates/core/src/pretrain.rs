//! Masked-token pretraining of the encoder backbone.
//!
//! A randomly initialized encoder carries no knowledge for a soft prompt to
//! align, so backbones are first trained on a small masked-token corpus.
//! After this step the backbone is frozen for good.

use std::collections::HashMap;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{DoeError, Result};
use crate::model::{forward_batch, ForwardOptions, ModelConfig, ParameterSet, Vocabulary};
use crate::tensor::{Graph, Tape, Tensor};
use crate::trainer::{adam_update, AdamParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            corpus_size: 4000,
            epochs: 3,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Loss and per-path gradients of one example, all weights trainable.
fn example_gradient(
    params: &ParameterSet<f64>,
    ex: &Example,
    grads: &mut HashMap<String, Vec<f64>>,
) -> Result<f64> {
    let addr: HashMap<*const Tensor<f64>, &str> = params
        .tensors()
        .iter()
        .map(|(p, t)| (t as *const _, p.as_str()))
        .collect();
    let w = params.weights()?;
    let mut tape = Tape::with_trainable_weights();
    let out = forward_batch(&mut tape, &w, None, &[&ex.tokens], &ForwardOptions::default())?;
    let loss = tape.cross_entropy(out.logits, &[ex.label])?;
    let value = tape.value(loss)[0];
    let vars: Vec<_> = tape.weight_vars().to_vec();
    let g = tape.backward(loss)?;
    for (ptr, var) in vars {
        let path = addr
            .get(&ptr)
            .ok_or_else(|| DoeError::Usage("weight outside the parameter set".into()))?;
        if let Some(d) = g.get(var) {
            let acc = grads
                .entry(path.to_string())
                .or_insert_with(|| vec![0.0; d.len()]);
            acc.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
    }
    Ok(value)
}

/// Trains every weight of `params` on `corpus` with Adam. Each example's
/// `label` is the vocabulary id of its masked token.
pub fn pretrain(params: &mut ParameterSet<f64>, corpus: &[Example], cfg: &PretrainConfig) -> Result<PretrainLog> {
    if corpus.is_empty() {
        return Err(DoeError::Input("pretraining corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(DoeError::Config("batch size must be at least 1".into()));
    }
    let adam = AdamParams {
        learning_rate: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut moments: HashMap<String, (Vec<f64>, Vec<f64>)> = params
        .tensors()
        .iter()
        .map(|(p, t)| (p.clone(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = PretrainLog::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = HashMap::new();
            for &i in chunk {
                total += example_gradient(params, &corpus[i], &mut grads)?;
            }
            if !total.is_finite() {
                return Err(DoeError::Numeric(format!("non-finite pretraining loss in epoch {epoch}")));
            }
            step += 1;
            let inv = 1.0 / chunk.len() as f64;
            for (path, mut g) in grads {
                g.iter_mut().for_each(|v| *v *= inv);
                let (m, v) = moments.get_mut(&path).expect("moments cover every tensor");
                adam_update(params.get_mut(&path)?.data_mut(), m, v, &g, step, adam);
            }
        }
        let mean = total / corpus.len() as f64;
        debug!("pretrain epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    Ok(log)
}

/// Fresh desk-scale backbone pretrained on the standard synthetic corpus.
pub fn pretrained_backbone(vocab: &Vocabulary, cfg: &PretrainConfig) -> Result<(ParameterSet<f64>, PretrainLog)> {
    let mut params = ParameterSet::init(ModelConfig::desk(vocab.len()), cfg.seed)?;
    let corpus = crate::bench::synthetic::pretraining_corpus(vocab, cfg.corpus_size, cfg.seed)?;
    let log = pretrain(&mut params, &corpus, cfg)?;
    Ok((params, log))
}
