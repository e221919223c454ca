//! Flat `key = value` configuration files.
//!
//! The syntax is a TOML subset without tables: one key per line, `#`
//! comments, strings in double quotes and lists in brackets. Every key is
//! optional and overrides a built-in default; unknown keys are rejected.
//!
//! ```text
//! # smaller, faster runs
//! seeds = [0, 1]
//! task_train = 200
//! tune_learning_rate = 0.01
//! selector = "ffn"
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::bench::presets::ExperimentConfig;
use crate::bench::synthetic::TaskKind;
use crate::bench::timing::SpeedupSweep;
use crate::error::{DoeError, Result};
use crate::model::ModuleSelector;
use crate::relevance::ScorerKind;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Seed used when `--seed` is not given.
    pub seed: Option<u64>,
    /// Seeds of multi-seed presets.
    pub seeds: Option<Vec<u64>>,

    pub pretrain_corpus_size: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub pretrain_batch_size: Option<usize>,
    pub pretrain_learning_rate: Option<f64>,

    pub task_kind: Option<String>,
    pub task_classes: Option<usize>,
    pub task_train: Option<usize>,
    pub task_val: Option<usize>,
    pub task_test: Option<usize>,
    pub task_noise: Option<f64>,
    pub task_min_words: Option<usize>,
    pub task_max_words: Option<usize>,
    pub task_keywords: Option<usize>,
    pub task_distractors: Option<usize>,

    pub tune_learning_rate: Option<f64>,
    pub tune_max_epochs: Option<usize>,
    pub tune_patience: Option<usize>,
    pub tune_batch_size: Option<usize>,
    pub tune_stop_at_perfect: Option<bool>,
    pub condense_learning_rate: Option<f64>,
    pub condense_max_epochs: Option<usize>,
    pub condense_patience: Option<usize>,
    pub condense_batch_size: Option<usize>,
    pub condense_stop_at_perfect: Option<bool>,

    pub margin_points: Option<f64>,
    pub selector: Option<String>,
    pub scorer: Option<String>,
    pub sample_size: Option<usize>,
    pub allow_empty: Option<bool>,
    pub per_layer: Option<bool>,
    /// Tolerance of `verify`, in percentage points.
    pub epsilon_points: Option<f64>,

    pub comparison_selector: Option<String>,
    pub comparison_rate: Option<f64>,
    pub sweep_margins: Option<Vec<f64>>,
    pub sweep_sample_sizes: Option<Vec<usize>>,

    pub timing_warmup_runs: Option<usize>,
    pub timing_measured_runs: Option<usize>,
    pub timing_min_sample_ms: Option<f64>,
    pub timing_batch: Option<usize>,
    pub timing_tokens: Option<usize>,
    pub bench_selector: Option<String>,
    pub bench_rates: Option<Vec<f64>>,
    pub bench_batch_sizes: Option<Vec<usize>>,
    pub bench_token_counts: Option<Vec<usize>>,
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn apply_train(t: &mut TrainConfig, lr: &Option<f64>, ep: &Option<usize>, pat: &Option<usize>, bs: &Option<usize>, perfect: &Option<bool>) {
    set(&mut t.learning_rate, lr);
    set(&mut t.max_epochs, ep);
    set(&mut t.patience, pat);
    set(&mut t.batch_size, bs);
    set(&mut t.stop_at_perfect, perfect);
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DoeError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| DoeError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults with this file's overrides applied; `seed` replaces the
    /// single-run seed everywhere.
    pub fn experiment(&self, seed: u64) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        set(&mut c.seeds, &self.seeds);
        c.pretrain.seed = seed;
        set(&mut c.pretrain.corpus_size, &self.pretrain_corpus_size);
        set(&mut c.pretrain.epochs, &self.pretrain_epochs);
        set(&mut c.pretrain.batch_size, &self.pretrain_batch_size);
        set(&mut c.pretrain.learning_rate, &self.pretrain_learning_rate);

        let t = &mut c.task;
        t.seed = seed;
        if let Some(k) = &self.task_kind {
            let kind = TaskKind::parse(k)?;
            let classes = crate::bench::synthetic::SyntheticTaskSpec::for_kind(kind, seed).classes;
            t.kind = kind;
            t.classes = classes;
        }
        set(&mut t.classes, &self.task_classes);
        set(&mut t.train, &self.task_train);
        set(&mut t.val, &self.task_val);
        set(&mut t.test, &self.task_test);
        set(&mut t.noise, &self.task_noise);
        set(&mut t.min_words, &self.task_min_words);
        set(&mut t.max_words, &self.task_max_words);
        set(&mut t.keywords, &self.task_keywords);
        set(&mut t.distractors, &self.task_distractors);
        t.validate()?;

        let s = &mut c.search;
        s.seed = seed;
        apply_train(
            &mut s.tune,
            &self.tune_learning_rate,
            &self.tune_max_epochs,
            &self.tune_patience,
            &self.tune_batch_size,
            &self.tune_stop_at_perfect,
        );
        apply_train(
            &mut s.condense,
            &self.condense_learning_rate,
            &self.condense_max_epochs,
            &self.condense_patience,
            &self.condense_batch_size,
            &self.condense_stop_at_perfect,
        );
        s.tune.seed = seed;
        s.condense.seed = seed;
        s.tune.validate()?;
        s.condense.validate()?;
        set(&mut s.margin_points, &self.margin_points);
        if let Some(v) = &self.selector {
            s.selector = ModuleSelector::parse(v)?;
        }
        if let Some(v) = &self.scorer {
            s.scorer = ScorerKind::parse(v)?;
        }
        set(&mut s.sample_size, &self.sample_size);
        set(&mut s.plan.allow_empty, &self.allow_empty);
        set(&mut s.plan.per_layer, &self.per_layer);

        if let Some(v) = &self.comparison_selector {
            c.comparison_selector = ModuleSelector::parse(v)?;
        }
        set(&mut c.comparison_rate, &self.comparison_rate);
        set(&mut c.sweep_margins, &self.sweep_margins);
        set(&mut c.sweep_sample_sizes, &self.sweep_sample_sizes);
        set(&mut c.timing.warmup_runs, &self.timing_warmup_runs);
        set(&mut c.timing.measured_runs, &self.timing_measured_runs);
        set(&mut c.timing.min_sample_ms, &self.timing_min_sample_ms);
        set(&mut c.timing_batch, &self.timing_batch);
        set(&mut c.timing_tokens, &self.timing_tokens);
        c.timing.validate()?;
        if !(0.0..=1.0).contains(&c.comparison_rate) {
            return Err(DoeError::Config("comparison_rate must lie in [0, 1]".into()));
        }
        if c.seeds.is_empty() {
            return Err(DoeError::Config("seeds must not be empty".into()));
        }
        Ok(c)
    }

    pub fn epsilon_points(&self) -> f64 {
        self.epsilon_points.unwrap_or(1.0)
    }

    /// Speedup sweep: 65% FFN pruning by default over a desk-sized grid.
    pub fn sweep(&self, seed: u64) -> Result<SpeedupSweep> {
        let selector = match &self.bench_selector {
            Some(s) => ModuleSelector::parse(s)?,
            None => ModuleSelector::Ffn,
        };
        Ok(SpeedupSweep {
            selector,
            rates: self.bench_rates.clone().unwrap_or_else(|| vec![0.0, 0.3, 0.5, 0.65]),
            batch_sizes: self.bench_batch_sizes.clone().unwrap_or_else(|| vec![8, 16, 32, 64]),
            token_counts: self.bench_token_counts.clone().unwrap_or_else(|| vec![16, 32, 64, 128]),
            seed,
        })
    }
}
