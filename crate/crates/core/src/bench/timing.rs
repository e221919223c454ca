//! Wall-clock timing of the 32-bit inference path.
//!
//! Every figure is a median over repeated runs after warmups, measured with
//! the monotonic clock on the calling thread. Full and pruned models are
//! timed in alternation so slow drift in machine load affects both alike.

use std::borrow::Cow;
use std::io::Write;
use std::time::{Duration, Instant};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DoeError, Result};
use crate::localize::{apply_plan, build_plan, PlanOptions};
use crate::model::{forward_batch, ForwardOptions, ModelWeights, ModuleSelector, ParameterSet, Vocabulary};
use crate::orchestrator::{GRID_POINTS, GRID_STEP};
use crate::relevance::AttributionTable;
use crate::tensor::{Eager, Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub warmup_runs: usize,
    pub measured_runs: usize,
    /// A single sample shorter than this is considered below timer
    /// resolution; the call is then repeated inside each sample.
    pub min_sample_ms: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            warmup_runs: 5,
            measured_runs: 20,
            min_sample_ms: 1.0,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_runs < 5 || self.measured_runs < 20 {
            return Err(DoeError::Config(
                "timing needs at least 5 warmup and 20 measured runs".into(),
            ));
        }
        if self.min_sample_ms.is_nan() || self.min_sample_ms < 0.0 {
            return Err(DoeError::Config("min_sample_ms must be non-negative".into()));
        }
        Ok(())
    }
}

/// Summary of one timed phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub phase: String,
    pub batch_size: usize,
    pub tokens: usize,
    pub pruning_rate: f64,
    pub warmup_runs: usize,
    pub measured_runs: usize,
    /// Calls per sample (above 1 only when a call is too short to time).
    pub repeats: usize,
    pub median_ms: f64,
    /// Median absolute deviation from the median.
    pub dispersion_ms: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_abs_deviation(xs: &[f64]) -> f64 {
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

fn time_once<T>(f: &mut impl FnMut() -> Result<T>, repeats: usize) -> Result<Duration> {
    let start = Instant::now();
    for _ in 0..repeats {
        std::hint::black_box(f()?);
    }
    Ok(start.elapsed())
}

fn repeats_for(first: Duration, cfg: &TimingConfig, what: &str) -> usize {
    let ms = first.as_secs_f64() * 1e3;
    if ms >= cfg.min_sample_ms {
        return 1;
    }
    let reps = (cfg.min_sample_ms / ms.max(1e-6)).ceil() as usize;
    warn!("{what}: one call takes {ms:.4} ms, below timer resolution; repeating {reps}x per sample");
    reps
}

/// Times two workloads in alternation and returns (samples of `a`, samples
/// of `b`, repeats of `a`, repeats of `b`), in milliseconds per call.
pub fn time_pair<A, B>(
    cfg: &TimingConfig,
    mut a: impl FnMut() -> Result<A>,
    mut b: impl FnMut() -> Result<B>,
) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    cfg.validate()?;
    let ra = repeats_for(time_once(&mut a, 1)?, cfg, "first workload");
    let rb = repeats_for(time_once(&mut b, 1)?, cfg, "second workload");
    for _ in 0..cfg.warmup_runs {
        time_once(&mut a, ra)?;
        time_once(&mut b, rb)?;
    }
    let mut sa = Vec::with_capacity(cfg.measured_runs);
    let mut sb = Vec::with_capacity(cfg.measured_runs);
    for _ in 0..cfg.measured_runs {
        sa.push(time_once(&mut a, ra)?.as_secs_f64() * 1e3 / ra as f64);
        sb.push(time_once(&mut b, rb)?.as_secs_f64() * 1e3 / rb as f64);
    }
    Ok((sa, sb, ra, rb))
}

/// Random equal-length inputs, one mask token per row.
pub fn timing_inputs(vocab_size: usize, batch: usize, tokens: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if tokens == 0 || batch == 0 {
        return Err(DoeError::Config("batch size and token count must be positive".into()));
    }
    if vocab_size <= Vocabulary::RESERVED {
        return Err(DoeError::Config("vocabulary has no ordinary tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..batch)
        .map(|_| {
            let mut row: Vec<usize> = (0..tokens).map(|_| rng.random_range(Vocabulary::RESERVED..vocab_size)).collect();
            row[rng.random_range(0..tokens)] = Vocabulary::MASK_ID;
            row
        })
        .collect())
}

/// One 32-bit batched forward pass; returns a value derived from the
/// logits so the work cannot be optimized away.
pub fn forward_f32(w: &ModelWeights<'_, f32>, prompt: &Tensor<f32>, batch: &[&[usize]]) -> Result<f32> {
    let mut g: Eager<'_, f32> = Eager::new();
    let (r, c) = prompt.as_matrix_dims();
    let p = if prompt.numel() > 0 {
        Some(g.constant(Cow::Borrowed(prompt.data()), r, c)?)
    } else {
        None
    };
    let out = forward_batch(&mut g, w, p, batch, &ForwardOptions::default())?;
    Ok(g.value(out.logits).first().copied().unwrap_or(0.0))
}

/// Index of `rate` on the pruning grid, if it lies on it.
pub fn grid_index(rate: f64) -> Option<usize> {
    let i = (rate / GRID_STEP).round();
    ((rate - i * GRID_STEP).abs() <= 1e-9 && i >= 0.0 && (i as usize) < GRID_POINTS).then_some(i as usize)
}

/// What to sweep in [`measure_speedup`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupSweep {
    pub selector: ModuleSelector,
    pub rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub token_counts: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupCell {
    pub selector: ModuleSelector,
    pub full: TimingRecord,
    pub pruned: TimingRecord,
    /// `median(full) / median(pruned)`
    pub speedup: f64,
}

/// Times the full model against plans at each pruning rate, for every
/// batch size and token count. Plans come from `table`; the prompt is a
/// fixed random matrix of the configured length.
pub fn measure_speedup(
    params: &ParameterSet<f64>,
    table: &AttributionTable,
    sweep: &SpeedupSweep,
    cfg: &TimingConfig,
) -> Result<Vec<SpeedupCell>> {
    cfg.validate()?;
    for &r in &sweep.rates {
        if grid_index(r).is_none() {
            return Err(DoeError::Config(format!("pruning rate {r} is not on the grid")));
        }
    }
    let config = params.config().clone();
    let full32 = params.cast::<f32>();
    let full_w = full32.weights()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sweep.seed);
    let n = config.prompt_len * config.d_model;
    let prompt = Tensor::matrix(
        config.prompt_len,
        config.d_model,
        (0..n).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
    )?;
    let opts = PlanOptions {
        allow_empty: true,
        per_layer: false,
    };
    let mut pruned = Vec::with_capacity(sweep.rates.len());
    for &rate in &sweep.rates {
        let plan = build_plan(table, &config, 1.0 - rate, sweep.selector, opts)?;
        pruned.push((rate, apply_plan(&full32, &plan)?));
    }
    let mut cells = Vec::new();
    for &bsz in &sweep.batch_sizes {
        for &tok in &sweep.token_counts {
            let rows = timing_inputs(config.vocab_size, bsz, tok, rng.random())?;
            let batch: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
            for (rate, p) in &pruned {
                let pw = p.weights()?;
                let (sf, sp, rf, rp) = time_pair(
                    cfg,
                    || forward_f32(&full_w, &prompt, &batch),
                    || forward_f32(&pw, &prompt, &batch),
                )?;
                let record = |phase: &str, s: &[f64], repeats| TimingRecord {
                    phase: phase.to_string(),
                    batch_size: bsz,
                    tokens: tok,
                    pruning_rate: *rate,
                    warmup_runs: cfg.warmup_runs,
                    measured_runs: cfg.measured_runs,
                    repeats,
                    median_ms: median(s),
                    dispersion_ms: median_abs_deviation(s),
                };
                let full = record("full", &sf, rf);
                let pr = record("pruned", &sp, rp);
                cells.push(SpeedupCell {
                    selector: sweep.selector,
                    speedup: full.median_ms / pr.median_ms,
                    full,
                    pruned: pr,
                });
            }
        }
    }
    Ok(cells)
}

pub fn write_speedup_csv<W: Write>(cells: &[SpeedupCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "selector",
        "pruning_rate",
        "batch_size",
        "tokens",
        "warmup_runs",
        "measured_runs",
        "full_median_ms",
        "full_mad_ms",
        "pruned_median_ms",
        "pruned_mad_ms",
        "speedup",
    ])?;
    for c in cells {
        w.write_record([
            c.selector.name().to_string(),
            format!("{:.2}", c.full.pruning_rate),
            c.full.batch_size.to_string(),
            c.full.tokens.to_string(),
            c.full.warmup_runs.to_string(),
            c.full.measured_runs.to_string(),
            format!("{:.4}", c.full.median_ms),
            format!("{:.4}", c.full.dispersion_ms),
            format!("{:.4}", c.pruned.median_ms),
            format!("{:.4}", c.pruned.dispersion_ms),
            format!("{:.4}", c.speedup),
        ])?;
    }
    w.flush()?;
    Ok(())
}
