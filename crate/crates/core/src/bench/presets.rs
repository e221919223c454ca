//! Multi-seed experiments. Each preset writes a per-seed CSV, a summary CSV
//! with mean and sample standard deviation, and a long-format plot file
//! (`series,x,metric,seed,value`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::bench::synthetic::{generate_task, standard_vocabulary, SyntheticTaskSpec};
use crate::bench::timing::{forward_f32, median, time_pair, timing_inputs, TimingConfig};
use crate::data::TaskData;
use crate::error::{DoeError, Result};
use crate::localize::{apply_plan, build_plan, ExpertSpec, PlanOptions, PrunePlan};
use crate::model::{ModuleSelector, ParameterSet, PromptState};
use crate::orchestrator::{binary_search_localize, condense, quantify, score_task, Localized, Quantified, SearchConfig};
use crate::pretrain::{pretrained_backbone, PretrainConfig};
use crate::relevance::{AttributionTable, ScorerKind};
use crate::tensor::Tensor;
use crate::trainer::evaluate;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    ScorerComparison,
    ModuleComparison,
    CondensationAblation,
    PriorAlignmentAblation,
    HyperparamSweep,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::ScorerComparison,
        Preset::ModuleComparison,
        Preset::CondensationAblation,
        Preset::PriorAlignmentAblation,
        Preset::HyperparamSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ScorerComparison => "scorer-comparison",
            Preset::ModuleComparison => "module-comparison",
            Preset::CondensationAblation => "condensation-ablation",
            Preset::PriorAlignmentAblation => "prior-alignment-ablation",
            Preset::HyperparamSweep => "hyperparam-sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
            DoeError::Usage(format!("unknown preset `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub pretrain: PretrainConfig,
    /// Task shape; its seed is replaced by the run seed.
    pub task: SyntheticTaskSpec,
    pub search: SearchConfig,
    /// Sites pruned in the fixed-rate comparisons.
    pub comparison_selector: ModuleSelector,
    pub comparison_rate: f64,
    pub timing: TimingConfig,
    pub timing_batch: usize,
    pub timing_tokens: usize,
    pub sweep_margins: Vec<f64>,
    pub sweep_sample_sizes: Vec<usize>,
}

/// The keyword-sentiment task used by the presets: longer texts than the
/// generator default so that pruning visibly hurts, and a validation split
/// large enough to select prompts reliably.
pub fn preset_task(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        min_words: 12,
        max_words: 20,
        train: 400,
        val: 200,
        test: 1000,
        ..SyntheticTaskSpec::keyword_sentiment(seed)
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2],
            pretrain: PretrainConfig::default(),
            task: preset_task(0),
            search: SearchConfig::default(),
            comparison_selector: ModuleSelector::All,
            comparison_rate: 0.5,
            timing: TimingConfig::default(),
            timing_batch: 64,
            timing_tokens: 64,
            sweep_margins: vec![0.5, 1.0, 2.0],
            sweep_sample_sizes: vec![5, 20],
        }
    }
}

/// Backbone, task and quantification for one seed; shared by all presets.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub params: ParameterSet<f64>,
    pub task: TaskData,
    pub search: SearchConfig,
    pub quantified: Quantified,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let vocab = standard_vocabulary();
    let (params, _) = pretrained_backbone(&vocab, &PretrainConfig { seed, ..cfg.pretrain.clone() })?;
    let task = generate_task(&SyntheticTaskSpec { seed, ..cfg.task.clone() }, "keyword-sentiment", &vocab)?;
    let mut search = cfg.search.clone();
    search.seed = seed;
    search.tune.seed = seed;
    search.condense.seed = seed;
    let quantified = quantify(&params, &task, &search)?;
    info!("seed {seed}: baseline validation accuracy {:.4}", quantified.baseline);
    Ok(SeedRun {
        seed,
        params,
        task,
        search,
        quantified,
    })
}

impl SeedRun {
    pub fn test_accuracy(&self, params: &ParameterSet<f64>, prompt: &Tensor<f64>) -> Result<f64> {
        evaluate(&params.weights()?, prompt, &self.task.test, &self.task.verbalizer)
    }

    /// Relevance table from `kind`, computed with the given prompt.
    pub fn table(&self, kind: ScorerKind, prompt: &Tensor<f64>) -> Result<AttributionTable> {
        if kind == self.search.scorer && prompt == &self.quantified.prompt.matrix {
            return Ok(self.quantified.table.clone());
        }
        let search = SearchConfig {
            scorer: kind,
            ..self.search.clone()
        };
        score_task(&self.params.weights()?, prompt, &self.task, &search)
    }

    /// Prunes at a fixed rate from `table` and condenses the aligned prompt.
    /// Sites and heads may be emptied so every scorer hits the same rate.
    pub fn fixed_rate_arm(&self, table: &AttributionTable, selector: ModuleSelector, rate: f64) -> Result<ArmResult> {
        let opts = PlanOptions {
            allow_empty: true,
            ..self.search.plan
        };
        let plan = build_plan(table, self.params.config(), 1.0 - rate, selector, opts)?;
        self.plan_arm(&plan)
    }

    pub fn plan_arm(&self, plan: &PrunePlan) -> Result<ArmResult> {
        let pruned = apply_plan(&self.params, plan)?;
        let w = pruned.weights()?;
        let tv = &self.task.verbalizer;
        let before = evaluate(&w, &self.quantified.prompt.matrix, &self.task.test, tv)?;
        let (prompt, log) = condense(&pruned, &self.quantified.prompt, &self.task, &self.search.condense)?;
        let after = evaluate(&w, &prompt.matrix, &self.task.test, tv)?;
        Ok(ArmResult {
            plan_hash: plan.hash(),
            pruning_rate: plan.pruning_rate(self.params.config()),
            accuracy_uncondensed: before,
            accuracy: after,
            val_accuracy: log.best_val_accuracy,
            epochs: log.records.len() - 1,
            best_epoch: log.best_epoch,
        })
    }

    pub fn localize(&self, search: &SearchConfig) -> Result<Localized> {
        binary_search_localize(&self.params, &self.quantified, &self.task, search)
    }

    pub fn expert_test_accuracy(&self, spec: &ExpertSpec) -> Result<f64> {
        let pruned = apply_plan(&self.params, &spec.plan)?;
        evaluate(&pruned.weights()?, &spec.prompt, &self.task.test, &self.task.verbalizer)
    }
}

/// Outcome of pruning with one plan and condensing.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub plan_hash: String,
    pub pruning_rate: f64,
    /// Test accuracy with the full model's prompt, before condensation.
    pub accuracy_uncondensed: f64,
    /// Test accuracy after condensation.
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub epochs: usize,
    pub best_epoch: usize,
}

pub fn scorer_comparison(run: &SeedRun, cfg: &ExperimentConfig) -> Result<Vec<(ScorerKind, ArmResult)>> {
    ScorerKind::ALL
        .into_iter()
        .map(|kind| {
            let table = run.table(kind, &run.quantified.prompt.matrix)?;
            let arm = run.fixed_rate_arm(&table, cfg.comparison_selector, cfg.comparison_rate)?;
            info!("seed {} {}: accuracy {:.4}", run.seed, kind.name(), arm.accuracy);
            Ok((kind, arm))
        })
        .collect()
}

/// Standard pipeline against attributions taken with the untrained prompt.
pub fn prior_alignment(run: &SeedRun, cfg: &ExperimentConfig) -> Result<(ArmResult, ArmResult)> {
    let aligned = run.table(ScorerKind::Attribution, &run.quantified.prompt.matrix)?;
    let init = PromptState::init_from_vocab(&run.params, &run.task.name, run.search.seed)?;
    let unaligned = run.table(ScorerKind::Attribution, &init.matrix)?;
    let a = run.fixed_rate_arm(&aligned, cfg.comparison_selector, cfg.comparison_rate)?;
    let b = run.fixed_rate_arm(&unaligned, cfg.comparison_selector, cfg.comparison_rate)?;
    Ok((a, b))
}

/// Series name, seed count and (mean, std) per metric.
pub type SeriesSummary = (String, usize, Vec<(f64, f64)>);

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub plan_hash_with: String,
    pub plan_hash_without: String,
    pub pruning_rate: f64,
    pub accuracy_with: f64,
    pub accuracy_without: f64,
}

impl AblationResult {
    pub fn gap_points(&self) -> f64 {
        (self.accuracy_with - self.accuracy_without) * 100.0
    }
}

/// Compares the localized expert with and without its condensed prompt.
/// The plan of the second arm is rebuilt from the relevance table so the
/// hash comparison is a real check.
pub fn condensation_ablation(run: &SeedRun, localized: &Localized) -> Result<AblationResult> {
    let spec = &localized.spec;
    let rebuilt = build_plan(
        &run.quantified.table,
        run.params.config(),
        spec.plan.keep_ratio,
        spec.plan.selector,
        run.search.plan,
    )?;
    let pruned = apply_plan(&run.params, &rebuilt)?;
    let without = evaluate(
        &pruned.weights()?,
        &run.quantified.prompt.matrix,
        &run.task.test,
        &run.task.verbalizer,
    )?;
    Ok(AblationResult {
        plan_hash_with: spec.plan.hash(),
        plan_hash_without: rebuilt.hash(),
        pruning_rate: spec.pruning_rate(run.params.config()),
        accuracy_with: run.expert_test_accuracy(spec)?,
        accuracy_without: without,
    })
}

/// Median 32-bit forward time of the full model over the expert's.
pub fn expert_speedup(run: &SeedRun, spec: &ExpertSpec, cfg: &ExperimentConfig) -> Result<f64> {
    let full = run.params.cast::<f32>();
    let pruned = apply_plan(&full, &spec.plan)?;
    let fw = full.weights()?;
    let pw = pruned.weights()?;
    let prompt = spec.prompt.cast::<f32>();
    let full_prompt = run.quantified.prompt.matrix.cast::<f32>();
    let rows = timing_inputs(full.config().vocab_size, cfg.timing_batch, cfg.timing_tokens, run.seed)?;
    let batch: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
    let (a, b, _, _) = time_pair(
        &cfg.timing,
        || forward_f32(&fw, &full_prompt, &batch),
        || forward_f32(&pw, &prompt, &batch),
    )?;
    Ok(median(&a) / median(&b))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rows keyed by series name; each row carries a seed and named metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    /// Column names beyond `series` and `seed`.
    pub metrics: Vec<String>,
    /// Identity columns copied verbatim (e.g. plan hash).
    pub labels: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Name of the metric used as the x coordinate in the plot file, if any.
    pub x_metric: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub series: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl Report {
    pub fn new(metrics: &[&str], labels: &[&str]) -> Self {
        Report {
            metrics: metrics.iter().map(|s| s.to_string()).collect(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            x_metric: None,
        }
    }

    pub fn push(&mut self, series: impl Into<String>, seed: u64, labels: Vec<String>, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.metrics.len());
        debug_assert_eq!(labels.len(), self.labels.len());
        self.rows.push(ReportRow {
            series: series.into(),
            seed,
            labels,
            values,
        });
    }

    fn series_order(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.series) {
                seen.push(r.series.clone());
            }
        }
        seen
    }

    pub fn write_rows(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["series".to_string(), "seed".to_string()];
        header.extend(self.labels.iter().cloned());
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.series.clone(), r.seed.to_string()];
            rec.extend(r.labels.iter().cloned());
            rec.extend(r.values.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean and standard deviation of every metric per series.
    pub fn summary(&self) -> Vec<SeriesSummary> {
        let mut by: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            by.entry(r.series.clone()).or_default().push(r);
        }
        self.series_order()
            .into_iter()
            .map(|s| {
                let rows = &by[&s];
                let stats = (0..self.metrics.len())
                    .map(|i| mean_std(&rows.iter().map(|r| r.values[i]).collect::<Vec<_>>()))
                    .collect();
                (s, rows.len(), stats)
            })
            .collect()
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["series".to_string(), "seeds".to_string()];
        for m in &self.metrics {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header)?;
        for (s, n, stats) in self.summary() {
            let mut rec = vec![s, n.to_string()];
            for (m, sd) in stats {
                rec.push(format!("{m:.6}"));
                rec.push(format!("{sd:.6}"));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format: one line per (row, metric). `x` is the row's value of
    /// `x_metric` when set, otherwise the series name.
    pub fn write_plot(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["series", "x", "metric", "seed", "value"])?;
        let xi = self.x_metric.as_ref().and_then(|m| self.metrics.iter().position(|n| n == m));
        for r in &self.rows {
            let x = xi.map_or(r.series.clone(), |i| format!("{:.6}", r.values[i]));
            for (i, m) in self.metrics.iter().enumerate() {
                if Some(i) == xi {
                    continue;
                }
                w.write_record([r.series.clone(), x.clone(), m.clone(), r.seed.to_string(), format!("{:.6}", r.values[i])])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<name>.csv`, `<name>_summary.csv` and `<name>_plot.csv`.
    pub fn write_all(&self, dir: &Path, name: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let paths = [
            dir.join(format!("{name}.csv")),
            dir.join(format!("{name}_summary.csv")),
            dir.join(format!("{name}_plot.csv")),
        ];
        self.write_rows(&paths[0])?;
        self.write_summary(&paths[1])?;
        self.write_plot(&paths[2])?;
        Ok(paths.to_vec())
    }
}

fn arm_metrics() -> [&'static str; 5] {
    ["pruning_rate", "accuracy", "accuracy_uncondensed", "epochs", "best_epoch"]
}

fn arm_values(a: &ArmResult) -> Vec<f64> {
    vec![
        a.pruning_rate,
        a.accuracy,
        a.accuracy_uncondensed,
        a.epochs as f64,
        a.best_epoch as f64,
    ]
}

/// Runs `preset` over every configured seed and builds its report.
pub fn run_preset(preset: Preset, cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = match preset {
        Preset::ScorerComparison | Preset::PriorAlignmentAblation => Report::new(&arm_metrics(), &["plan_hash"]),
        Preset::ModuleComparison => {
            let mut r = Report::new(&["pruning_rate", "accuracy", "speedup"], &["plan_hash"]);
            r.x_metric = Some("speedup".into());
            r
        }
        Preset::CondensationAblation => Report::new(&["pruning_rate", "accuracy", "gap_points"], &["plan_hash"]),
        Preset::HyperparamSweep => Report::new(
            &["margin_points", "sample_size", "pruning_rate", "val_accuracy", "accuracy"],
            &["plan_hash"],
        ),
    };
    for &seed in &cfg.seeds {
        let run = prepare_seed(cfg, seed)?;
        match preset {
            Preset::ScorerComparison => {
                for (kind, arm) in scorer_comparison(&run, cfg)? {
                    report.push(kind.name(), seed, vec![arm.plan_hash.clone()], arm_values(&arm));
                }
            }
            Preset::PriorAlignmentAblation => {
                let (aligned, unaligned) = prior_alignment(&run, cfg)?;
                report.push("aligned-prompt", seed, vec![aligned.plan_hash.clone()], arm_values(&aligned));
                report.push("untuned-prompt", seed, vec![unaligned.plan_hash.clone()], arm_values(&unaligned));
            }
            Preset::ModuleComparison => {
                for sel in [ModuleSelector::All, ModuleSelector::Attn, ModuleSelector::Dense, ModuleSelector::Ffn] {
                    let search = SearchConfig {
                        selector: sel,
                        ..run.search.clone()
                    };
                    let loc = run.localize(&search)?;
                    let acc = run.expert_test_accuracy(&loc.spec)?;
                    let speedup = expert_speedup(&run, &loc.spec, cfg)?;
                    report.push(
                        sel.name(),
                        seed,
                        vec![loc.spec.plan.hash()],
                        vec![loc.spec.pruning_rate(run.params.config()), acc, speedup],
                    );
                }
            }
            Preset::CondensationAblation => {
                let loc = run.localize(&run.search)?;
                let ab = condensation_ablation(&run, &loc)?;
                if ab.plan_hash_with != ab.plan_hash_without {
                    return Err(DoeError::Integrity {
                        expected: ab.plan_hash_with,
                        found: ab.plan_hash_without,
                    });
                }
                let gap = ab.gap_points();
                report.push(
                    "with-condensation",
                    seed,
                    vec![ab.plan_hash_with.clone()],
                    vec![ab.pruning_rate, ab.accuracy_with, gap],
                );
                report.push(
                    "without-condensation",
                    seed,
                    vec![ab.plan_hash_without.clone()],
                    vec![ab.pruning_rate, ab.accuracy_without, gap],
                );
            }
            Preset::HyperparamSweep => {
                let mut points: Vec<(f64, usize)> = cfg
                    .sweep_margins
                    .iter()
                    .map(|&m| (m, run.search.sample_size))
                    .collect();
                for &n in &cfg.sweep_sample_sizes {
                    if n != run.search.sample_size {
                        points.push((run.search.margin_points, n));
                    }
                }
                for (margin, n) in points {
                    let search = SearchConfig {
                        margin_points: margin,
                        sample_size: n,
                        ..run.search.clone()
                    };
                    let loc = if n == run.search.sample_size {
                        run.localize(&search)?
                    } else {
                        let q = Quantified {
                            table: score_task(&run.params.weights()?, &run.quantified.prompt.matrix, &run.task, &search)?,
                            ..run.quantified.clone()
                        };
                        binary_search_localize(&run.params, &q, &run.task, &search)?
                    };
                    let acc = run.expert_test_accuracy(&loc.spec)?;
                    report.push(
                        format!("margin={margin} n={n}"),
                        seed,
                        vec![loc.spec.plan.hash()],
                        vec![
                            margin,
                            n as f64,
                            loc.spec.pruning_rate(run.params.config()),
                            loc.spec.expert_accuracy,
                            acc,
                        ],
                    );
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
        assert!(matches!(Preset::parse("nope"), Err(DoeError::Usage(_))));
    }

    #[test]
    fn sample_standard_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Report::new(&["accuracy", "speedup"], &["plan_hash"]);
        r.x_metric = Some("speedup".into());
        r.push("ffn", 0, vec!["aa".into()], vec![0.9, 1.5]);
        r.push("ffn", 1, vec!["bb".into()], vec![0.8, 1.7]);
        r.push("attn", 0, vec!["cc".into()], vec![0.7, 1.1]);
        let paths = r.write_all(dir.path(), "demo").unwrap();
        let rows = fs::read_to_string(&paths[0]).unwrap();
        assert!(rows.starts_with("series,seed,plan_hash,accuracy,speedup\n"));
        let summary = fs::read_to_string(&paths[1]).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines[0], "series,seeds,accuracy_mean,accuracy_std,speedup_mean,speedup_std");
        assert!(lines[1].starts_with("ffn,2,0.850000,0.070711,1.600000"));
        let plot = fs::read_to_string(&paths[2]).unwrap();
        assert_eq!(plot.lines().count(), 4);
        assert!(plot.contains("ffn,1.500000,accuracy,0,0.900000"));
    }
}
