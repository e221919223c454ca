//! The decomposition pipeline: quantify relevance on the full model, search
//! the largest pruning rate that keeps validation accuracy within a margin,
//! verify the resulting expert, and serve requests by unplugging the expert
//! for one inference and replugging the full model afterwards.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, TaskData};
use crate::error::{DoeError, Result};
use crate::localize::{apply_plan, build_plan, restore, ExpertSpec, PlanOptions, PrunePlan, PrunedParameterSet};
use crate::model::{
    decode_checkpoint, encode_checkpoint, forward, predict_label, render_template, ForwardOptions, ModelWeights,
    ModuleSelector, ParameterSet, PromptState, TaskTemplate, TemplateKind, VerbalizerMap, Vocabulary,
};
use crate::relevance::{score_sites, AttributionTable, ScorerKind};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, prompt_tune, TrainConfig, TrainLog};

/// Number of points on the pruning-rate grid (0, 0.05, ..., 1.0).
pub const GRID_POINTS: usize = 21;
pub const GRID_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Largest tolerated validation-accuracy drop, in percentage points.
    pub margin_points: f64,
    pub selector: ModuleSelector,
    pub plan: PlanOptions,
    pub scorer: ScorerKind,
    /// Training instances sampled for relevance scoring.
    pub sample_size: usize,
    /// Prompt tuning on the full model.
    pub tune: TrainConfig,
    /// Prompt re-tuning after pruning.
    pub condense: TrainConfig,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            margin_points: 1.0,
            selector: ModuleSelector::Ffn,
            plan: PlanOptions::default(),
            scorer: ScorerKind::Attribution,
            sample_size: 20,
            tune: TrainConfig::default(),
            condense: TrainConfig::default(),
            seed: 0,
        }
    }
}

/// Output of the quantification step.
#[derive(Debug, Clone)]
pub struct Quantified {
    /// Prompt aligned on the full model.
    pub prompt: PromptState,
    pub log: TrainLog,
    /// Full-model validation accuracy with the aligned prompt.
    pub baseline: f64,
    pub table: AttributionTable,
}

/// Draws `n` training instances without replacement, clamped to the split.
pub fn sample_instances(train: &[Example], n: usize, seed: u64) -> Vec<Example> {
    let n = if n > train.len() {
        warn!("requested {n} scoring instances but only {} exist; using all", train.len());
        train.len()
    } else {
        n
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, train.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| train[i].clone()).collect()
}

/// Scores relevance for `task` on the full model with the given prompt.
pub fn score_task(
    weights: &ModelWeights<'_, f64>,
    prompt: &Tensor<f64>,
    task: &TaskData,
    cfg: &SearchConfig,
) -> Result<AttributionTable> {
    let sample = sample_instances(&task.train, cfg.sample_size, cfg.seed);
    let sites = ModuleSelector::All.sites(weights.config);
    score_sites(cfg.scorer, weights, Some(prompt), &sample, &sites, &task.verbalizer, cfg.seed)
}

/// Aligns a prompt on the full model, measures the baseline and scores
/// every prune site.
pub fn quantify(params: &ParameterSet<f64>, task: &TaskData, cfg: &SearchConfig) -> Result<Quantified> {
    let weights = params.weights()?;
    let init = PromptState::init_from_vocab(params, &task.name, cfg.seed)?;
    let (prompt, log) = prompt_tune(&weights, &init, &task.train, &task.val, &task.verbalizer, &cfg.tune)?;
    let baseline = evaluate(&weights, &prompt.matrix, &task.val, &task.verbalizer)?;
    let table = score_task(&weights, &prompt.matrix, task, cfg)?;
    info!("quantified `{}`: baseline {baseline:.4}", task.name);
    Ok(Quantified {
        prompt,
        log,
        baseline,
        table,
    })
}

/// Record of one grid probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe<T> {
    pub index: usize,
    pub accepted: bool,
    pub value: T,
}

/// Binary search over grid indices `0..points`: probe the midpoint, move
/// right on acceptance, left on rejection. Returns the rightmost accepted
/// index seen and the probe trace.
pub fn binary_search_grid<T, P>(points: usize, mut probe: P) -> Result<(Option<usize>, Vec<Probe<T>>)>
where
    P: FnMut(usize) -> Result<(bool, T)>,
{
    let mut trace = Vec::new();
    let mut best: Option<usize> = None;
    if points == 0 {
        return Ok((None, trace));
    }
    let (mut l, mut h) = (0i64, points as i64 - 1);
    while l <= h {
        let m = ((l + h) / 2) as usize;
        let (accepted, value) = probe(m)?;
        trace.push(Probe {
            index: m,
            accepted,
            value,
        });
        if accepted {
            best = Some(best.map_or(m, |b| b.max(m)));
            l = m as i64 + 1;
        } else {
            h = m as i64 - 1;
        }
    }
    Ok((best, trace))
}

/// What happened at one pruning rate during the search.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub pruning_rate: f64,
    /// `None` when no plan could be built at this rate.
    pub accuracy: Option<f64>,
    pub epochs: usize,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct Localized {
    pub spec: ExpertSpec,
    pub trace: Vec<Probe<ProbeOutcome>>,
    /// Prompt re-tunings performed (at most five on the 21-point grid).
    pub condensation_runs: usize,
}

impl Localized {
    pub fn write_trace_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["probe", "pruning_rate", "accuracy", "accepted", "epochs", "note"])?;
        for (i, p) in self.trace.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                format!("{:.2}", p.value.pruning_rate),
                p.value.accuracy.map_or(String::new(), |a| a.to_string()),
                p.accepted.to_string(),
                p.value.epochs.to_string(),
                p.value.note.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Re-tunes a prompt on a pruned model, warm-started from `prompt`.
pub fn condense(
    pruned: &PrunedParameterSet<f64>,
    prompt: &PromptState,
    task: &TaskData,
    cfg: &TrainConfig,
) -> Result<(PromptState, TrainLog)> {
    let w = pruned.weights()?;
    prompt_tune(&w, &prompt.restart(), &task.train, &task.val, &task.verbalizer, cfg)
}

/// Searches the largest grid pruning rate whose condensed expert stays
/// within the margin of the baseline.
pub fn binary_search_localize(
    params: &ParameterSet<f64>,
    q: &Quantified,
    task: &TaskData,
    cfg: &SearchConfig,
) -> Result<Localized> {
    localize_with(params, q, &task.name, cfg, |pruned, prompt| {
        condense(pruned, prompt, task, &cfg.condense)
    })
}

/// [`binary_search_localize`] with the condensation step supplied by the
/// caller. A probe is accepted when the returned log's best validation
/// accuracy is within the margin.
pub fn localize_with<C>(
    params: &ParameterSet<f64>,
    q: &Quantified,
    task_name: &str,
    cfg: &SearchConfig,
    mut condense_fn: C,
) -> Result<Localized>
where
    C: FnMut(&PrunedParameterSet<f64>, &PromptState) -> Result<(PromptState, TrainLog)>,
{
    let config = params.config();
    q.table.validate(config)?;
    let mut accepted_specs: BTreeMap<usize, ExpertSpec> = BTreeMap::new();
    let mut runs = 0;
    let (best, trace) = binary_search_grid(GRID_POINTS, |m| {
        let rate = m as f64 * GRID_STEP;
        let keep = 1.0 - rate;
        let plan = match build_plan(&q.table, config, keep.max(0.0), cfg.selector, cfg.plan) {
            Ok(p) => p,
            Err(DoeError::Plan(msg)) => {
                return Ok((
                    false,
                    ProbeOutcome {
                        pruning_rate: rate,
                        accuracy: None,
                        epochs: 0,
                        note: msg,
                    },
                ))
            }
            Err(e) => return Err(e),
        };
        let pruned = apply_plan(params, &plan)?;
        let (prompt, log) = condense_fn(&pruned, &q.prompt)?;
        runs += 1;
        let acc = log.best_val_accuracy;
        let ok = (q.baseline - acc) * 100.0 <= cfg.margin_points + 1e-9;
        info!("probe rate {rate:.2}: accuracy {acc:.4} ({})", if ok { "accept" } else { "reject" });
        if ok {
            accepted_specs.insert(
                m,
                ExpertSpec {
                    task: task_name.to_string(),
                    plan,
                    prompt: prompt.matrix,
                    original_checksum: params.checksum(),
                    full_accuracy: q.baseline,
                    expert_accuracy: acc,
                },
            );
        }
        Ok((
            ok,
            ProbeOutcome {
                pruning_rate: rate,
                accuracy: Some(acc),
                epochs: log.records.len() - 1,
                note: String::new(),
            },
        ))
    })?;
    let spec = match best.and_then(|b| accepted_specs.remove(&b)) {
        Some(s) => s,
        None => {
            warn!("no pruning rate met the margin for `{task_name}`; returning the unpruned model");
            ExpertSpec {
                task: task_name.to_string(),
                plan: PrunePlan::full(config, cfg.selector),
                prompt: q.prompt.matrix.clone(),
                original_checksum: params.checksum(),
                full_accuracy: q.baseline,
                expert_accuracy: q.baseline,
            }
        }
    };
    Ok(Localized {
        spec,
        trace,
        condensation_runs: runs,
    })
}

/// Quantify followed by the search.
pub fn decompose(params: &ParameterSet<f64>, task: &TaskData, cfg: &SearchConfig) -> Result<(Quantified, Localized)> {
    let q = quantify(params, task, cfg)?;
    let l = binary_search_localize(params, &q, task, cfg)?;
    Ok((q, l))
}

/// True when the expert's accuracy on `examples` is within `epsilon` (a
/// fraction, so 0.01 is one point) of the full model's.
pub fn verify_task_expert(
    params: &ParameterSet<f64>,
    full_prompt: &Tensor<f64>,
    spec: &ExpertSpec,
    examples: &[Example],
    verbalizer: &VerbalizerMap,
    epsilon: f64,
) -> Result<bool> {
    let full = evaluate(&params.weights()?, full_prompt, examples, verbalizer)?;
    let pruned = apply_plan(params, &spec.plan)?;
    let expert = evaluate(&pruned.weights()?, &spec.prompt, examples, verbalizer)?;
    Ok((full - expert).abs() <= epsilon + 1e-12)
}

/// A registered task: its template, verbalizer and expert.
#[derive(Debug, Clone)]
pub struct RegisteredTask {
    pub template: TaskTemplate,
    pub verbalizer: VerbalizerMap,
    pub spec: ExpertSpec,
}

enum Slot {
    Full(ParameterSet<f64>),
    Expert(PrunedParameterSet<f64>),
    Empty,
}

/// Wall-clock time of each serving phase, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub lookup_ms: f64,
    pub unplug_ms: f64,
    pub infer_ms: f64,
    pub replug_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub task: String,
    pub label: usize,
    pub label_word: String,
    pub timings: PhaseTimings,
}

/// One model slot plus the experts that can be swapped into it.
pub struct TaskRegistry {
    checkpoint: Vec<u8>,
    checksum: String,
    vocab: Vocabulary,
    slot: Slot,
    tasks: BTreeMap<String, RegisteredTask>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl TaskRegistry {
    pub fn new(params: ParameterSet<f64>, vocab: Vocabulary) -> Self {
        let checkpoint = encode_checkpoint(&params);
        TaskRegistry {
            checksum: params.checksum(),
            checkpoint,
            vocab,
            slot: Slot::Full(params),
            tasks: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, template: TaskTemplate, verbalizer: VerbalizerMap, spec: ExpertSpec) -> Result<()> {
        if spec.original_checksum != self.checksum {
            return Err(DoeError::Integrity {
                expected: self.checksum.clone(),
                found: spec.original_checksum.clone(),
            });
        }
        self.tasks.insert(
            spec.task.clone(),
            RegisteredTask {
                template,
                verbalizer,
                spec,
            },
        );
        Ok(())
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.keys().cloned().collect()
    }

    pub fn get(&self, task: &str) -> Option<&RegisteredTask> {
        self.tasks.get(task)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Digest of the original checkpoint.
    pub fn original_checksum(&self) -> &str {
        &self.checksum
    }

    /// Current full model; `None` only while an expert is plugged in.
    pub fn full_model(&self) -> Option<&ParameterSet<f64>> {
        match &self.slot {
            Slot::Full(p) => Some(p),
            _ => None,
        }
    }

    /// Renders request fields into the task template. Fields are assigned
    /// to the template's slots in order.
    pub fn encode(&self, task: &RegisteredTask, fields: &[&str]) -> Result<Vec<usize>> {
        let slots = task.template.slots();
        if fields.len() != slots.len() {
            return Err(DoeError::Input(format!(
                "task `{}` expects {} text field(s), got {}",
                task.spec.task,
                slots.len(),
                fields.len()
            )));
        }
        let map: BTreeMap<String, String> = slots.iter().zip(fields).map(|(s, f)| (s.to_string(), f.to_string())).collect();
        Ok(self.vocab.tokenize(&render_template(&task.template, &map)?))
    }

    fn unplug(&mut self, plan: &PrunePlan) -> Result<()> {
        let Slot::Full(full) = std::mem::replace(&mut self.slot, Slot::Empty) else {
            return Err(DoeError::Usage("model slot does not hold the full model".into()));
        };
        match apply_plan(&full, plan) {
            Ok(expert) => {
                self.slot = Slot::Expert(expert);
                Ok(())
            }
            Err(e) => {
                self.slot = Slot::Full(full);
                Err(e)
            }
        }
    }

    fn replug(&mut self) -> Result<()> {
        let Slot::Expert(expert) = std::mem::replace(&mut self.slot, Slot::Empty) else {
            return Err(DoeError::Usage("no expert is plugged in".into()));
        };
        let full = restore(&self.checkpoint, &expert)?;
        self.slot = Slot::Full(full);
        Ok(())
    }

    /// Looks up the task, swaps its expert in, predicts, and restores the
    /// full model.
    pub fn serve_request(&mut self, task: &str, fields: &[&str]) -> Result<Prediction> {
        let t0 = Instant::now();
        let entry = self.tasks.get(task).cloned().ok_or_else(|| DoeError::UnknownTask {
            task: task.to_string(),
            known: self.task_names(),
        })?;
        let tokens = self.encode(&entry, fields)?;
        let lookup_ms = ms(t0);

        let t1 = Instant::now();
        self.unplug(&entry.spec.plan)?;
        let unplug_ms = ms(t1);

        let t2 = Instant::now();
        let result = match &self.slot {
            Slot::Expert(e) => e
                .weights()
                .and_then(|w| forward(&w, Some(&entry.spec.prompt), &tokens, &ForwardOptions::default())),
            _ => unreachable!("unplug leaves an expert in the slot"),
        };
        let infer_ms = ms(t2);

        let t3 = Instant::now();
        self.replug()?;
        let replug_ms = ms(t3);

        let logits = result?;
        let label = predict_label(&logits, &entry.verbalizer);
        Ok(Prediction {
            task: task.to_string(),
            label,
            label_word: entry.template.label_words().get(label).unwrap_or(&"").to_string(),
            timings: PhaseTimings {
                lookup_ms,
                unplug_ms,
                infer_ms,
                replug_ms,
            },
        })
    }

    /// Writes the checkpoint, vocabulary, one spec file per task and a
    /// manifest into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("model.bin"), &self.checkpoint)?;
        std::fs::write(dir.join("vocab.txt"), self.vocab.words().join("\n") + "\n")?;
        let mut manifest = String::from("doe-registry 1\n");
        let _ = writeln!(manifest, "checksum {}", self.checksum);
        for (name, t) in &self.tasks {
            let file = format!("{}.expert", sanitize(name));
            t.spec.save(dir.join(&file))?;
            let tokens: Vec<String> = t.verbalizer.tokens().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(manifest, "task {name} {} {file} {}", t.template.kind.name(), tokens.join(","));
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let params = decode_checkpoint(&std::fs::read(dir.join("model.bin"))?)?;
        let vocab = load_vocab(dir.join("vocab.txt"))?;
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut lines = manifest.lines();
        if lines.next() != Some("doe-registry 1") {
            return Err(DoeError::format("registry manifest has a bad header"));
        }
        let mut reg = TaskRegistry::new(params, vocab);
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["checksum", c] => {
                    if *c != reg.checksum {
                        return Err(DoeError::Integrity {
                            expected: c.to_string(),
                            found: reg.checksum.clone(),
                        });
                    }
                }
                ["task", _name, kind, file, tokens] => {
                    let template = TaskTemplate::new(TemplateKind::parse(kind)?);
                    let tokens = tokens
                        .split(',')
                        .map(|t| t.parse().map_err(|_| DoeError::format(format!("bad verbalizer token `{t}`"))))
                        .collect::<Result<Vec<usize>>>()?;
                    let verbalizer = VerbalizerMap::new(tokens, reg.vocab.len())?;
                    let spec = ExpertSpec::load(dir.join(file))?;
                    reg.register(template, verbalizer, spec)?;
                }
                [] => {}
                _ => return Err(DoeError::format(format!("bad manifest line `{line}`"))),
            }
        }
        Ok(reg)
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)?;
    Vocabulary::from_words(text.lines().filter(|l| !l.is_empty()).map(String::from).collect())
}

/// A request line: task name, then one or more tab-separated text fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub task: String,
    pub fields: Vec<String>,
}

pub fn parse_requests(text: &str) -> Result<Vec<Request>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut parts = l.split('\t');
            let task = parts.next().unwrap_or_default().trim().to_string();
            let fields: Vec<String> = parts.map(String::from).collect();
            if task.is_empty() || fields.is_empty() {
                return Err(DoeError::Input(format!("request line {} needs `task<TAB>text`", i + 1)));
            }
            Ok(Request { task, fields })
        })
        .collect()
}

/// Serves every request in order and writes one CSV row per request.
pub fn serve_all<W: std::io::Write>(reg: &mut TaskRegistry, requests: &[Request], out: W) -> Result<Vec<Prediction>> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "label", "label_word", "lookup_ms", "unplug_ms", "infer_ms", "replug_ms"])?;
    let mut preds = Vec::with_capacity(requests.len());
    for r in requests {
        let fields: Vec<&str> = r.fields.iter().map(String::as_str).collect();
        let p = reg.serve_request(&r.task, &fields)?;
        w.write_record([
            p.task.clone(),
            p.label.to_string(),
            p.label_word.clone(),
            format!("{:.4}", p.timings.lookup_ms),
            format!("{:.4}", p.timings.unplug_ms),
            format!("{:.4}", p.timings.infer_ms),
            format!("{:.4}", p.timings.replug_ms),
        ])?;
        preds.push(p);
    }
    w.flush()?;
    Ok(preds)
}

/// Writes a prompt matrix as `rows cols` followed by one line per row.
pub fn prompt_to_text(t: &Tensor<f64>) -> String {
    let (r, c) = t.as_matrix_dims();
    let mut s = format!("{r} {c}\n");
    for row in t.data().chunks(c.max(1)).take(r) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn prompt_from_text(text: &str) -> Result<Tensor<f64>> {
    let mut lines = text.lines();
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .filter_map(|v| v.parse().ok())
        .collect();
    let [r, c] = dims[..] else {
        return Err(DoeError::format("prompt file must start with `rows cols`"));
    };
    let data = lines
        .flat_map(str::split_whitespace)
        .map(|v| v.parse::<f64>().map_err(|_| DoeError::format(format!("bad prompt value `{v}`"))))
        .collect::<Result<Vec<_>>>()?;
    Tensor::matrix(r, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(max_ok: Option<usize>) -> impl FnMut(usize) -> Result<(bool, ())> {
        move |m| Ok((max_ok.is_some_and(|k| m <= k), ()))
    }

    #[test]
    fn hand_traced_probe_sequence() {
        let (best, trace) = binary_search_grid(GRID_POINTS, oracle(Some(11))).unwrap();
        let seq: Vec<(usize, bool)> = trace.iter().map(|p| (p.index, p.accepted)).collect();
        assert_eq!(seq, vec![(10, true), (15, false), (12, false), (11, true)]);
        assert_eq!(best, Some(11));
    }

    #[test]
    fn boundary_oracles() {
        let (best, trace) = binary_search_grid(GRID_POINTS, oracle(Some(20))).unwrap();
        assert_eq!(best, Some(20));
        assert!(trace.len() <= 5);
        let (best, trace) = binary_search_grid(GRID_POINTS, oracle(None)).unwrap();
        assert_eq!(best, None);
        assert!(trace.len() <= 5);
    }

    #[test]
    fn non_monotone_keeps_best_accepted() {
        // accepts 10 and 12 but rejects 15 and 13; 11 is rejected too
        let (best, _) = binary_search_grid(GRID_POINTS, |m| Ok(([10, 12].contains(&m), ()))).unwrap();
        assert_eq!(best, Some(12));
    }

    #[test]
    fn requests_parse_tabs() {
        let r = parse_requests("sst\tgood film\n\nmrpc\ta b\tc d\n").unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].fields, vec!["a b", "c d"]);
        assert!(parse_requests("only-task\n").is_err());
    }

    #[test]
    fn prompt_text_round_trip() {
        let t = Tensor::matrix(2, 3, vec![0.1, -0.2, 1e-300, 5.0, 6.5, -7.25]).unwrap();
        assert_eq!(prompt_from_text(&prompt_to_text(&t)).unwrap(), t);
        assert!(prompt_from_text("2 2\n1 2 3\n").is_err());
    }

    #[test]
    fn sample_is_clamped_and_seeded() {
        let train: Vec<Example> = (0..5).map(|i| Example { tokens: vec![i], label: 0 }).collect();
        assert_eq!(sample_instances(&train, 20, 1).len(), 5);
        assert_eq!(sample_instances(&train, 3, 1), sample_instances(&train, 3, 1));
    }
}
