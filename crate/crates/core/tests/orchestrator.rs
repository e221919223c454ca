use doe_core::bench::synthetic::{generate_task, standard_vocabulary, SyntheticTaskSpec, TaskKind};
use doe_core::data::TaskData;
use doe_core::localize::*;
use doe_core::model::*;
use doe_core::orchestrator::*;
use doe_core::relevance::random_scores;
use doe_core::trainer::{evaluate, TrainConfig};
use doe_core::DoeError;

fn small(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 32,
        prompt_len: 4,
        ..ModelConfig::desk(vocab)
    }
}

fn task(kind: TaskKind, seed: u64) -> TaskData {
    let spec = SyntheticTaskSpec {
        train: 24,
        val: 12,
        test: 12,
        ..SyntheticTaskSpec::for_kind(kind, seed)
    };
    generate_task(&spec, kind.name(), &standard_vocabulary()).unwrap()
}

fn expert(params: &ParameterSet<f64>, name: &str, keep: f64, seed: u64) -> ExpertSpec {
    let config = params.config();
    let table = random_scores(config, &ModuleSelector::All.sites(config), seed);
    ExpertSpec {
        task: name.to_string(),
        plan: build_plan(&table, config, keep, ModuleSelector::Dense, PlanOptions::default()).unwrap(),
        prompt: PromptState::init_from_vocab(params, name, seed).unwrap().matrix,
        original_checksum: params.checksum(),
        full_accuracy: 0.0,
        expert_accuracy: 0.0,
    }
}

fn registry() -> (TaskRegistry, ParameterSet<f64>) {
    let vocab = standard_vocabulary();
    let params = ParameterSet::init(small(vocab.len()), 21).unwrap();
    let mut reg = TaskRegistry::new(params.clone(), vocab);
    for (i, kind) in [TaskKind::KeywordSentiment, TaskKind::TopicK].into_iter().enumerate() {
        let t = task(kind, i as u64);
        reg.register(t.template, t.verbalizer, expert(&params, kind.name(), 0.4, i as u64))
            .unwrap();
    }
    (reg, params)
}

fn direct(params: &ParameterSet<f64>, reg: &TaskRegistry, name: &str, fields: &[&str]) -> usize {
    let entry = reg.get(name).unwrap();
    let tokens = reg.encode(entry, fields).unwrap();
    let pruned = apply_plan(params, &entry.spec.plan).unwrap();
    let logits = forward(&pruned.weights().unwrap(), Some(&entry.spec.prompt), &tokens, &ForwardOptions::default()).unwrap();
    predict_label(&logits, &entry.verbalizer)
}

#[test]
fn interleaved_requests_match_fresh_experts() {
    let (mut reg, params) = registry();
    let checksum = params.checksum();
    let order = [
        ("keyword-sentiment", "good movie with great acting"),
        ("topic-k", "the team won the match"),
        ("keyword-sentiment", "bad plot and awful ending"),
        ("topic-k", "stocks fell on the market"),
        ("keyword-sentiment", "good movie with great acting"),
    ];
    let mut first = None;
    for (i, (name, text)) in order.iter().enumerate() {
        let p = reg.serve_request(name, &[text]).unwrap();
        assert_eq!(p.label, direct(&params, &reg, name, &[text]), "request {i}");
        assert_eq!(reg.full_model().unwrap().checksum(), checksum);
        if i == 0 {
            first = Some(p.label);
        }
        if i == 4 {
            assert_eq!(Some(p.label), first);
        }
    }
}

#[test]
fn unknown_task_leaves_model_plugged() {
    let (mut reg, params) = registry();
    assert!(reg.serve_request("nope", &["x"]).is_err());
    assert_eq!(reg.full_model().unwrap().checksum(), params.checksum());
}

#[test]
fn foreign_expert_is_refused() {
    let (mut reg, _) = registry();
    let other = ParameterSet::init(small(standard_vocabulary().len()), 99).unwrap();
    let t = task(TaskKind::KeywordSentiment, 7);
    let err = reg.register(t.template, t.verbalizer, expert(&other, "other", 0.5, 1));
    assert!(matches!(err, Err(DoeError::Integrity { .. })), "{err:?}");
}

#[test]
fn registry_round_trips_through_disk() {
    let (mut reg, params) = registry();
    let dir = tempfile::tempdir().unwrap();
    reg.save(dir.path()).unwrap();
    let mut loaded = TaskRegistry::load(dir.path()).unwrap();
    assert_eq!(loaded.task_names(), reg.task_names());
    assert_eq!(loaded.original_checksum(), params.checksum());
    for name in reg.task_names() {
        let a = reg.serve_request(&name, &["good team won"]).unwrap();
        let b = loaded.serve_request(&name, &["good team won"]).unwrap();
        assert_eq!(a.label, b.label);
        assert_eq!(reg.get(&name).unwrap().spec, loaded.get(&name).unwrap().spec);
    }
}

#[test]
fn requests_parse_and_serve_to_csv() {
    let (mut reg, _) = registry();
    let reqs = parse_requests("keyword-sentiment\tgood film\n\ntopic-k\tthe match\n").unwrap();
    assert_eq!(reqs.len(), 2);
    let mut out = Vec::new();
    let preds = serve_all(&mut reg, &reqs, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1 + preds.len());
    assert!(parse_requests("missing-fields\n").is_err());
}

#[test]
fn verify_is_two_sided() {
    let vocab = standard_vocabulary();
    let params = ParameterSet::init(small(vocab.len()), 5).unwrap();
    let t = task(TaskKind::KeywordSentiment, 3);
    let prompt = PromptState::init_from_vocab(&params, "ks", 0).unwrap().matrix;
    // Identical model and prompt: zero difference passes at zero tolerance.
    let same = ExpertSpec {
        plan: PrunePlan::full(params.config(), ModuleSelector::Ffn),
        prompt: prompt.clone(),
        ..expert(&params, "ks", 1.0, 0)
    };
    assert!(verify_task_expert(&params, &prompt, &same, &t.test, &t.verbalizer, 0.0).unwrap());

    let spec = expert(&params, "ks", 0.3, 4);
    let full = evaluate(&params.weights().unwrap(), &prompt, &t.test, &t.verbalizer).unwrap();
    let pruned = apply_plan(&params, &spec.plan).unwrap();
    let exp = evaluate(&pruned.weights().unwrap(), &spec.prompt, &t.test, &t.verbalizer).unwrap();
    let gap = (full - exp).abs();
    assert!(verify_task_expert(&params, &prompt, &spec, &t.test, &t.verbalizer, gap).unwrap());
    if gap > 0.0 {
        assert!(!verify_task_expert(&params, &prompt, &spec, &t.test, &t.verbalizer, gap / 2.0).unwrap());
    }
}

#[test]
fn decomposition_probes_at_most_five_rates() {
    let vocab = standard_vocabulary();
    let params = ParameterSet::init(small(vocab.len()), 8).unwrap();
    let t = task(TaskKind::KeywordSentiment, 8);
    let fast = TrainConfig {
        learning_rate: 0.05,
        max_epochs: 2,
        patience: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let cfg = SearchConfig {
        margin_points: 5.0,
        sample_size: 4,
        tune: fast.clone(),
        condense: fast,
        ..SearchConfig::default()
    };
    let (q, loc) = decompose(&params, &t, &cfg).unwrap();
    assert!(loc.trace.len() <= 5);
    assert_eq!(loc.condensation_runs, loc.trace.len());
    // Every accepted rate lies below every rejected one.
    let acc = loc.trace.iter().filter(|p| p.accepted).map(|p| p.value.pruning_rate).fold(0.0, f64::max);
    let rej = loc.trace.iter().filter(|p| !p.accepted).map(|p| p.value.pruning_rate).fold(1.1, f64::min);
    assert!(acc < rej);
    let chosen = 1.0 - loc.spec.plan.keep_ratio;
    assert!((chosen - acc).abs() < 1e-9 || loc.trace.iter().all(|p| !p.accepted));
    assert!((q.baseline - loc.spec.expert_accuracy) * 100.0 <= cfg.margin_points + 1e-9);
    let mut csv = Vec::new();
    loc.write_trace_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), loc.trace.len() + 1);
}
