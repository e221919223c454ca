use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use doe_core::bench::presets::{run_preset, ExperimentConfig, Preset};
use doe_core::bench::synthetic::{generate_task, standard_vocabulary, SyntheticTaskSpec, TaskKind};
use doe_core::bench::timing::{measure_speedup, write_speedup_csv};
use doe_core::config::ConfigFile;
use doe_core::data::TaskData;
use doe_core::localize::{apply_plan, ExpertSpec};
use doe_core::model::{load_checkpoint, save_checkpoint, ModuleSelector, ParameterSet, PromptState, Vocabulary};
use doe_core::orchestrator::{
    binary_search_localize, load_vocab, parse_requests, prompt_from_text, prompt_to_text, score_task, serve_all,
    verify_task_expert, Quantified, TaskRegistry,
};
use doe_core::pretrain::pretrained_backbone;
use doe_core::relevance::{random_scores, AttributionTable, ScorerKind};
use doe_core::trainer::{evaluate, prompt_tune};

#[derive(Parser, Debug)]
#[command(name = "doe", version, about = "Decompose a small encoder into task experts and serve them")]
struct Cli {
    /// Seed for every random choice (overrides `seed` in the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = "doe-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain a backbone with masked-token prediction; writes model.bin and vocab.txt.
    Pretrain,
    /// Generate a synthetic task directory.
    GenTask {
        #[arg(long, default_value = "keyword-sentiment")]
        kind: String,
        /// Task name (defaults to the kind).
        #[arg(long)]
        name: Option<String>,
    },
    /// Prompt-tune the full model on a task; writes prompt.txt and train_log.csv.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
    },
    /// Score neuron relevance with a tuned prompt; writes relevance.txt and relevance.csv.
    Quantify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        scorer: Option<String>,
    },
    /// Search the largest pruning rate within the margin; writes <task>.expert and search_trace.csv.
    Localize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        relevance: PathBuf,
    },
    /// Check that an expert stays within epsilon of the full model; exits 1 on failure.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        /// Tolerance in percentage points (default from config, else 1.0).
        #[arg(long)]
        epsilon_points: Option<f64>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Add an expert to a registry directory, creating it if needed.
    Register {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        expert: PathBuf,
    },
    /// Serve `task<TAB>text` request lines; writes predictions.csv.
    Run {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        requests: PathBuf,
    },
    /// Time full against pruned 32-bit inference; writes speedup.csv and speedup_plot.csv.
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Relevance table used to build plans (random scores if omitted).
        #[arg(long)]
        relevance: Option<PathBuf>,
    },
    /// Run a multi-seed experiment preset.
    Preset {
        /// scorer-comparison, module-comparison, condensation-ablation,
        /// prior-alignment-ablation or hyperparam-sweep
        name: String,
    },
}

struct Ctx {
    seed: u64,
    file: ConfigFile,
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }
}

fn load_model(dir: &Path) -> Result<(ParameterSet<f64>, Vocabulary)> {
    let params = load_checkpoint(dir.join("model.bin")).with_context(|| format!("loading {}/model.bin", dir.display()))?;
    let vocab = load_vocab(dir.join("vocab.txt")).with_context(|| format!("loading {}/vocab.txt", dir.display()))?;
    if vocab.len() != params.config().vocab_size {
        bail!(
            "vocab.txt has {} words but the model expects {}",
            vocab.len(),
            params.config().vocab_size
        );
    }
    Ok((params, vocab))
}

fn load_prompt(path: &Path, task: &str) -> Result<PromptState> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(PromptState::from_matrix(task, prompt_from_text(&text)?)?)
}

fn load_table(path: &Path) -> Result<AttributionTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(AttributionTable::from_text(&text)?)
}

fn write_relevance_csv(table: &AttributionTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["site", "neuron", "score"])?;
    for (site, scores) in &table.scores {
        for (i, s) in scores.iter().enumerate() {
            w.write_record([site.path(), i.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let cfg = file.experiment(seed)?;
    let ctx = Ctx {
        seed,
        file,
        cfg,
        out: cli.out,
    };
    match cli.command {
        Command::Pretrain => {
            let vocab = standard_vocabulary();
            let (params, log) = pretrained_backbone(&vocab, &ctx.cfg.pretrain)?;
            save_checkpoint(&params, ctx.out_file("model.bin")?)?;
            fs::write(ctx.out_file("vocab.txt")?, vocab.words().join("\n") + "\n")?;
            let mut w = csv::Writer::from_path(ctx.out_file("pretrain_log.csv")?)?;
            w.write_record(["epoch", "loss"])?;
            for (i, l) in log.epoch_loss.iter().enumerate() {
                w.write_record([(i + 1).to_string(), l.to_string()])?;
            }
            w.flush()?;
            println!("pretrained backbone {} written to {}", params.checksum(), ctx.out.display());
        }
        Command::GenTask { kind, name } => {
            let kind = TaskKind::parse(&kind)?;
            let mut spec = ctx.cfg.task.clone();
            if ctx.file.task_kind.is_none() {
                spec = SyntheticTaskSpec {
                    kind,
                    classes: SyntheticTaskSpec::for_kind(kind, ctx.seed).classes,
                    ..spec
                };
            }
            let name = name.unwrap_or_else(|| spec.kind.name().to_string());
            let vocab = standard_vocabulary();
            let task = generate_task(&spec, &name, &vocab)?;
            let dir = ctx.out.join(&name);
            task.save(&dir, &vocab)?;
            println!(
                "task `{name}`: {} train, {} val, {} test in {}",
                task.train.len(),
                task.val.len(),
                task.test.len(),
                dir.display()
            );
        }
        Command::Train { model, task } => {
            let (params, vocab) = load_model(&model)?;
            let task = TaskData::load(&task, &vocab)?;
            let init = PromptState::init_from_vocab(&params, &task.name, ctx.seed)?;
            let w = params.weights()?;
            let (prompt, log) = prompt_tune(&w, &init, &task.train, &task.val, &task.verbalizer, &ctx.cfg.search.tune)?;
            fs::write(ctx.out_file("prompt.txt")?, prompt_to_text(&prompt.matrix))?;
            log.write_csv(fs::File::create(ctx.out_file("train_log.csv")?)?)?;
            let test = evaluate(&w, &prompt.matrix, &task.test, &task.verbalizer)?;
            println!(
                "validation accuracy {:.4} (epoch {}), test accuracy {test:.4}",
                log.best_val_accuracy, log.best_epoch
            );
        }
        Command::Quantify {
            model,
            task,
            prompt,
            scorer,
        } => {
            let (params, vocab) = load_model(&model)?;
            let task = TaskData::load(&task, &vocab)?;
            let prompt = load_prompt(&prompt, &task.name)?;
            let mut search = ctx.cfg.search.clone();
            if let Some(s) = scorer {
                search.scorer = ScorerKind::parse(&s)?;
            }
            let table = score_task(&params.weights()?, &prompt.matrix, &task, &search)?;
            fs::write(ctx.out_file("relevance.txt")?, table.to_text())?;
            write_relevance_csv(&table, &ctx.out_file("relevance.csv")?)?;
            println!(
                "{} scores over {} instances ({} skipped)",
                table.kind.name(),
                table.instances,
                table.skipped
            );
        }
        Command::Localize {
            model,
            task,
            prompt,
            relevance,
        } => {
            let (params, vocab) = load_model(&model)?;
            let task = TaskData::load(&task, &vocab)?;
            let prompt = load_prompt(&prompt, &task.name)?;
            let table = load_table(&relevance)?;
            let baseline = evaluate(&params.weights()?, &prompt.matrix, &task.val, &task.verbalizer)?;
            let q = Quantified {
                prompt,
                log: Default::default(),
                baseline,
                table,
            };
            let loc = binary_search_localize(&params, &q, &task, &ctx.cfg.search)?;
            let path = ctx.out_file(&format!("{}.expert", task.name))?;
            loc.spec.save(&path)?;
            loc.write_trace_csv(fs::File::create(ctx.out_file("search_trace.csv")?)?)?;
            println!(
                "pruning rate {:.2} with validation accuracy {:.4} (baseline {:.4}) after {} condensations; expert in {}",
                loc.spec.pruning_rate(params.config()),
                loc.spec.expert_accuracy,
                baseline,
                loc.condensation_runs,
                path.display()
            );
        }
        Command::Verify {
            model,
            task,
            prompt,
            expert,
            epsilon_points,
            split,
        } => {
            let (params, vocab) = load_model(&model)?;
            let task = TaskData::load(&task, &vocab)?;
            let prompt = load_prompt(&prompt, &task.name)?;
            let spec = ExpertSpec::load(&expert)?;
            let examples = match split.as_str() {
                "train" => &task.train,
                "val" => &task.val,
                "test" => &task.test,
                other => bail!("unknown split `{other}` (expected train, val or test)"),
            };
            let eps = epsilon_points.unwrap_or_else(|| ctx.file.epsilon_points());
            let ok = verify_task_expert(&params, &prompt.matrix, &spec, examples, &task.verbalizer, eps / 100.0)?;
            let full = evaluate(&params.weights()?, &prompt.matrix, examples, &task.verbalizer)?;
            let pruned = apply_plan(&params, &spec.plan)?;
            let exp = evaluate(&pruned.weights()?, &spec.prompt, examples, &task.verbalizer)?;
            let mut w = csv::Writer::from_path(ctx.out_file("verify.csv")?)?;
            w.write_record(["task", "split", "full_accuracy", "expert_accuracy", "epsilon_points", "passed"])?;
            w.write_record([
                task.name.clone(),
                split.clone(),
                full.to_string(),
                exp.to_string(),
                eps.to_string(),
                ok.to_string(),
            ])?;
            w.flush()?;
            println!(
                "{}: full {full:.4}, expert {exp:.4}, epsilon {eps} points on {split}",
                if ok { "pass" } else { "FAIL" }
            );
            return Ok(ok);
        }
        Command::Register {
            registry,
            model,
            task,
            expert,
        } => {
            let mut reg = if registry.join("manifest.txt").exists() {
                TaskRegistry::load(&registry)?
            } else {
                let (params, vocab) = load_model(&model)?;
                TaskRegistry::new(params, vocab)
            };
            let task = TaskData::load(&task, reg.vocab())?;
            let spec = ExpertSpec::load(&expert)?;
            reg.register(task.template.clone(), task.verbalizer.clone(), spec)?;
            reg.save(&registry)?;
            println!("registry {} holds: {}", registry.display(), reg.task_names().join(", "));
        }
        Command::Run { registry, requests } => {
            let mut reg = TaskRegistry::load(&registry)?;
            let text = fs::read_to_string(&requests).with_context(|| format!("reading {}", requests.display()))?;
            let reqs = parse_requests(&text)?;
            let path = ctx.out_file("predictions.csv")?;
            let preds = serve_all(&mut reg, &reqs, fs::File::create(&path)?)?;
            for p in &preds {
                println!("{}\t{}", p.task, p.label_word);
            }
            info!("{} predictions written to {}", preds.len(), path.display());
        }
        Command::Bench { model, relevance } => {
            let (params, _) = load_model(&model)?;
            let table = match relevance {
                Some(p) => load_table(&p)?,
                None => random_scores(params.config(), &ModuleSelector::All.sites(params.config()), ctx.seed),
            };
            let sweep = ctx.file.sweep(ctx.seed)?;
            let cells = measure_speedup(&params, &table, &sweep, &ctx.cfg.timing)?;
            write_speedup_csv(&cells, fs::File::create(ctx.out_file("speedup.csv")?)?)?;
            let mut w = csv::Writer::from_path(ctx.out_file("speedup_plot.csv")?)?;
            w.write_record(["series", "x", "metric", "seed", "value"])?;
            for c in &cells {
                w.write_record([
                    format!("rate={:.2} batch={}", c.full.pruning_rate, c.full.batch_size),
                    c.full.tokens.to_string(),
                    "speedup".to_string(),
                    ctx.seed.to_string(),
                    format!("{:.4}", c.speedup),
                ])?;
            }
            w.flush()?;
            for c in &cells {
                println!(
                    "rate {:.2} batch {:4} tokens {:4}: {:8.3} ms -> {:8.3} ms  x{:.3}",
                    c.full.pruning_rate, c.full.batch_size, c.full.tokens, c.full.median_ms, c.pruned.median_ms, c.speedup
                );
            }
        }
        Command::Preset { name } => {
            let preset = Preset::parse(&name)?;
            let report = run_preset(preset, &ctx.cfg)?;
            let paths = report.write_all(&ctx.out, preset.name())?;
            for (series, n, stats) in report.summary() {
                let cols: Vec<String> = report
                    .metrics
                    .iter()
                    .zip(&stats)
                    .map(|(m, (mean, sd))| format!("{m} {mean:.4}±{sd:.4}"))
                    .collect();
                println!("{series} ({n} seeds): {}", cols.join(", "));
            }
            for p in paths {
                info!("wrote {}", p.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
