//! Synthetic classification tasks shaped like the sentiment, topic,
//! paraphrase and entailment benchmarks.
//!
//! Labels are a deterministic function of which keyword groups appear in
//! the text, so every task is separable when the noise rate is zero.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, RawInstance, TaskData};
use crate::error::{DoeError, Result};
use crate::model::{TaskTemplate, MASK, TemplateKind, VerbalizerMap, Vocabulary};

pub const POSITIVE: &[&str] = &[
    "good", "great", "excellent", "wonderful", "superb", "lovely", "brilliant", "amazing",
    "delightful", "enjoyable", "charming", "pleasant",
];
pub const NEGATIVE: &[&str] = &[
    "bad", "awful", "terrible", "horrible", "dreadful", "boring", "poor", "weak", "dull",
    "painful", "annoying", "mediocre",
];
pub const TOPICS: &[&[&str]] = &[
    &["nation", "government", "election", "minister", "war", "border", "treaty", "capital"],
    &["game", "team", "match", "score", "player", "coach", "league", "season"],
    &["market", "stock", "company", "profit", "trade", "bank", "price", "economy"],
    &["research", "study", "lab", "theory", "experiment", "data", "physics", "biology"],
];
pub const FILLER: &[&str] = &[
    "the", "a", "this", "that", "it", "was", "is", "very", "quite", "story", "film", "movie",
    "plot", "actor", "scene", "time", "day", "people", "thing", "way", "really", "just", "also",
    "some", "many", "one", "two", "place", "book", "show", "music", "part", "end", "start",
    "city", "house", "road", "night", "morning", "year", "week", "man", "woman", "child",
    "friend", "family", "group", "room", "door", "window", "table", "car", "train", "street",
    "water", "light", "color", "sound", "voice", "word", "line", "page", "side", "point",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    KeywordSentiment,
    TopicK,
    PairMatch,
    PremiseHypothesis,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::KeywordSentiment => "keyword-sentiment",
            TaskKind::TopicK => "topic-k",
            TaskKind::PairMatch => "pair-match",
            TaskKind::PremiseHypothesis => "premise-hypothesis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            TaskKind::KeywordSentiment,
            TaskKind::TopicK,
            TaskKind::PairMatch,
            TaskKind::PremiseHypothesis,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| DoeError::Usage(format!("unknown task kind `{s}`")))
    }

    pub fn template(self) -> TaskTemplate {
        TaskTemplate::new(match self {
            TaskKind::KeywordSentiment => TemplateKind::Sentiment,
            TaskKind::TopicK => TemplateKind::Topic,
            TaskKind::PairMatch => TemplateKind::PairMatch,
            TaskKind::PremiseHypothesis => TemplateKind::PremiseHypothesis,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    /// Number of filler words drawn from (at most the built-in list).
    pub vocab_size: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Probability that a label is replaced by a different random label.
    pub noise: f64,
    pub seed: u64,
    pub min_words: usize,
    pub max_words: usize,
    /// Keywords of the gold class per text.
    pub keywords: usize,
    /// Keywords of other classes per text (kept below `keywords`, so the
    /// majority still decides the label).
    pub distractors: usize,
}

impl SyntheticTaskSpec {
    pub fn keyword_sentiment(seed: u64) -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::KeywordSentiment,
            vocab_size: FILLER.len(),
            classes: 2,
            train: 180,
            val: 20,
            test: 200,
            noise: 0.0,
            seed,
            min_words: 4,
            max_words: 8,
            keywords: 1,
            distractors: 0,
        }
    }

    pub fn for_kind(kind: TaskKind, seed: u64) -> Self {
        let classes = match kind {
            TaskKind::TopicK => 4,
            TaskKind::PremiseHypothesis => 3,
            _ => 2,
        };
        SyntheticTaskSpec {
            kind,
            classes,
            ..Self::keyword_sentiment(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DoeError::Config(m.to_string()));
        if self.classes < 2 {
            return bad("a task needs at least two classes");
        }
        let max_classes = match self.kind {
            TaskKind::KeywordSentiment | TaskKind::PairMatch => 2,
            TaskKind::TopicK => TOPICS.len(),
            TaskKind::PremiseHypothesis => 3,
        };
        if self.classes > max_classes {
            return bad("class count exceeds what this task kind supports");
        }
        if matches!(self.kind, TaskKind::PairMatch | TaskKind::PremiseHypothesis) && self.classes != max_classes {
            return bad("pair tasks have a fixed class count");
        }
        if self.vocab_size == 0 || self.vocab_size > FILLER.len() {
            return bad("filler vocabulary size out of range");
        }
        if self.min_words > self.max_words {
            return bad("min_words exceeds max_words");
        }
        if self.keywords == 0 || self.distractors >= self.keywords {
            return bad("need at least one keyword and fewer distractors than keywords");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        if self.train == 0 || self.val == 0 {
            return bad("train and validation splits must be non-empty");
        }
        Ok(())
    }
}

/// Vocabulary covering every synthetic task, template and label word.
pub fn standard_vocabulary() -> Vocabulary {
    let mut corpus: Vec<String> = Vec::new();
    for kind in [
        TemplateKind::Sentiment,
        TemplateKind::Topic,
        TemplateKind::PairMatch,
        TemplateKind::PremiseHypothesis,
    ] {
        let t = TaskTemplate::new(kind);
        corpus.push(t.pattern.clone());
        corpus.push(t.label_words().join(" "));
    }
    corpus.push(FILLER.join(" "));
    corpus.extend(PRETRAIN_PATTERNS.iter().map(|p| p.to_string()));
    corpus.push(POSITIVE.join(" "));
    corpus.push(NEGATIVE.join(" "));
    for group in TOPICS {
        corpus.push(group.join(" "));
    }
    let is_slot = |w: &&str| w.starts_with('{') && w.ends_with('}');
    Vocabulary::from_corpus(corpus.iter().map(|t| {
        t.split_whitespace().filter(|w| !is_slot(w)).collect::<Vec<_>>().join(" ")
    }))
}

fn class_keywords(kind: TaskKind, class: usize) -> &'static [&'static str] {
    match kind {
        TaskKind::TopicK => TOPICS[class],
        _ => {
            if class == 0 {
                POSITIVE
            } else {
                NEGATIVE
            }
        }
    }
}

struct Gen<'s> {
    spec: &'s SyntheticTaskSpec,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn filler(&mut self, n: usize) -> Vec<&'static str> {
        let pool = &FILLER[..self.spec.vocab_size];
        (0..n).map(|_| *pool.choose(&mut self.rng).unwrap()).collect()
    }

    /// Filler text with keywords of `class` and distractors from other
    /// classes inserted at random positions.
    fn text(&mut self, kind: TaskKind, class: usize, classes: usize) -> String {
        let n = self.rng.random_range(self.spec.min_words..=self.spec.max_words);
        let mut words = self.filler(n);
        let mut inserts: Vec<&str> = (0..self.spec.keywords)
            .map(|_| *class_keywords(kind, class).choose(&mut self.rng).unwrap())
            .collect();
        for _ in 0..self.spec.distractors {
            let other = (class + self.rng.random_range(1..classes)) % classes;
            inserts.push(class_keywords(kind, other).choose(&mut self.rng).unwrap());
        }
        inserts.shuffle(&mut self.rng);
        for w in inserts {
            let at = self.rng.random_range(0..=words.len());
            words.insert(at, w);
        }
        words.join(" ")
    }

    fn plain(&mut self) -> String {
        let n = self.rng.random_range(self.spec.min_words..=self.spec.max_words);
        self.filler(n).join(" ")
    }

    fn instance(&mut self) -> RawInstance {
        let spec = self.spec;
        let label = self.rng.random_range(0..spec.classes);
        let mut fields = BTreeMap::new();
        match spec.kind {
            TaskKind::KeywordSentiment | TaskKind::TopicK => {
                fields.insert("text".to_string(), self.text(spec.kind, label, spec.classes));
            }
            TaskKind::PairMatch => {
                // Equivalent (label 1) when both texts carry the same polarity.
                let first = self.rng.random_range(0..2);
                let second = if label == 1 { first } else { 1 - first };
                fields.insert("text1".to_string(), self.text(TaskKind::KeywordSentiment, first, 2));
                fields.insert("text2".to_string(), self.text(TaskKind::KeywordSentiment, second, 2));
            }
            TaskKind::PremiseHypothesis => {
                // implication: same polarity; contradiction: opposite;
                // neutrality: hypothesis without sentiment keywords.
                let polarity = self.rng.random_range(0..2);
                fields.insert("premise".to_string(), self.text(TaskKind::KeywordSentiment, polarity, 2));
                let hyp = match label {
                    0 => self.text(TaskKind::KeywordSentiment, polarity, 2),
                    1 => self.text(TaskKind::KeywordSentiment, 1 - polarity, 2),
                    _ => self.plain(),
                };
                fields.insert("hypothesis".to_string(), hyp);
            }
        }
        let label = if spec.noise > 0.0 && self.rng.random::<f64>() < spec.noise {
            (label + self.rng.random_range(1..spec.classes)) % spec.classes
        } else {
            label
        };
        RawInstance { fields, label }
    }
}

/// Statement patterns of the backbone pretraining corpus. They state the
/// same facts as the task templates but never use their wording.
pub const PRETRAIN_PATTERNS: &[&str] = &[
    "{text} . in short it was {label} .",
    "{label} is how one would call : {text} .",
    "{text} . this one is about {label} .",
    "about {label} : {text} .",
    "{text1} and {text2} are {label} .",
    "if {premise} then {hypothesis} holds by {label} .",
];

/// Masked-token sentences for pretraining a backbone. Each example's
/// `label` is the vocabulary id of the masked word. Roughly a third are
/// plain texts with one random word masked; the rest are statements from
/// [`PRETRAIN_PATTERNS`] with the label word masked.
pub fn pretraining_corpus(vocab: &Vocabulary, n: usize, seed: u64) -> Result<Vec<Example>> {
    let spec = SyntheticTaskSpec::keyword_sentiment(seed);
    let mut g = Gen {
        spec: &spec,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let words = |kind: TemplateKind| TaskTemplate::new(kind).label_words();
    let sentiment = words(TemplateKind::Sentiment);
    let topic = words(TemplateKind::Topic);
    let pair = words(TemplateKind::PairMatch);
    let entail = words(TemplateKind::PremiseHypothesis);
    let id = |w: &str| {
        vocab
            .id(w)
            .ok_or_else(|| DoeError::Config(format!("vocabulary lacks pretraining word `{w}`")))
    };
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let pick = g.rng.random_range(0..9);
        let (pattern, fields, label): (&str, Vec<(&str, String)>, &str) = match pick {
            0..=2 => {
                let text = format!("{} {}", g.text(TaskKind::KeywordSentiment, 0, 2), g.plain());
                let words: Vec<&str> = text.split_whitespace().collect();
                let at = g.rng.random_range(0..words.len());
                let target = words[at].to_string();
                let masked: Vec<&str> = words
                    .iter()
                    .enumerate()
                    .map(|(i, w)| if i == at { MASK } else { *w })
                    .collect();
                let tokens = vocab.tokenize(&masked.join(" "));
                out.push(Example {
                    tokens,
                    label: id(&target)?,
                });
                continue;
            }
            3 | 4 => {
                let class = g.rng.random_range(0..2);
                let text = g.text(TaskKind::KeywordSentiment, class, 2);
                (PRETRAIN_PATTERNS[pick - 3], vec![("text", text)], sentiment[class])
            }
            5 | 6 => {
                let class = g.rng.random_range(0..TOPICS.len());
                let text = g.text(TaskKind::TopicK, class, TOPICS.len());
                (PRETRAIN_PATTERNS[pick - 3], vec![("text", text)], topic[class])
            }
            7 => {
                let label = g.rng.random_range(0..2);
                let first = g.rng.random_range(0..2);
                let second = if label == 1 { first } else { 1 - first };
                let t1 = g.text(TaskKind::KeywordSentiment, first, 2);
                let t2 = g.text(TaskKind::KeywordSentiment, second, 2);
                (PRETRAIN_PATTERNS[4], vec![("text1", t1), ("text2", t2)], pair[label])
            }
            _ => {
                let label = g.rng.random_range(0..3);
                let polarity = g.rng.random_range(0..2);
                let p = g.text(TaskKind::KeywordSentiment, polarity, 2);
                let h = match label {
                    0 => g.text(TaskKind::KeywordSentiment, polarity, 2),
                    1 => g.text(TaskKind::KeywordSentiment, 1 - polarity, 2),
                    _ => g.plain(),
                };
                (PRETRAIN_PATTERNS[5], vec![("premise", p), ("hypothesis", h)], entail[label])
            }
        };
        let mut text = pattern.replace("{label}", MASK);
        for (k, v) in fields {
            text = text.replace(&format!("{{{k}}}"), &v);
        }
        out.push(Example {
            tokens: vocab.tokenize(&text),
            label: id(label)?,
        });
    }
    Ok(out)
}

/// Raw instances for the three splits, with no text shared between splits.
pub fn generate_raw(spec: &SyntheticTaskSpec) -> Result<[Vec<RawInstance>; 3]> {
    spec.validate()?;
    let mut g = Gen {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut seen = HashSet::new();
    let mut splits: [Vec<RawInstance>; 3] = Default::default();
    for (split, &count) in splits.iter_mut().zip(&[spec.train, spec.val, spec.test]) {
        let mut attempts = 0usize;
        while split.len() < count {
            attempts += 1;
            if attempts > 1000 * (count + 1) {
                return Err(DoeError::Config(
                    "could not draw enough distinct instances; enlarge lengths or vocabulary".into(),
                ));
            }
            let inst = g.instance();
            let key: Vec<&String> = inst.fields.values().collect();
            let key = format!("{key:?}");
            if seen.insert(key) {
                split.push(inst);
            }
        }
    }
    Ok(splits)
}

/// Generates, renders and tokenizes a synthetic task.
pub fn generate_task(spec: &SyntheticTaskSpec, name: &str, vocab: &Vocabulary) -> Result<TaskData> {
    let [train, val, test] = generate_raw(spec)?;
    let template = spec.kind.template();
    let verbalizer = VerbalizerMap::for_template(&template, vocab)?;
    let verbalizer = VerbalizerMap::new(verbalizer.tokens()[..spec.classes].to_vec(), vocab.len())?;
    let render = |v: Vec<RawInstance>| -> Result<Vec<_>> {
        v.iter().map(|r| r.render(&template, vocab)).collect()
    };
    let (train, val, test) = (render(train)?, render(val)?, render(test)?);
    Ok(TaskData {
        name: name.to_string(),
        template,
        verbalizer,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticTaskSpec::keyword_sentiment(11);
        let v = standard_vocabulary();
        let a = generate_task(&spec, "s", &v).unwrap();
        let b = generate_task(&spec, "s", &v).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_task(&SyntheticTaskSpec::keyword_sentiment(12), "s", &v).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn keyword_rule_is_perfect_without_noise() {
        let spec = SyntheticTaskSpec::keyword_sentiment(5);
        let v = standard_vocabulary();
        let pos: HashSet<usize> = POSITIVE.iter().map(|w| v.id(w).unwrap()).collect();
        let neg: HashSet<usize> = NEGATIVE.iter().map(|w| v.id(w).unwrap()).collect();
        let task = generate_task(&spec, "s", &v).unwrap();
        for ex in task.train.iter().chain(&task.val).chain(&task.test) {
            // Linear rule: count(positive) - count(negative) > 0 => label 0.
            let score: i64 = ex
                .tokens
                .iter()
                .map(|t| pos.contains(t) as i64 - neg.contains(t) as i64)
                .sum();
            assert_eq!(ex.label, if score > 0 { 0 } else { 1 });
            assert_eq!(ex.tokens.iter().filter(|&&t| t == Vocabulary::MASK_ID).count(), 1);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = SyntheticTaskSpec::keyword_sentiment(3);
        let [train, val, test] = generate_raw(&spec).unwrap();
        let key = |r: &RawInstance| format!("{:?}", r.fields);
        let tr: HashSet<_> = train.iter().map(key).collect();
        assert!(val.iter().chain(&test).all(|r| !tr.contains(&key(r))));
    }

    #[test]
    fn pair_match_has_two_text_slots() {
        let spec = SyntheticTaskSpec::for_kind(TaskKind::PairMatch, 1);
        let [train, _, _] = generate_raw(&spec).unwrap();
        assert!(train.iter().all(|r| r.fields.contains_key("text1") && r.fields.contains_key("text2")));
        let task = generate_task(&spec, "p", &standard_vocabulary()).unwrap();
        assert_eq!(task.verbalizer.num_labels(), 2);
    }

    #[test]
    fn all_kinds_generate() {
        let v = standard_vocabulary();
        for kind in [TaskKind::TopicK, TaskKind::PremiseHypothesis] {
            let task = generate_task(&SyntheticTaskSpec::for_kind(kind, 2), kind.name(), &v).unwrap();
            assert_eq!(task.train.len(), 180);
            assert!(task.train.iter().all(|e| !e.tokens.contains(&Vocabulary::UNK_ID)));
        }
        assert!(v.len() <= 2048);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SyntheticTaskSpec::keyword_sentiment(0);
        s.classes = 1;
        assert!(s.validate().is_err());
        let mut s = SyntheticTaskSpec::keyword_sentiment(0);
        s.distractors = 1;
        assert!(s.validate().is_err());
    }
}
