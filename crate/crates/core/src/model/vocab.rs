//! Whitespace tokenizer, instruction templates and verbalizers.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{DoeError, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";

/// Lowercased whitespace vocabulary. Ids 0, 1 and 2 are `<pad>`, `<unk>`
/// and `<mask>`; remaining ids follow first appearance in the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const RESERVED: usize = 3;
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const MASK_ID: usize = 2;

    pub fn from_corpus<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD, UNK, MASK] {
            v.insert(w.to_string());
        }
        for text in texts {
            for w in text.as_ref().split_whitespace() {
                v.insert(w.to_lowercase());
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its word list (id order).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < Self::RESERVED || words[..3] != [PAD, UNK, MASK] {
            return Err(DoeError::format("vocabulary must start with <pad> <unk> <mask>"));
        }
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            if v.index.contains_key(&w) {
                return Err(DoeError::format(format!("duplicate vocabulary word `{w}`")));
            }
            v.insert(w);
        }
        Ok(v)
    }

    fn insert(&mut self, w: String) {
        if !self.index.contains_key(&w) {
            self.index.insert(w.clone(), self.words.len());
            self.words.push(w);
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(Self::UNK_ID))
            .collect()
    }
}

/// Instruction template shapes, one per benchmark family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateKind {
    Sentiment,
    Topic,
    PairMatch,
    PremiseHypothesis,
}

impl TemplateKind {
    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::Sentiment => "sentiment",
            TemplateKind::Topic => "topic",
            TemplateKind::PairMatch => "pair-match",
            TemplateKind::PremiseHypothesis => "premise-hypothesis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            TemplateKind::Sentiment,
            TemplateKind::Topic,
            TemplateKind::PairMatch,
            TemplateKind::PremiseHypothesis,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| DoeError::Template(format!("unknown template `{s}`")))
    }
}

/// An instruction pattern with `{slot}` placeholders and one `<mask>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTemplate {
    pub kind: TemplateKind,
    pub pattern: String,
}

impl TaskTemplate {
    pub fn new(kind: TemplateKind) -> Self {
        let pattern = match kind {
            TemplateKind::Sentiment => "Text: {text} . The sentiment of the text is <mask> .",
            TemplateKind::Topic => "Text: {text} . The topic of the text is <mask> .",
            TemplateKind::PairMatch => "Text1: {text1} . Text2: {text2} . The two texts are <mask> .",
            TemplateKind::PremiseHypothesis => {
                "Premise: {premise} . Hypothesis: {hypothesis} . The premise and hypothesis have a relationship of <mask> ."
            }
        };
        TaskTemplate {
            kind,
            pattern: pattern.to_string(),
        }
    }

    pub fn slots(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut rest = self.pattern.as_str();
        while let Some(start) = rest.find('{') {
            let Some(end) = rest[start..].find('}') else { break };
            out.push(&rest[start + 1..start + end]);
            rest = &rest[start + end + 1..];
        }
        out
    }

    /// Label words in label-id order.
    pub fn label_words(&self) -> &'static [&'static str] {
        match self.kind {
            TemplateKind::Sentiment => &["positive", "negative"],
            TemplateKind::Topic => &["world", "sports", "business", "science"],
            TemplateKind::PairMatch => &["different", "equivalent"],
            TemplateKind::PremiseHypothesis => &["implication", "contradiction", "neutrality"],
        }
    }
}

/// Fills every slot of `template` and normalizes whitespace. Inputs may not
/// contain the mask token, so the result always has exactly one.
pub fn render_template(template: &TaskTemplate, fields: &BTreeMap<String, String>) -> Result<String> {
    let mut out = template.pattern.clone();
    for slot in template.slots() {
        let value = fields
            .get(slot)
            .ok_or_else(|| DoeError::Template(format!("missing slot `{slot}`")))?;
        if value.split_whitespace().any(|w| w.eq_ignore_ascii_case(MASK)) {
            return Err(DoeError::Template(format!("slot `{slot}` contains {MASK}")));
        }
        out = out.replace(&format!("{{{slot}}}"), value);
    }
    Ok(out.split_whitespace().collect::<Vec<_>>().join(" "))
}

/// Label id to vocabulary token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbalizerMap {
    tokens: Vec<usize>,
}

impl VerbalizerMap {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(DoeError::Usage("verbalizer needs at least one label".into()));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(DoeError::Usage(format!(
                "verbalizer token {t} outside vocabulary of {vocab_size}"
            )));
        }
        let mut sorted = tokens.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != tokens.len() {
            return Err(DoeError::Usage("verbalizer maps two labels to one token".into()));
        }
        Ok(VerbalizerMap { tokens })
    }

    pub fn for_template(template: &TaskTemplate, vocab: &Vocabulary) -> Result<Self> {
        let tokens = template
            .label_words()
            .iter()
            .map(|w| {
                vocab
                    .id(w)
                    .ok_or_else(|| DoeError::Usage(format!("label word `{w}` not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens, vocab.len())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn num_labels(&self) -> usize {
        self.tokens.len()
    }
}
