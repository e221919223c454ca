//! Tokenized classification examples and task datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{DoeError, Result};
use crate::model::{render_template, TaskTemplate, TemplateKind, VerbalizerMap, Vocabulary};

/// One rendered, tokenized instance: template tokens with a single mask,
/// and the gold label id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Raw instance before rendering: slot values plus label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInstance {
    pub fields: BTreeMap<String, String>,
    pub label: usize,
}

impl RawInstance {
    pub fn render(&self, template: &TaskTemplate, vocab: &Vocabulary) -> Result<Example> {
        let text = render_template(template, &self.fields)?;
        Ok(Example {
            tokens: vocab.tokenize(&text),
            label: self.label,
        })
    }
}

/// A task with its template binding and disjoint splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub template: TaskTemplate,
    pub verbalizer: VerbalizerMap,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

impl TaskData {
    pub fn splits(&self) -> [&[Example]; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Writes `task.txt` and one `<split>.csv` (`label,text`) per split.
    pub fn save(&self, dir: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let tokens: Vec<String> = self.verbalizer.tokens().iter().map(|t| t.to_string()).collect();
        fs::write(
            dir.join("task.txt"),
            format!(
                "name {}\nkind {}\nverbalizer {}\n",
                self.name,
                self.template.kind.name(),
                tokens.join(",")
            ),
        )?;
        for (split, examples) in SPLITS.iter().zip(self.splits()) {
            let mut w = csv::Writer::from_path(dir.join(format!("{split}.csv")))?;
            w.write_record(["label", "text"])?;
            for ex in examples {
                let text: Vec<&str> = ex
                    .tokens
                    .iter()
                    .map(|&t| vocab.word(t).ok_or_else(|| DoeError::Input(format!("token id {t} outside vocabulary"))))
                    .collect::<Result<_>>()?;
                w.write_record([ex.label.to_string(), text.join(" ")])?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = fs::read_to_string(dir.join("task.txt"))?;
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| DoeError::format(format!("bad task line `{line}`")))?;
            fields.insert(k, v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| DoeError::format(format!("task.txt lacks `{k}`")))
        };
        let template = TaskTemplate::new(TemplateKind::parse(get("kind")?)?);
        let tokens = get("verbalizer")?
            .split(',')
            .map(|t| t.parse().map_err(|_| DoeError::format(format!("bad verbalizer token `{t}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let verbalizer = VerbalizerMap::new(tokens, vocab.len())?;
        let mut splits = Vec::with_capacity(3);
        for split in SPLITS {
            let mut r = csv::Reader::from_path(dir.join(format!("{split}.csv")))?;
            let mut examples = Vec::new();
            for rec in r.records() {
                let rec = rec?;
                let label: usize = rec
                    .get(0)
                    .and_then(|l| l.parse().ok())
                    .ok_or_else(|| DoeError::format(format!("bad label in {split}.csv")))?;
                if label >= verbalizer.num_labels() {
                    return Err(DoeError::Input(format!("label {label} in {split}.csv has no verbalizer token")));
                }
                examples.push(Example {
                    tokens: vocab.tokenize(rec.get(1).unwrap_or("")),
                    label,
                });
            }
            splits.push(examples);
        }
        let [train, val, test]: [Vec<Example>; 3] = splits.try_into().expect("three splits");
        Ok(TaskData {
            name: get("name")?.to_string(),
            template,
            verbalizer,
            train,
            val,
            test,
        })
    }
}
