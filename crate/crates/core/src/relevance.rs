//! Per-neuron relevance scores at each prune site.
//!
//! For every instance the representation `h` at each site is tapped and the
//! gold label's verbalizer logit is differentiated with respect to it. A
//! token's score is `|h_i * dlogit/dh_i|` (attribution), `|h_i|`
//! (activation) or `|dlogit/dh_i|` (gradient). Scores are averaged over the
//! instance's text positions (soft-prompt positions excluded) and summed
//! over instances. Random scores are uniform draws used as a baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{DoeError, Result};
use crate::model::{forward_batch, ForwardOptions, ModelConfig, ModelWeights, SiteId, VerbalizerMap, Vocabulary};
use crate::tensor::{Graph, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScorerKind {
    Attribution,
    Activation,
    Gradient,
    Random,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 4] = [
        ScorerKind::Attribution,
        ScorerKind::Activation,
        ScorerKind::Gradient,
        ScorerKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Attribution => "attribution",
            ScorerKind::Activation => "activation",
            ScorerKind::Gradient => "gradient",
            ScorerKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DoeError::Usage(format!("unknown scorer `{s}`")))
    }

    fn token_score(self, h: f64, g: f64) -> f64 {
        match self {
            ScorerKind::Attribution => (h * g).abs(),
            ScorerKind::Activation => h.abs(),
            ScorerKind::Gradient => g.abs(),
            ScorerKind::Random => unreachable!("random scores do not use activations"),
        }
    }
}

/// Scores per prune site plus provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionTable {
    pub kind: ScorerKind,
    /// Instances that contributed.
    pub instances: usize,
    /// Instances skipped because they had no usable mask.
    pub skipped: usize,
    pub seed: u64,
    pub scores: BTreeMap<SiteId, Vec<f64>>,
}

impl AttributionTable {
    pub fn get(&self, site: SiteId) -> Option<&[f64]> {
        self.scores.get(&site).map(Vec::as_slice)
    }

    pub fn sites(&self) -> impl Iterator<Item = SiteId> + '_ {
        self.scores.keys().copied()
    }

    /// Checks widths against the model and non-negativity.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (site, s) in &self.scores {
            if site.layer >= config.n_layers {
                return Err(DoeError::dim(format!("{site} is beyond the model's {} layers", config.n_layers)));
            }
            let w = site.kind.width(config);
            if s.len() != w {
                return Err(DoeError::dim(format!("{site} has {} scores, site width is {w}", s.len())));
            }
            if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(DoeError::Numeric(format!("{site} has a negative or non-finite score")));
            }
        }
        Ok(())
    }

    /// Elementwise sum of two tables over the same sites (instances add up).
    pub fn combine(&self, other: &AttributionTable) -> Result<AttributionTable> {
        if self.kind != other.kind || self.scores.len() != other.scores.len() {
            return Err(DoeError::Usage("tables differ in scorer or sites".into()));
        }
        let mut scores = BTreeMap::new();
        for (site, a) in &self.scores {
            let b = other
                .scores
                .get(site)
                .filter(|b| b.len() == a.len())
                .ok_or_else(|| DoeError::Usage(format!("site {site} missing or mismatched")))?;
            scores.insert(*site, a.iter().zip(b).map(|(x, y)| x + y).collect());
        }
        Ok(AttributionTable {
            kind: self.kind,
            instances: self.instances + other.instances,
            skipped: self.skipped + other.skipped,
            seed: self.seed,
            scores,
        })
    }

    /// Line-oriented text form: a header line, then one line per site with
    /// its path, neuron count and scores.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "scorer {} instances {} skipped {} seed {}\n",
            self.kind.name(),
            self.instances,
            self.skipped,
            self.seed
        );
        for (site, s) in &self.scores {
            let _ = write!(out, "{} {}", site.path(), s.len());
            for v in s {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| DoeError::format("empty attribution table"))?
            .split_whitespace()
            .collect();
        let field = |name: &str| -> Result<&str> {
            header
                .iter()
                .position(|w| *w == name)
                .and_then(|i| header.get(i + 1).copied())
                .ok_or_else(|| DoeError::format(format!("table header lacks `{name}`")))
        };
        let num = |name: &str| -> Result<u64> {
            field(name)?
                .parse()
                .map_err(|_| DoeError::format(format!("bad `{name}` in table header")))
        };
        let kind = ScorerKind::parse(field("scorer")?)?;
        let mut scores = BTreeMap::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let site = SiteId::parse(parts.next().unwrap_or_default())?;
            let n: usize = parts
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| DoeError::format(format!("bad neuron count for {site}")))?;
            let vals = parts
                .map(|v| v.parse::<f64>().map_err(|_| DoeError::format(format!("bad score `{v}` for {site}"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != n {
                return Err(DoeError::format(format!("{site} declares {n} scores but lists {}", vals.len())));
            }
            if scores.insert(site, vals).is_some() {
                return Err(DoeError::format(format!("duplicate site {site}")));
            }
        }
        Ok(AttributionTable {
            kind,
            instances: num("instances")? as usize,
            skipped: num("skipped")? as usize,
            seed: num("seed")?,
            scores,
        })
    }
}

/// Mean of per-token score vectors for one instance.
pub fn instance_mean(token_scores: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = token_scores.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.len()];
    for t in token_scores {
        acc.iter_mut().zip(t).for_each(|(a, v)| *a += v);
    }
    let k = token_scores.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    acc
}

/// Token mean within each instance, summed over instances in order.
pub fn aggregate(instances: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let mut total: Vec<f64> = Vec::new();
    for inst in instances {
        let m = instance_mean(inst);
        if total.is_empty() {
            total = vec![0.0; m.len()];
        }
        total.iter_mut().zip(&m).for_each(|(a, v)| *a += v);
    }
    total
}

fn has_single_mask(tokens: &[usize]) -> bool {
    tokens.iter().filter(|&&t| t == Vocabulary::MASK_ID).count() == 1
}

/// Scores `sites` over `sample` with any scorer. `seed` is recorded in the
/// table and drives the random scorer.
pub fn score_sites(
    kind: ScorerKind,
    weights: &ModelWeights<'_, f64>,
    prompt: Option<&Tensor<f64>>,
    sample: &[Example],
    sites: &[SiteId],
    verbalizer: &VerbalizerMap,
    seed: u64,
) -> Result<AttributionTable> {
    if kind == ScorerKind::Random {
        return Ok(random_scores(weights.config, sites, seed));
    }
    if sample.is_empty() {
        return Err(DoeError::Input("relevance scoring needs at least one instance".into()));
    }
    let cfg = weights.config;
    let mut scores: BTreeMap<SiteId, Vec<f64>> = sites
        .iter()
        .map(|&s| (s, vec![0.0; s.kind.width(cfg)]))
        .collect();
    let mut skipped = 0;
    for ex in sample {
        if !has_single_mask(&ex.tokens) || ex.label >= verbalizer.num_labels() {
            warn!("skipping an instance without a single mask or with an unknown label");
            skipped += 1;
            continue;
        }
        let mut tape = Tape::new();
        let p = match prompt {
            Some(p) if p.numel() > 0 => Some(tape.leaf(p.clone())),
            _ => None,
        };
        let opts = ForwardOptions {
            taps: Some(sites),
            masks: None,
        };
        let out = forward_batch(&mut tape, weights, p, &[&ex.tokens], &opts)?;
        let target = tape.pick(out.logits, 0, verbalizer.tokens()[ex.label])?;
        let values: Vec<(SiteId, Vec<f64>)> = out
            .taps
            .iter()
            .map(|&(s, v)| (s, tape.value(v).to_vec()))
            .collect();
        let grads = tape.backward(target)?;
        let first = out.prompt_len;
        let k = (out.seq_len - first) as f64;
        for ((site, h), &(_, var)) in values.iter().zip(&out.taps) {
            let g = grads.get(var).expect("tapped nodes always receive gradients");
            let acc = scores.get_mut(site).expect("tap sites come from the request");
            let w = acc.len();
            let mut inst = vec![0.0; w];
            for row in first..out.seq_len {
                let hr = &h[row * w..(row + 1) * w];
                let gr = &g[row * w..(row + 1) * w];
                for i in 0..w {
                    inst[i] += kind.token_score(hr[i], gr[i]);
                }
            }
            for (a, v) in acc.iter_mut().zip(&inst) {
                *a += v / k;
            }
        }
    }
    Ok(AttributionTable {
        kind,
        instances: sample.len() - skipped,
        skipped,
        seed,
        scores,
    })
}

pub fn attribution_scores(
    weights: &ModelWeights<'_, f64>,
    prompt: Option<&Tensor<f64>>,
    sample: &[Example],
    sites: &[SiteId],
    verbalizer: &VerbalizerMap,
) -> Result<AttributionTable> {
    score_sites(ScorerKind::Attribution, weights, prompt, sample, sites, verbalizer, 0)
}

pub fn activation_scores(
    weights: &ModelWeights<'_, f64>,
    prompt: Option<&Tensor<f64>>,
    sample: &[Example],
    sites: &[SiteId],
    verbalizer: &VerbalizerMap,
) -> Result<AttributionTable> {
    score_sites(ScorerKind::Activation, weights, prompt, sample, sites, verbalizer, 0)
}

pub fn gradient_scores(
    weights: &ModelWeights<'_, f64>,
    prompt: Option<&Tensor<f64>>,
    sample: &[Example],
    sites: &[SiteId],
    verbalizer: &VerbalizerMap,
) -> Result<AttributionTable> {
    score_sites(ScorerKind::Gradient, weights, prompt, sample, sites, verbalizer, 0)
}

/// Uniform scores in `[0, 1)`, reproducible by seed.
pub fn random_scores(config: &ModelConfig, sites: &[SiteId], seed: u64) -> AttributionTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = sites
        .iter()
        .map(|&s| (s, (0..s.kind.width(config)).map(|_| rng.random::<f64>()).collect()))
        .collect();
    AttributionTable {
        kind: ScorerKind::Random,
        instances: 0,
        skipped: 0,
        seed,
        scores,
    }
}
