//! BERT-style encoder: configuration, parameter storage, soft prompts,
//! tokenization and the forward pass.

mod checkpoint;
mod forward;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    forward, forward_batch, predict_label, ActivationMasks, ForwardOptions, ForwardOutput, LayerWeights,
    ModelWeights,
};
pub(crate) use forward::LayerLayout;
pub use vocab::{render_template, TaskTemplate, TemplateKind, VerbalizerMap, Vocabulary, MASK, PAD, UNK};

use crate::error::{DoeError, Result};
use crate::tensor::{Scalar, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub eps: f64,
    pub prompt_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, width 64, 4 heads, FFN width 256.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            max_seq_len: 160,
            eps: 1e-5,
            prompt_len: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DoeError::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model < 2 {
            return bad("d_model must be at least 2".into());
        }
        if self.d_ffn == 0 {
            return bad("d_ffn must be at least 1".into());
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must cover the reserved tokens".into());
        }
        if self.prompt_len >= self.max_seq_len {
            return bad("prompt_len leaves no room for text".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Kind of prunable location inside one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    /// Query/key channels, pruned as a pair.
    AttnQk,
    /// Value channels (head outputs); output-projection rows follow.
    AttnV,
    /// Output-projection columns, zero-recovered before the residual.
    AttnO,
    /// FFN intermediate neurons: first-layer columns and second-layer rows.
    FfnInter,
    /// FFN output columns, zero-recovered before the residual.
    FfnOut,
}

impl SiteKind {
    pub const ALL: [SiteKind; 5] = [
        SiteKind::AttnQk,
        SiteKind::AttnV,
        SiteKind::AttnO,
        SiteKind::FfnInter,
        SiteKind::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::AttnQk => "attn.qk",
            SiteKind::AttnV => "attn.v",
            SiteKind::AttnO => "attn.o",
            SiteKind::FfnInter => "ffn.inter",
            SiteKind::FfnOut => "ffn.out",
        }
    }

    pub fn width(self, config: &ModelConfig) -> usize {
        match self {
            SiteKind::FfnInter => config.d_ffn,
            _ => config.d_model,
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, SiteKind::AttnQk | SiteKind::AttnV | SiteKind::AttnO)
    }
}

/// A prune site: one [`SiteKind`] in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        SiteId { layer, kind }
    }

    pub fn path(&self) -> String {
        format!("layers.{}.{}", self.layer, self.kind.name())
    }

    pub fn parse(path: &str) -> Result<Self> {
        let rest = path
            .strip_prefix("layers.")
            .ok_or_else(|| DoeError::format(format!("bad site path `{path}`")))?;
        let (layer, kind) = rest
            .split_once('.')
            .ok_or_else(|| DoeError::format(format!("bad site path `{path}`")))?;
        let layer = layer
            .parse()
            .map_err(|_| DoeError::format(format!("bad layer in site path `{path}`")))?;
        let kind = SiteKind::ALL
            .into_iter()
            .find(|k| k.name() == kind)
            .ok_or_else(|| DoeError::format(format!("unknown site kind in `{path}`")))?;
        Ok(SiteId { layer, kind })
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.path())
    }
}

/// Groups of prune sites used for module-specific localization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum ModuleSelector {
    /// Both FFN layers.
    #[default]
    Ffn,
    /// Query, key, value and output projections.
    Attn,
    /// Attention output projection plus both FFN layers.
    Dense,
    /// Every linear layer.
    All,
}

impl ModuleSelector {
    pub fn kinds(self) -> &'static [SiteKind] {
        match self {
            ModuleSelector::Ffn => &[SiteKind::FfnInter, SiteKind::FfnOut],
            ModuleSelector::Attn => &[SiteKind::AttnQk, SiteKind::AttnV, SiteKind::AttnO],
            ModuleSelector::Dense => &[SiteKind::AttnO, SiteKind::FfnInter, SiteKind::FfnOut],
            ModuleSelector::All => &SiteKind::ALL,
        }
    }

    pub fn sites(self, config: &ModelConfig) -> Vec<SiteId> {
        (0..config.n_layers)
            .flat_map(|l| self.kinds().iter().map(move |&k| SiteId::new(l, k)))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleSelector::Ffn => "FFN",
            ModuleSelector::Attn => "Attn",
            ModuleSelector::Dense => "Dense",
            ModuleSelector::All => "All",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ffn" => Ok(ModuleSelector::Ffn),
            "attn" => Ok(ModuleSelector::Attn),
            "dense" => Ok(ModuleSelector::Dense),
            "all" => Ok(ModuleSelector::All),
            _ => Err(DoeError::Usage(format!(
                "unknown module selector `{s}` (expected FFN, Attn, Dense or All)"
            ))),
        }
    }
}

pub(crate) fn layer_path(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

/// Every weight of the encoder, addressed by path.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<F = f64> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<F>>,
}

impl ParameterSet<f64> {
    /// Random initialization. Linear weights are drawn from
    /// `N(0, 1/fan_in)`, embeddings from `N(0, 1/d_model)`; layer-norm gains
    /// start at one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.d_ffn;
        let mut tensors = BTreeMap::new();
        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor<f64> {
            let dist = Normal::new(0.0, std).expect("finite std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect()).unwrap()
        };
        let emb_std = 1.0 / (d as f64).sqrt();
        tensors.insert("embedding.token".into(), normal(vec![config.vocab_size, d], emb_std));
        tensors.insert("embedding.position".into(), normal(vec![config.max_seq_len, d], emb_std));
        let bias_std = 0.02;
        let mut lin = Vec::new();
        for l in 0..config.n_layers {
            for name in ["Q", "K", "V", "O"] {
                lin.push((layer_path(l, &format!("attn.{name}.weight")), vec![d, d], 1.0 / (d as f64).sqrt()));
                lin.push((layer_path(l, &format!("attn.{name}.bias")), vec![d], bias_std));
            }
            lin.push((layer_path(l, "ffn.W1"), vec![d, f], 1.0 / (d as f64).sqrt()));
            lin.push((layer_path(l, "ffn.b1"), vec![f], bias_std));
            lin.push((layer_path(l, "ffn.W2"), vec![f, d], 1.0 / (f as f64).sqrt()));
            lin.push((layer_path(l, "ffn.b2"), vec![d], bias_std));
        }
        for (path, shape, std) in lin {
            tensors.insert(path, normal(shape, std));
        }
        let mut ln = vec!["embedding.ln".to_string()];
        for l in 0..config.n_layers {
            ln.push(layer_path(l, "ln1"));
            ln.push(layer_path(l, "ln2"));
        }
        for prefix in ln {
            tensors.insert(format!("{prefix}.gain"), Tensor::new(vec![d], vec![1.0; d]).unwrap());
            tensors.insert(format!("{prefix}.bias"), Tensor::zeros(vec![d]));
        }
        Ok(ParameterSet { config, tensors })
    }
}

impl<F: Scalar> ParameterSet<F> {
    /// Builds a set from explicit tensors, checking every expected path and
    /// shape.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        for (path, shape) in &expected {
            match tensors.get(path) {
                None => return Err(DoeError::format(format!("missing tensor `{path}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(DoeError::dim(format!(
                        "tensor `{path}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(DoeError::format(format!("unexpected tensor `{extra}`")));
        }
        Ok(ParameterSet { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(path)
            .ok_or_else(|| DoeError::Usage(format!("no tensor at path `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| DoeError::Usage(format!("no tensor at path `{path}`")))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> String {
        checksum_tensors(&self.tensors)
    }

    pub fn cast<G: Scalar>(&self) -> ParameterSet<G> {
        ParameterSet {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Borrowed view consumed by the forward pass.
    pub fn weights(&self) -> Result<ModelWeights<'_, F>> {
        ModelWeights::full(&self.config, &self.tensors)
    }
}

pub(crate) fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = config.d_model;
    let f = config.d_ffn;
    let mut m = BTreeMap::new();
    m.insert("embedding.token".to_string(), vec![config.vocab_size, d]);
    m.insert("embedding.position".to_string(), vec![config.max_seq_len, d]);
    m.insert("embedding.ln.gain".to_string(), vec![d]);
    m.insert("embedding.ln.bias".to_string(), vec![d]);
    for l in 0..config.n_layers {
        for name in ["Q", "K", "V", "O"] {
            m.insert(layer_path(l, &format!("attn.{name}.weight")), vec![d, d]);
            m.insert(layer_path(l, &format!("attn.{name}.bias")), vec![d]);
        }
        m.insert(layer_path(l, "ffn.W1"), vec![d, f]);
        m.insert(layer_path(l, "ffn.b1"), vec![f]);
        m.insert(layer_path(l, "ffn.W2"), vec![f, d]);
        m.insert(layer_path(l, "ffn.b2"), vec![d]);
        for ln in ["ln1", "ln2"] {
            m.insert(layer_path(l, &format!("{ln}.gain")), vec![d]);
            m.insert(layer_path(l, &format!("{ln}.bias")), vec![d]);
        }
    }
    m
}

/// SHA-256 over paths, shapes and the 64-bit little-endian value bytes, in
/// path order.
pub(crate) fn checksum_tensors<F: Scalar>(tensors: &BTreeMap<String, Tensor<F>>) -> String {
    let mut h = Sha256::new();
    for (path, t) in tensors {
        h.update((path.len() as u64).to_le_bytes());
        h.update(path.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &dim in t.shape() {
            h.update((dim as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_f64().to_le_bytes());
        }
    }
    hex_digest(&h.finalize())
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trainable soft prompt with its optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub task: String,
    /// `prompt_len x d_model`
    pub matrix: Tensor<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl PromptState {
    /// Rows copied from the token embeddings of randomly drawn non-reserved
    /// vocabulary entries.
    pub fn init_from_vocab(params: &ParameterSet<f64>, task: &str, seed: u64) -> Result<Self> {
        let cfg = params.config();
        let emb = params.get("embedding.token")?;
        let d = cfg.d_model;
        let candidates: Vec<usize> = (Vocabulary::RESERVED..cfg.vocab_size).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(cfg.prompt_len * d);
        for _ in 0..cfg.prompt_len {
            let &tok = candidates
                .choose(&mut rng)
                .ok_or_else(|| DoeError::Config("vocabulary has no ordinary tokens".into()))?;
            data.extend_from_slice(&emb.data()[tok * d..(tok + 1) * d]);
        }
        Self::from_matrix(task, Tensor::matrix(cfg.prompt_len, d, data)?)
    }

    pub fn from_matrix(task: &str, matrix: Tensor<f64>) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(DoeError::dim(format!(
                "prompt must be a matrix, got shape {:?}",
                matrix.shape()
            )));
        }
        let n = matrix.numel();
        Ok(PromptState {
            task: task.to_string(),
            matrix,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy with optimizer state reset, used as a warm start.
    pub fn restart(&self) -> Self {
        Self::from_matrix(&self.task, self.matrix.clone()).expect("matrix already validated")
    }
}
