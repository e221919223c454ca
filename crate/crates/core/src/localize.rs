//! Turning relevance scores into pruned experts.
//!
//! A [`PrunePlan`] lists the retained neuron indices per site. Applying it
//! copies out narrower weight matrices (whole rows/columns removed), and
//! the forward pass re-inserts zeros for removed output channels so the
//! residual stream keeps its width. The original parameters are never
//! modified; restoring means reloading the checkpoint and checking its
//! digest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{DoeError, Result};
use crate::model::{
    decode_checkpoint, hex_digest, layer_path, ActivationMasks, LayerLayout, ModelConfig,
    ModelWeights, ModuleSelector, ParameterSet, SiteId, SiteKind,
};
use crate::relevance::AttributionTable;
use crate::tensor::{Scalar, Tensor};

/// Retained neuron indices per site.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub selector: ModuleSelector,
    /// Fraction of pooled neurons retained.
    pub keep_ratio: f64,
    pub retained: BTreeMap<SiteId, Vec<usize>>,
}

impl PrunePlan {
    /// Plan that keeps every neuron of the selected sites.
    pub fn full(config: &ModelConfig, selector: ModuleSelector) -> Self {
        let retained = selector
            .sites(config)
            .into_iter()
            .map(|s| (s, (0..s.kind.width(config)).collect()))
            .collect();
        PrunePlan {
            selector,
            keep_ratio: 1.0,
            retained,
        }
    }

    pub fn retained(&self, site: SiteId) -> Option<&[usize]> {
        self.retained.get(&site).map(Vec::as_slice)
    }

    /// Fraction of the plan's pooled neurons that are removed.
    pub fn pruning_rate(&self, config: &ModelConfig) -> f64 {
        let total: usize = self.retained.keys().map(|s| s.kind.width(config)).sum();
        let kept: usize = self.retained.values().map(Vec::len).sum();
        if total == 0 {
            0.0
        } else {
            1.0 - kept as f64 / total as f64
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (site, idx) in &self.retained {
            if site.layer >= config.n_layers {
                return Err(DoeError::plan(format!("{site} is beyond the model's layers")));
            }
            let w = site.kind.width(config);
            if idx.windows(2).any(|p| p[0] >= p[1]) {
                return Err(DoeError::plan(format!("{site}: retained indices must be strictly increasing")));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= w) {
                return Err(DoeError::plan(format!("{site}: index {bad} outside width {w}")));
            }
        }
        Ok(())
    }

    /// Masks that zero exactly the removed neurons in the full model.
    pub fn masks(&self, config: &ModelConfig) -> ActivationMasks {
        ActivationMasks::from_retained(config, self.retained.iter().map(|(s, v)| (*s, v.as_slice())))
    }

    /// Digest of the retained index sets, used to show that two experiment
    /// arms share one plan.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.selector.name().as_bytes());
        for (site, idx) in &self.retained {
            h.update(site.path().as_bytes());
            h.update((idx.len() as u64).to_le_bytes());
            for &i in idx {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlanOptions {
    /// Permit sites (or attention heads) that retain nothing.
    pub allow_empty: bool,
    /// Rank within each layer instead of across all layers.
    pub per_layer: bool,
}

/// Number of neurons kept out of `total` at keep ratio `p`.
pub fn keep_count(p: f64, total: usize) -> usize {
    ((p * total as f64 - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// Ranks the selected sites' neurons by score and keeps the top `keep_ratio`.
/// Ties go to the lower layer, then the earlier site, then the lower index.
pub fn build_plan(
    table: &AttributionTable,
    config: &ModelConfig,
    keep_ratio: f64,
    selector: ModuleSelector,
    opts: PlanOptions,
) -> Result<PrunePlan> {
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(DoeError::plan(format!("keep ratio {keep_ratio} outside [0, 1]")));
    }
    let sites = selector.sites(config);
    let mut pools: BTreeMap<usize, Vec<(f64, SiteId, usize)>> = BTreeMap::new();
    for &site in &sites {
        let scores = table
            .get(site)
            .ok_or_else(|| DoeError::plan(format!("no scores for {site}")))?;
        if scores.len() != site.kind.width(config) {
            return Err(DoeError::plan(format!("{site}: {} scores for width {}", scores.len(), site.kind.width(config))));
        }
        let pool = if opts.per_layer { site.layer } else { 0 };
        let entry = pools.entry(pool).or_default();
        entry.extend(scores.iter().enumerate().map(|(i, &s)| (s, site, i)));
    }
    let mut retained: BTreeMap<SiteId, Vec<usize>> = sites.iter().map(|&s| (s, Vec::new())).collect();
    for pool in pools.values_mut() {
        pool.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.layer.cmp(&b.1.layer))
                .then(a.1.kind.cmp(&b.1.kind))
                .then(a.2.cmp(&b.2))
        });
        let keep = keep_count(keep_ratio, pool.len());
        for &(_, site, i) in &pool[..keep] {
            retained.get_mut(&site).expect("site listed").push(i);
        }
    }
    for idx in retained.values_mut() {
        idx.sort_unstable();
    }
    let plan = PrunePlan {
        selector,
        keep_ratio,
        retained,
    };
    if !opts.allow_empty {
        check_not_empty(&plan, config)?;
    }
    Ok(plan)
}

fn check_not_empty(plan: &PrunePlan, config: &ModelConfig) -> Result<()> {
    let hd = config.head_dim();
    for (site, idx) in &plan.retained {
        if idx.is_empty() {
            return Err(DoeError::plan(format!("{site} retains no neurons")));
        }
        if matches!(site.kind, SiteKind::AttnQk | SiteKind::AttnV) {
            for h in 0..config.n_heads {
                if !idx.iter().any(|&i| i / hd == h) {
                    return Err(DoeError::plan(format!("{site}: head {h} reduced to zero channels")));
                }
            }
        }
    }
    Ok(())
}

/// Excised copy of a parameter set together with the layout the forward
/// pass needs to zero-recover removed outputs.
#[derive(Debug, Clone)]
pub struct PrunedParameterSet<F = f64> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<F>>,
    layouts: Vec<LayerLayout>,
    pub plan: PrunePlan,
    /// Checksum of the parameters the plan was applied to.
    pub original_checksum: String,
}

impl<F: Scalar> PrunedParameterSet<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn weights(&self) -> Result<ModelWeights<'_, F>> {
        ModelWeights::build(&self.config, &self.tensors, self.layouts.clone())
    }

    /// Zero-recovery positions of a site (retained output channels), when
    /// the site's output is excised.
    pub fn recovery(&self, site: SiteId) -> Option<&[usize]> {
        let l = self.layouts.get(site.layer)?;
        match site.kind {
            SiteKind::AttnO => l.o_keep.as_deref(),
            SiteKind::FfnOut => l.ffn_out_keep.as_deref(),
            _ => None,
        }
    }
}

fn keep_cols<F: Scalar>(t: &Tensor<F>, idx: &[usize]) -> Tensor<F> {
    let (r, c) = t.as_matrix_dims();
    let mut out = Vec::with_capacity(r * idx.len());
    for row in t.data().chunks(c.max(1)).take(r) {
        out.extend(idx.iter().map(|&j| row[j]));
    }
    Tensor::matrix(r, idx.len(), out).expect("sizes agree")
}

fn keep_rows<F: Scalar>(t: &Tensor<F>, idx: &[usize]) -> Tensor<F> {
    let (_, c) = t.as_matrix_dims();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
    }
    Tensor::matrix(idx.len(), c, out).expect("sizes agree")
}

fn keep_entries<F: Scalar>(t: &Tensor<F>, idx: &[usize]) -> Tensor<F> {
    Tensor::new(vec![idx.len()], idx.iter().map(|&i| t.data()[i]).collect()).expect("sizes agree")
}

fn head_counts(idx: &[usize], config: &ModelConfig) -> Vec<usize> {
    let hd = config.head_dim();
    let mut counts = vec![0; config.n_heads];
    for &i in idx {
        counts[i / hd] += 1;
    }
    counts
}

/// Physically excises the plan's neurons. `params` is left untouched.
///
/// Per layer: Q/K columns (and biases) follow `attn.qk`; V columns and O
/// rows follow `attn.v`; O columns follow `attn.o`; W1 columns, b1 and W2
/// rows follow `ffn.inter`; W2 columns and b2 follow `ffn.out`.
pub fn apply_plan<F: Scalar>(params: &ParameterSet<F>, plan: &PrunePlan) -> Result<PrunedParameterSet<F>> {
    let config = params.config().clone();
    plan.validate(&config)?;
    let d = config.d_model;
    let mut tensors = params.tensors().clone();
    let mut layouts = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut layout = LayerLayout::full(&config);
        let get = |kind| plan.retained(SiteId::new(l, kind));
        let mut edit = |name: &str, f: &dyn Fn(&Tensor<F>) -> Tensor<F>| {
            let path = layer_path(l, name);
            let t = tensors.get_mut(&path).expect("parameter set is complete");
            *t = f(t);
        };
        if let Some(idx) = get(SiteKind::AttnQk) {
            for n in ["attn.Q", "attn.K"] {
                edit(&format!("{n}.weight"), &|t| keep_cols(t, idx));
                edit(&format!("{n}.bias"), &|t| keep_entries(t, idx));
            }
            layout.qk_heads = head_counts(idx, &config);
        }
        if let Some(idx) = get(SiteKind::AttnV) {
            edit("attn.V.weight", &|t| keep_cols(t, idx));
            edit("attn.V.bias", &|t| keep_entries(t, idx));
            edit("attn.O.weight", &|t| keep_rows(t, idx));
            layout.v_heads = head_counts(idx, &config);
        }
        if let Some(idx) = get(SiteKind::AttnO) {
            edit("attn.O.weight", &|t| keep_cols(t, idx));
            edit("attn.O.bias", &|t| keep_entries(t, idx));
            if idx.len() != d {
                layout.o_keep = Some(idx.to_vec());
            }
        }
        if let Some(idx) = get(SiteKind::FfnInter) {
            edit("ffn.W1", &|t| keep_cols(t, idx));
            edit("ffn.b1", &|t| keep_entries(t, idx));
            edit("ffn.W2", &|t| keep_rows(t, idx));
        }
        if let Some(idx) = get(SiteKind::FfnOut) {
            edit("ffn.W2", &|t| keep_cols(t, idx));
            edit("ffn.b2", &|t| keep_entries(t, idx));
            if idx.len() != d {
                layout.ffn_out_keep = Some(idx.to_vec());
            }
        }
        layouts.push(layout);
    }
    Ok(PrunedParameterSet {
        config,
        tensors,
        layouts,
        plan: plan.clone(),
        original_checksum: params.checksum(),
    })
}

/// Joint Q/K plus V/O excision for attention sites. Q and K always lose the
/// same channels, so `Q·Kᵀ` equals the full product with those K channels
/// zeroed.
pub fn attention_adjacency_prune<F: Scalar>(
    params: &ParameterSet<F>,
    plan: &PrunePlan,
) -> Result<PrunedParameterSet<F>> {
    if plan.retained.keys().any(|s| !s.kind.is_attention()) {
        return Err(DoeError::plan("attention pruning got a non-attention site"));
    }
    check_not_empty(plan, params.config())?;
    apply_plan(params, plan)
}

/// Places `v` at the retained positions of a zero vector of width `width`.
pub fn zero_recover<F: Scalar>(v: &[F], retained: &[usize], width: usize) -> Result<Vec<F>> {
    if v.len() != retained.len() {
        return Err(DoeError::dim(format!(
            "zero-recovery got {} values for {} retained positions",
            v.len(),
            retained.len()
        )));
    }
    if let Some(&bad) = retained.iter().find(|&&i| i >= width) {
        return Err(DoeError::dim(format!("retained index {bad} outside width {width}")));
    }
    let mut out = vec![F::ZERO; width];
    for (&i, &x) in retained.iter().zip(v) {
        out[i] = x;
    }
    Ok(out)
}

/// Reloads the original parameters and checks them against the digest
/// recorded when the plan was applied.
pub fn restore<F>(checkpoint: &[u8], pruned: &PrunedParameterSet<F>) -> Result<ParameterSet<f64>> {
    let params = decode_checkpoint(checkpoint)?;
    let found = params.checksum();
    if found != pruned.original_checksum {
        return Err(DoeError::Integrity {
            expected: pruned.original_checksum.clone(),
            found,
        });
    }
    Ok(params)
}

/// Parameter counts before and after pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamAccounting {
    pub total: usize,
    pub removed: usize,
    /// Parameters of both FFN layers (weights and biases) in the full model.
    pub ffn_total: usize,
}

impl ParamAccounting {
    pub fn of<F: Scalar>(original: &ParameterSet<F>, pruned: &PrunedParameterSet<F>) -> Self {
        let c = original.config();
        ParamAccounting {
            total: original.num_params(),
            removed: original.num_params() - pruned.num_params(),
            ffn_total: c.n_layers * (2 * c.d_model * c.d_ffn + c.d_ffn + c.d_model),
        }
    }

    /// Removed parameters over all model parameters.
    pub fn model_rate(&self) -> f64 {
        self.removed as f64 / self.total as f64
    }

    /// Removed parameters over the FFN parameters (exact when only FFN
    /// sites are pruned).
    pub fn ffn_rate(&self) -> f64 {
        self.removed as f64 / self.ffn_total as f64
    }
}

/// Everything needed to serve a task with its expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpec {
    pub task: String,
    pub plan: PrunePlan,
    /// Prompt after condensation on the pruned model.
    pub prompt: Tensor<f64>,
    pub original_checksum: String,
    /// Validation accuracy of the full model with the tuned prompt.
    pub full_accuracy: f64,
    /// Validation accuracy of the expert with the condensed prompt.
    pub expert_accuracy: f64,
}

const SPEC_HEADER: &str = "doe-expert 1";

impl ExpertSpec {
    pub fn pruning_rate(&self, config: &ModelConfig) -> f64 {
        self.plan.pruning_rate(config)
    }

    /// Line-oriented text form, see the README for the grammar.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{SPEC_HEADER}");
        let _ = writeln!(s, "task {}", self.task);
        let _ = writeln!(s, "selector {}", self.plan.selector.name());
        let _ = writeln!(s, "keep_ratio {}", self.plan.keep_ratio);
        let _ = writeln!(s, "checksum {}", self.original_checksum);
        let _ = writeln!(s, "full_accuracy {}", self.full_accuracy);
        let _ = writeln!(s, "expert_accuracy {}", self.expert_accuracy);
        for (site, idx) in &self.plan.retained {
            let _ = write!(s, "site {} {}", site.path(), idx.len());
            for i in idx {
                let _ = write!(s, " {i}");
            }
            s.push('\n');
        }
        let (r, c) = self.prompt.as_matrix_dims();
        let _ = writeln!(s, "prompt {r} {c}");
        for row in self.prompt.data().chunks(c.max(1)) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| DoeError::format(m);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(SPEC_HEADER) {
            return Err(bad("not an expert spec file".into()));
        }
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        let mut retained = BTreeMap::new();
        let mut prompt = None;
        while let Some(line) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "site" => {
                    let mut p = rest.split_whitespace();
                    let site = SiteId::parse(p.next().unwrap_or_default())?;
                    let n: usize = p
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad(format!("bad count for {site}")))?;
                    let idx = p
                        .map(|v| v.parse::<usize>().map_err(|_| bad(format!("bad index `{v}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    if idx.len() != n {
                        return Err(bad(format!("{site} declares {n} indices but lists {}", idx.len())));
                    }
                    retained.insert(site, idx);
                }
                "prompt" => {
                    let dims: Vec<usize> = rest.split_whitespace().filter_map(|v| v.parse().ok()).collect();
                    let [r, c] = dims[..] else {
                        return Err(bad("prompt line needs rows and columns".into()));
                    };
                    let mut data = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        let row = lines.next().ok_or_else(|| bad("truncated prompt".into()))?;
                        for v in row.split_whitespace() {
                            data.push(v.parse::<f64>().map_err(|_| bad(format!("bad prompt value `{v}`")))?);
                        }
                    }
                    prompt = Some(Tensor::matrix(r, c, data)?);
                }
                _ => {
                    kv.insert(key, rest.trim());
                }
            }
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        Ok(ExpertSpec {
            task: get("task")?.to_string(),
            plan: PrunePlan {
                selector: ModuleSelector::parse(get("selector")?)?,
                keep_ratio: num("keep_ratio")?,
                retained,
            },
            prompt: prompt.ok_or_else(|| bad("missing prompt".into()))?,
            original_checksum: get("checksum")?.to_string(),
            full_accuracy: num("full_accuracy")?,
            expert_accuracy: num("expert_accuracy")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relevance::ScorerKind;

    fn table(config: &ModelConfig, entries: &[(SiteId, Vec<f64>)]) -> AttributionTable {
        let mut scores: BTreeMap<SiteId, Vec<f64>> = ModuleSelector::All
            .sites(config)
            .into_iter()
            .map(|s| (s, vec![0.0; s.kind.width(config)]))
            .collect();
        for (s, v) in entries {
            scores.insert(*s, v.clone());
        }
        AttributionTable {
            kind: ScorerKind::Attribution,
            instances: 1,
            skipped: 0,
            seed: 0,
            scores,
        }
    }

    fn toy() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 4,
            max_seq_len: 8,
            eps: 1e-5,
            prompt_len: 1,
        }
    }

    #[test]
    fn keep_count_rounds_up() {
        assert_eq!(keep_count(0.5, 4), 2);
        assert_eq!(keep_count(0.3, 10), 3);
        assert_eq!(keep_count(0.35, 10), 4);
        assert_eq!(keep_count(1.0, 7), 7);
        assert_eq!(keep_count(0.0, 7), 0);
    }

    #[test]
    fn top_half_of_one_site() {
        let c = toy();
        let inter = SiteId::new(0, SiteKind::FfnInter);
        let out = SiteId::new(0, SiteKind::FfnOut);
        let t = table(&c, &[(inter, vec![9.0, 1.0, 8.0, 2.0]), (out, vec![100.0; 4])]);
        let plan = build_plan(&t, &c, 0.75, ModuleSelector::Ffn, PlanOptions::default()).unwrap();
        assert_eq!(plan.retained(out).unwrap(), &[0, 1, 2, 3]);
        assert_eq!(plan.retained(inter).unwrap(), &[0, 2]);
    }

    #[test]
    fn pooled_ranking_can_empty_a_site() {
        let mut c = toy();
        c.d_ffn = 2;
        c.d_model = 2;
        c.n_heads = 1;
        let inter = SiteId::new(0, SiteKind::FfnInter);
        let out = SiteId::new(0, SiteKind::FfnOut);
        let t = table(&c, &[(inter, vec![10.0, 9.0]), (out, vec![1.0, 0.0])]);
        let opts = PlanOptions {
            allow_empty: true,
            ..Default::default()
        };
        let plan = build_plan(&t, &c, 0.5, ModuleSelector::Ffn, opts).unwrap();
        assert_eq!(plan.retained(inter).unwrap(), &[0, 1]);
        assert!(plan.retained(out).unwrap().is_empty());
        let err = build_plan(&t, &c, 0.5, ModuleSelector::Ffn, PlanOptions::default());
        assert!(matches!(err, Err(DoeError::Plan(_))));
    }

    #[test]
    fn ties_prefer_lower_layer_then_index() {
        let mut c = toy();
        c.n_layers = 2;
        let t = table(&c, &[]);
        let plan = build_plan(&t, &c, 0.5, ModuleSelector::Ffn, PlanOptions { allow_empty: true, per_layer: false }).unwrap();
        // 16 neurons, 8 kept: all of layer 0 (inter then out)
        assert_eq!(plan.retained(SiteId::new(0, SiteKind::FfnInter)).unwrap().len(), 4);
        assert_eq!(plan.retained(SiteId::new(0, SiteKind::FfnOut)).unwrap().len(), 4);
        assert!(plan.retained(SiteId::new(1, SiteKind::FfnInter)).unwrap().is_empty());
        let per = build_plan(&t, &c, 0.5, ModuleSelector::Ffn, PlanOptions { allow_empty: true, per_layer: true }).unwrap();
        assert_eq!(per.retained(SiteId::new(1, SiteKind::FfnInter)).unwrap(), &[0, 1, 2, 3]);
    }

    #[test]
    fn full_plan_keeps_everything() {
        let c = toy();
        let t = table(&c, &[]);
        let plan = build_plan(&t, &c, 1.0, ModuleSelector::All, PlanOptions::default()).unwrap();
        assert_eq!(plan, PrunePlan::full(&c, ModuleSelector::All));
        assert_eq!(plan.pruning_rate(&c), 0.0);
    }

    #[test]
    fn column_and_row_excision() {
        let w1 = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(keep_cols(&w1, &[0, 2]).data(), &[1.0, 3.0, 4.0, 6.0]);
        let w2 = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = keep_rows(&w2, &[0, 2]);
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), &[1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn zero_recovery_cases() {
        assert_eq!(zero_recover(&[1.5, 2.5], &[0, 2], 3).unwrap(), vec![1.5, 0.0, 2.5]);
        assert_eq!(zero_recover(&[1.0, 2.0, 3.0], &[0, 1, 2], 3).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(matches!(zero_recover(&[1.0], &[0, 1], 3), Err(DoeError::Dimension(_))));
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let c = toy();
        let mut plan = PrunePlan::full(&c, ModuleSelector::Ffn);
        plan.retained.insert(SiteId::new(0, SiteKind::FfnInter), vec![0, 9]);
        let p = ParameterSet::init(c.clone(), 0).unwrap();
        assert!(matches!(apply_plan(&p, &plan), Err(DoeError::Plan(_))));
        plan.retained.insert(SiteId::new(0, SiteKind::FfnInter), vec![1, 0]);
        assert!(plan.validate(&c).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let c = toy();
        let t = table(&c, &[(SiteId::new(0, SiteKind::FfnInter), vec![0.3, 0.1, 0.7, 0.2])]);
        let plan = build_plan(&t, &c, 0.5, ModuleSelector::Ffn, PlanOptions { allow_empty: true, per_layer: false }).unwrap();
        let spec = ExpertSpec {
            task: "sst".into(),
            plan,
            prompt: Tensor::matrix(1, 4, vec![0.1, -2.0, 1e-17, 3.25]).unwrap(),
            original_checksum: "abc".into(),
            full_accuracy: 0.95,
            expert_accuracy: 0.9,
        };
        assert_eq!(ExpertSpec::from_text(&spec.to_text()).unwrap(), spec);
        assert!(ExpertSpec::from_text("nope").is_err());
    }
}
