//! Encoder forward pass written once against [`Graph`], so the same code
//! runs on the recording tape (training, attribution) and on the eager
//! evaluator (inference, benchmarks).
//!
//! Layout per layer (post-norm):
//!
//! ```text
//! Q,K,V = X·W + b          (K is the attn.qk site)
//! C     = concat_h softmax(Q_h K_hᵀ / sqrt(d_head)) V_h    (attn.v site)
//! A     = C·W_O + b_O      (attn.o site, zero-recovered when excised)
//! X     = LN1(X + A)
//! H     = gelu(X·W1 + b1)  (ffn.inter site)
//! V     = H·W2 + b2        (ffn.out site, zero-recovered when excised)
//! X     = LN2(X + V)
//! ```

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::{layer_path, ModelConfig, SiteId, SiteKind, VerbalizerMap, Vocabulary};
use crate::error::{DoeError, Result};
use crate::tensor::{Eager, Graph, Scalar, Tensor, Var};

/// Shape of a (possibly excised) layer: retained channel counts per head
/// and the zero-recovery positions of excised outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerLayout {
    pub qk_heads: Vec<usize>,
    pub v_heads: Vec<usize>,
    pub o_keep: Option<Vec<usize>>,
    pub ffn_out_keep: Option<Vec<usize>>,
}

impl LayerLayout {
    pub fn full(config: &ModelConfig) -> Self {
        LayerLayout {
            qk_heads: vec![config.head_dim(); config.n_heads],
            v_heads: vec![config.head_dim(); config.n_heads],
            o_keep: None,
            ffn_out_keep: None,
        }
    }
}

/// Borrowed weights of one encoder layer.
pub struct LayerWeights<'a, F: Scalar> {
    pub q_w: &'a Tensor<F>,
    pub q_b: &'a Tensor<F>,
    pub k_w: &'a Tensor<F>,
    pub k_b: &'a Tensor<F>,
    pub v_w: &'a Tensor<F>,
    pub v_b: &'a Tensor<F>,
    pub o_w: &'a Tensor<F>,
    pub o_b: &'a Tensor<F>,
    pub ln1_gain: &'a Tensor<F>,
    pub ln1_bias: &'a Tensor<F>,
    pub w1: &'a Tensor<F>,
    pub b1: &'a Tensor<F>,
    pub w2: &'a Tensor<F>,
    pub b2: &'a Tensor<F>,
    pub ln2_gain: &'a Tensor<F>,
    pub ln2_bias: &'a Tensor<F>,
    pub(crate) layout: LayerLayout,
}

/// Borrowed view of a full or excised parameter set.
pub struct ModelWeights<'a, F: Scalar> {
    pub config: &'a ModelConfig,
    pub token: &'a Tensor<F>,
    pub position: &'a Tensor<F>,
    pub emb_gain: &'a Tensor<F>,
    pub emb_bias: &'a Tensor<F>,
    pub layers: Vec<LayerWeights<'a, F>>,
}

impl<'a, F: Scalar> ModelWeights<'a, F> {
    pub(crate) fn full(config: &'a ModelConfig, tensors: &'a BTreeMap<String, Tensor<F>>) -> Result<Self> {
        let layouts = vec![LayerLayout::full(config); config.n_layers];
        Self::build(config, tensors, layouts)
    }

    pub(crate) fn build(
        config: &'a ModelConfig,
        tensors: &'a BTreeMap<String, Tensor<F>>,
        layouts: Vec<LayerLayout>,
    ) -> Result<Self> {
        let get = |p: &str| {
            tensors
                .get(p)
                .ok_or_else(|| DoeError::Usage(format!("no tensor at path `{p}`")))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for (l, layout) in layouts.into_iter().enumerate() {
            let lp = |n: &str| layer_path(l, n);
            layers.push(LayerWeights {
                q_w: get(&lp("attn.Q.weight"))?,
                q_b: get(&lp("attn.Q.bias"))?,
                k_w: get(&lp("attn.K.weight"))?,
                k_b: get(&lp("attn.K.bias"))?,
                v_w: get(&lp("attn.V.weight"))?,
                v_b: get(&lp("attn.V.bias"))?,
                o_w: get(&lp("attn.O.weight"))?,
                o_b: get(&lp("attn.O.bias"))?,
                ln1_gain: get(&lp("ln1.gain"))?,
                ln1_bias: get(&lp("ln1.bias"))?,
                w1: get(&lp("ffn.W1"))?,
                b1: get(&lp("ffn.b1"))?,
                w2: get(&lp("ffn.W2"))?,
                b2: get(&lp("ffn.b2"))?,
                ln2_gain: get(&lp("ln2.gain"))?,
                ln2_bias: get(&lp("ln2.bias"))?,
                layout,
            });
        }
        Ok(ModelWeights {
            config,
            token: get("embedding.token")?,
            position: get("embedding.position")?,
            emb_gain: get("embedding.ln.gain")?,
            emb_bias: get("embedding.ln.bias")?,
            layers,
        })
    }
}

/// Keep-flags per site; entries marked `false` are forced to zero in the
/// full model. This is the reference the excised model is checked against.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationMasks {
    pub keep: BTreeMap<SiteId, Vec<bool>>,
}

impl ActivationMasks {
    /// Masks that keep exactly `retained` at each listed site.
    pub fn from_retained<'r>(
        config: &ModelConfig,
        sites: impl IntoIterator<Item = (SiteId, &'r [usize])>,
    ) -> Self {
        let keep = sites
            .into_iter()
            .map(|(site, retained)| {
                let mut flags = vec![false; site.kind.width(config)];
                for &i in retained {
                    flags[i] = true;
                }
                (site, flags)
            })
            .collect();
        ActivationMasks { keep }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'m> {
    /// Sites whose representations are tapped for gradient retention.
    pub taps: Option<&'m [SiteId]>,
    pub masks: Option<&'m ActivationMasks>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `batch x vocab_size` logits at each sequence's mask position.
    pub logits: Var,
    /// Tapped representations, `batch*seq_len x width`, in site order.
    pub taps: Vec<(SiteId, Var)>,
    pub seq_len: usize,
    pub prompt_len: usize,
}

fn mask_position(tokens: &[usize]) -> Result<usize> {
    let mut found = None;
    for (i, &t) in tokens.iter().enumerate() {
        if t == Vocabulary::MASK_ID {
            if found.is_some() {
                return Err(DoeError::Input("sequence has more than one mask token".into()));
            }
            found = Some(i);
        }
    }
    found.ok_or_else(|| DoeError::Input("sequence has no mask token".into()))
}

fn constant<'a, G: Graph<'a>>(g: &mut G, t: &'a Tensor<G::F>) -> Result<Var> {
    let (r, c) = t.as_matrix_dims();
    g.weight(t, r, c)
}

fn row_constant<'a, G: Graph<'a>>(g: &mut G, t: &'a Tensor<G::F>) -> Result<Var> {
    g.weight(t, 1, t.numel())
}

fn linear<'a, G: Graph<'a>>(g: &mut G, x: Var, w: &'a Tensor<G::F>, b: &'a Tensor<G::F>) -> Result<Var> {
    let wv = constant(g, w)?;
    let bv = row_constant(g, b)?;
    let y = g.matmul(x, wv)?;
    g.add(y, bv)
}

fn site_hook<'a, G: Graph<'a>>(
    g: &mut G,
    v: Var,
    site: SiteId,
    opts: &ForwardOptions<'_>,
    taps: &mut Vec<(SiteId, Var)>,
) -> Result<Var> {
    let mut v = v;
    if let Some(flags) = opts.masks.and_then(|m| m.keep.get(&site)) {
        let (_, c) = g.shape(v);
        if flags.len() != c {
            return Err(DoeError::dim(format!(
                "mask for {site} has {} entries, representation has {c}",
                flags.len()
            )));
        }
        let row: Vec<G::F> = flags
            .iter()
            .map(|&k| if k { G::F::ONE } else { G::F::ZERO })
            .collect();
        let m = g.constant(Cow::Owned(row), 1, c)?;
        v = g.mul(v, m)?;
    }
    if opts.taps.is_some_and(|t| t.contains(&site)) {
        g.tap(v);
        taps.push((site, v));
    }
    Ok(v)
}

fn offsets(widths: &[usize]) -> Vec<usize> {
    widths
        .iter()
        .scan(0, |acc, &w| {
            let o = *acc;
            *acc += w;
            Some(o)
        })
        .collect()
}

/// Runs a batch of equal-length token sequences, each holding exactly one
/// mask token, with the soft prompt prepended to every sequence.
pub fn forward_batch<'a, G: Graph<'a>>(
    g: &mut G,
    w: &ModelWeights<'a, G::F>,
    prompt: Option<Var>,
    batch: &[&[usize]],
    opts: &ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    let cfg = w.config;
    let d = cfg.d_model;
    if batch.is_empty() {
        return Err(DoeError::Input("empty batch".into()));
    }
    let n = batch[0].len();
    if batch.iter().any(|s| s.len() != n) {
        return Err(DoeError::Input("batch sequences differ in length".into()));
    }
    let masks = batch.iter().map(|s| mask_position(s)).collect::<Result<Vec<_>>>()?;
    let l = match prompt {
        Some(p) => {
            let (pr, pc) = g.shape(p);
            if pc != d {
                return Err(DoeError::dim(format!("prompt width {pc} but d_model is {d}")));
            }
            pr
        }
        None => 0,
    };
    let seq = l + n;
    if seq > cfg.max_seq_len {
        return Err(DoeError::Input(format!(
            "prompt ({l}) plus tokens ({n}) exceed max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(bad) = batch.iter().flat_map(|s| s.iter()).find(|&&t| t >= cfg.vocab_size) {
        return Err(DoeError::Input(format!("token id {bad} outside vocabulary")));
    }
    let bsz = batch.len();
    let tok = constant(g, w.token)?;
    let pos = constant(g, w.position)?;

    let mut pieces = Vec::with_capacity(2 * bsz);
    for s in batch {
        if let Some(p) = prompt {
            pieces.push(p);
        }
        pieces.push(g.gather_rows(tok, s)?);
    }
    let x = if pieces.len() == 1 { pieces[0] } else { g.concat_rows(&pieces)? };
    let pos_ids: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
    let pe = g.gather_rows(pos, &pos_ids)?;
    let x = g.add(x, pe)?;
    let eg = row_constant(g, w.emb_gain)?;
    let eb = row_constant(g, w.emb_bias)?;
    let mut x = g.layernorm(x, eg, eb, cfg.eps)?;

    let mut taps = Vec::new();
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    for (li, lw) in w.layers.iter().enumerate() {
        let site = |kind| SiteId::new(li, kind);
        let layout = &lw.layout;
        let q = linear(g, x, lw.q_w, lw.q_b)?;
        let k = linear(g, x, lw.k_w, lw.k_b)?;
        let k = site_hook(g, k, site(SiteKind::AttnQk), opts, &mut taps)?;
        let v = linear(g, x, lw.v_w, lw.v_b)?;

        let qk_off = offsets(&layout.qk_heads);
        let v_off = offsets(&layout.v_heads);
        let mut ctx_rows = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let (qb, kb, vb) = if bsz == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_rows(q, b * seq, seq)?,
                    g.slice_rows(k, b * seq, seq)?,
                    g.slice_rows(v, b * seq, seq)?,
                )
            };
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                if layout.v_heads[h] == 0 {
                    continue;
                }
                let qh = g.slice_cols(qb, qk_off[h], layout.qk_heads[h])?;
                let kh = g.slice_cols(kb, qk_off[h], layout.qk_heads[h])?;
                let vh = g.slice_cols(vb, v_off[h], layout.v_heads[h])?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, scale);
                let a = g.softmax_rows(s)?;
                heads.push(g.matmul(a, vh)?);
            }
            let ctx = match heads.len() {
                0 => g.constant(Cow::Owned(Vec::new()), seq, 0)?,
                1 => heads[0],
                _ => g.concat_cols(&heads)?,
            };
            ctx_rows.push(ctx);
        }
        let ctx = if bsz == 1 { ctx_rows[0] } else { g.concat_rows(&ctx_rows)? };
        let ctx = site_hook(g, ctx, site(SiteKind::AttnV), opts, &mut taps)?;
        let attn = linear(g, ctx, lw.o_w, lw.o_b)?;
        let attn = site_hook(g, attn, site(SiteKind::AttnO), opts, &mut taps)?;
        let attn = match &layout.o_keep {
            Some(keep) => g.scatter_cols(attn, keep, d)?,
            None => attn,
        };
        let r = g.add(x, attn)?;
        let g1 = row_constant(g, lw.ln1_gain)?;
        let b1 = row_constant(g, lw.ln1_bias)?;
        x = g.layernorm(r, g1, b1, cfg.eps)?;

        let pre = linear(g, x, lw.w1, lw.b1)?;
        let hid = g.gelu(pre);
        let hid = site_hook(g, hid, site(SiteKind::FfnInter), opts, &mut taps)?;
        let out = linear(g, hid, lw.w2, lw.b2)?;
        let out = site_hook(g, out, site(SiteKind::FfnOut), opts, &mut taps)?;
        let out = match &layout.ffn_out_keep {
            Some(keep) => g.scatter_cols(out, keep, d)?,
            None => out,
        };
        let r = g.add(x, out)?;
        let g2 = row_constant(g, lw.ln2_gain)?;
        let b2 = row_constant(g, lw.ln2_bias)?;
        x = g.layernorm(r, g2, b2, cfg.eps)?;
    }

    let rows: Vec<usize> = masks.iter().enumerate().map(|(b, &m)| b * seq + l + m).collect();
    let hm = g.gather_rows(x, &rows)?;
    let logits = g.matmul_nt(hm, tok)?;
    Ok(ForwardOutput {
        logits,
        taps,
        seq_len: seq,
        prompt_len: l,
    })
}

/// Eager single-sequence inference returning mask-position logits.
pub fn forward<F: Scalar>(
    w: &ModelWeights<'_, F>,
    prompt: Option<&Tensor<F>>,
    tokens: &[usize],
    opts: &ForwardOptions<'_>,
) -> Result<Vec<F>> {
    let mut g: Eager<'_, F> = Eager::new();
    let p = match prompt {
        Some(p) if p.numel() > 0 => {
            let (r, c) = p.as_matrix_dims();
            Some(g.constant(Cow::Owned(p.data().to_vec()), r, c)?)
        }
        _ => None,
    };
    let out = forward_batch(&mut g, w, p, &[tokens], opts)?;
    Ok(g.value(out.logits).to_vec())
}

/// Argmax over the verbalizer's token logits; ties go to the lowest label.
pub fn predict_label<F: Scalar>(logits: &[F], verbalizer: &VerbalizerMap) -> usize {
    let mut best = 0;
    let mut best_v = logits[verbalizer.tokens()[0]];
    for (label, &tok) in verbalizer.tokens().iter().enumerate().skip(1) {
        if logits[tok] > best_v {
            best = label;
            best_v = logits[tok];
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParameterSet;
    use crate::tensor::Tape;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 12,
            max_seq_len: 24,
            eps: 1e-5,
            prompt_len: 3,
        }
    }

    fn prompt(p: &ParameterSet) -> Tensor<f64> {
        crate::model::PromptState::init_from_vocab(p, "t", 1).unwrap().matrix
    }

    #[test]
    fn logits_are_finite_and_sized() {
        let p = ParameterSet::init(cfg(), 7).unwrap();
        let w = p.weights().unwrap();
        let pr = prompt(&p);
        let logits = forward(&w, Some(&pr), &[5, 6, Vocabulary::MASK_ID, 7], &Default::default()).unwrap();
        assert_eq!(logits.len(), 20);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_count_is_validated() {
        let p = ParameterSet::init(cfg(), 7).unwrap();
        let w = p.weights().unwrap();
        let none = forward(&w, None, &[5, 6], &Default::default());
        assert!(matches!(none, Err(DoeError::Input(_))));
        let two = forward(&w, None, &[2, 6, 2], &Default::default());
        assert!(matches!(two, Err(DoeError::Input(_))));
        let long: Vec<usize> = std::iter::once(2).chain(std::iter::repeat_n(5, 23)).collect();
        let pr = prompt(&p);
        assert!(forward(&w, Some(&pr), &long, &Default::default()).is_err());
    }

    #[test]
    fn tape_and_eager_agree_and_repeat() {
        let p = ParameterSet::init(cfg(), 3).unwrap();
        let w = p.weights().unwrap();
        let pr = prompt(&p);
        let toks = [4, 9, 2, 11, 3];
        let eager = forward(&w, Some(&pr), &toks, &Default::default()).unwrap();
        let again = forward(&w, Some(&pr), &toks, &Default::default()).unwrap();
        assert_eq!(eager, again);
        let mut tape = Tape::new();
        let pv = tape.param(pr.clone());
        let out = forward_batch(&mut tape, &w, Some(pv), &[&toks], &Default::default()).unwrap();
        assert_eq!(tape.value(out.logits), eager.as_slice());
    }

    #[test]
    fn batched_rows_match_single_runs() {
        let p = ParameterSet::init(cfg(), 3).unwrap();
        let w = p.weights().unwrap();
        let pr = prompt(&p);
        let a = [4, 9, 2, 11];
        let b = [2, 5, 5, 6];
        let mut g: Eager<'_, f64> = Eager::new();
        let pv = g.constant(Cow::Borrowed(pr.data()), 3, 8).unwrap();
        let out = forward_batch(&mut g, &w, Some(pv), &[&a, &b], &Default::default()).unwrap();
        let both = g.value(out.logits);
        let la = forward(&w, Some(&pr), &a, &Default::default()).unwrap();
        let lb = forward(&w, Some(&pr), &b, &Default::default()).unwrap();
        for (x, y) in both[..20].iter().zip(&la).chain(both[20..].iter().zip(&lb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn taps_have_prompt_plus_token_rows() {
        let p = ParameterSet::init(cfg(), 3).unwrap();
        let w = p.weights().unwrap();
        let pr = prompt(&p);
        let sites: Vec<SiteId> = (0..2)
            .flat_map(|l| SiteKind::ALL.into_iter().map(move |k| SiteId::new(l, k)))
            .collect();
        let mut tape = Tape::new();
        let pv = tape.param(pr);
        let toks = [4, 9, 2, 11, 3];
        let opts = ForwardOptions {
            taps: Some(&sites),
            masks: None,
        };
        let out = forward_batch(&mut tape, &w, Some(pv), &[&toks], &opts).unwrap();
        assert_eq!(out.taps.len(), sites.len());
        for (site, v) in &out.taps {
            assert_eq!(tape.shape(*v), (3 + toks.len(), site.kind.width(&cfg())));
        }
    }

    #[test]
    fn predict_label_rules() {
        let verb = VerbalizerMap::new(vec![3, 4], 6).unwrap();
        assert_eq!(predict_label(&[0.0, 0.0, 0.0, 2.0, 1.0, 9.0], &verb), 0);
        assert_eq!(predict_label(&[0.0, 0.0, 0.0, 1.0, 1.0, 0.0], &verb), 0);
        assert_eq!(predict_label(&[0.0, 0.0, 0.0, 1.0, 3.0, 0.0], &verb), 1);
        let cb = VerbalizerMap::new(vec![5, 3, 4], 6).unwrap();
        assert_eq!(predict_label(&[9.0, 9.0, 9.0, 1.0, 2.0, 0.5], &cb), 2);
    }
}
