use std::collections::BTreeMap;

use doe_core::localize::*;
use doe_core::model::*;
use doe_core::relevance::random_scores;
use doe_core::tensor::Tensor;
use doe_core::DoeError;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 16,
        max_seq_len: 16,
        eps: 1e-5,
        prompt_len: 3,
    }
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    let mut t: Vec<usize> = (0..n).map(|_| rng.random_range(3..vocab)).collect();
    let m = rng.random_range(0..n);
    t[m] = Vocabulary::MASK_ID;
    t
}

fn random_plan(rng: &mut ChaCha8Rng, config: &ModelConfig, sites: &[SiteId]) -> PrunePlan {
    let mut retained = BTreeMap::new();
    for &s in sites {
        let w = s.kind.width(config);
        let k = rng.random_range(0..=w);
        let mut idx = sample(rng, w, k).into_vec();
        idx.sort_unstable();
        retained.insert(s, idx);
    }
    PrunePlan {
        selector: ModuleSelector::All,
        keep_ratio: 0.5,
        retained,
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_equivalence(params: &ParameterSet<f64>, plan: &PrunePlan, prompt: &Tensor<f64>, toks: &[usize]) -> f64 {
    let pruned = apply_plan(params, plan).unwrap();
    let pw = pruned.weights().unwrap();
    let fw = params.weights().unwrap();
    let masks = plan.masks(params.config());
    let a = forward(&pw, Some(prompt), toks, &ForwardOptions::default()).unwrap();
    let b = forward(
        &fw,
        Some(prompt),
        toks,
        &ForwardOptions {
            taps: None,
            masks: Some(&masks),
        },
    )
    .unwrap();
    max_diff(&a, &b)
}

fn prompt_for(config: &ModelConfig, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.prompt_len * config.d_model;
    Tensor::matrix(config.prompt_len, config.d_model, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn ffn_plans_match_masked_forward() {
    let c = small();
    let params = ParameterSet::init(c.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sites = ModuleSelector::Ffn.sites(&c);
    for i in 0..20 {
        let plan = random_plan(&mut rng, &c, &sites);
        let toks = tokens(&mut rng, 6, c.vocab_size);
        let d = check_equivalence(&params, &plan, &prompt_for(&c, i), &toks);
        assert!(d <= 1e-10, "plan {i}: {d}");
    }
}

#[test]
fn attention_plans_match_masked_forward() {
    let c = small();
    let params = ParameterSet::init(c.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kinds in [
        vec![SiteKind::AttnQk],
        vec![SiteKind::AttnV],
        vec![SiteKind::AttnO],
        SiteKind::ALL.to_vec(),
    ] {
        let sites: Vec<SiteId> = (0..c.n_layers).flat_map(|l| kinds.iter().map(move |&k| SiteId::new(l, k))).collect();
        for i in 0..10 {
            let plan = random_plan(&mut rng, &c, &sites);
            let toks = tokens(&mut rng, 5, c.vocab_size);
            let d = check_equivalence(&params, &plan, &prompt_for(&c, i), &toks);
            assert!(d <= 1e-10, "{kinds:?} plan {i}: {d}");
        }
    }
}

#[test]
fn half_of_v_channels_with_o_rows() {
    let c = small();
    let params = ParameterSet::init(c.clone(), 5).unwrap();
    let mut plan = PrunePlan::full(&c, ModuleSelector::Attn);
    plan.retained.insert(SiteId::new(0, SiteKind::AttnV), vec![0, 2, 5, 7]);
    let pruned = attention_adjacency_prune(&params, &plan).unwrap();
    assert_eq!(pruned.tensors()["layers.0.attn.V.weight"].shape(), &[8, 4]);
    assert_eq!(pruned.tensors()["layers.0.attn.O.weight"].shape(), &[4, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let toks = tokens(&mut rng, 7, c.vocab_size);
    assert!(check_equivalence(&params, &plan, &prompt_for(&c, 0), &toks) <= 1e-10);
}

#[test]
fn key_channels_prune_query_side_too() {
    let c = small();
    let params = ParameterSet::init(c.clone(), 7).unwrap();
    let mut plan = PrunePlan::full(&c, ModuleSelector::Attn);
    plan.retained.insert(SiteId::new(1, SiteKind::AttnQk), vec![1, 3, 4, 6]);
    let pruned = attention_adjacency_prune(&params, &plan).unwrap();
    assert_eq!(pruned.tensors()["layers.1.attn.Q.weight"].shape(), &[8, 4]);
    assert_eq!(pruned.tensors()["layers.1.attn.K.weight"].shape(), &[8, 4]);

    // Q·Kᵀ over retained channels equals the full product with the other
    // K channels zeroed.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let keep = [1, 3, 4, 6];
    let short: f64 = keep.iter().map(|&i| q[i] * k[i]).sum();
    let kz = zero_recover(&keep.iter().map(|&i| k[i]).collect::<Vec<_>>(), &keep, 8).unwrap();
    let full: f64 = q.iter().zip(&kz).map(|(a, b)| a * b).sum();
    assert!((short - full).abs() <= 1e-15);

    let toks = tokens(&mut rng, 4, c.vocab_size);
    assert!(check_equivalence(&params, &plan, &prompt_for(&c, 1), &toks) <= 1e-10);
}

#[test]
fn emptied_heads_match_masked_forward() {
    let c = small();
    let params = ParameterSet::init(c.clone(), 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut plan = PrunePlan::full(&c, ModuleSelector::All);
    // head 1 loses every key channel, head 0 every value channel
    plan.retained.insert(SiteId::new(0, SiteKind::AttnQk), vec![0, 2]);
    plan.retained.insert(SiteId::new(1, SiteKind::AttnV), vec![5, 6]);
    let toks = tokens(&mut rng, 6, c.vocab_size);
    assert!(check_equivalence(&params, &plan, &prompt_for(&c, 3), &toks) <= 1e-10);
}

#[test]
fn empty_heads_are_plan_errors() {
    let c = small();
    let params = ParameterSet::init(c.clone(), 9).unwrap();
    let mut plan = PrunePlan::full(&c, ModuleSelector::Attn);
    plan.retained.insert(SiteId::new(0, SiteKind::AttnQk), vec![0, 1, 2, 3]);
    assert!(matches!(attention_adjacency_prune(&params, &plan), Err(DoeError::Plan(_))));
    let mut ffn = PrunePlan::full(&c, ModuleSelector::Ffn);
    ffn.retained.insert(SiteId::new(0, SiteKind::FfnInter), vec![]);
    assert!(matches!(attention_adjacency_prune(&params, &ffn), Err(DoeError::Plan(_))));
}

#[test]
fn retain_all_is_bit_identical() {
    let c = small();
    let params = ParameterSet::init(c.clone(), 10).unwrap();
    let plan = PrunePlan::full(&c, ModuleSelector::All);
    let pruned = apply_plan(&params, &plan).unwrap();
    assert_eq!(pruned.tensors(), params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let toks = tokens(&mut rng, 6, c.vocab_size);
    let p = prompt_for(&c, 2);
    let a = forward(&pruned.weights().unwrap(), Some(&p), &toks, &ForwardOptions::default()).unwrap();
    let b = forward(&params.weights().unwrap(), Some(&p), &toks, &ForwardOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn restore_is_bit_exact_and_checked() {
    let c = small();
    let params = ParameterSet::init(c.clone(), 12).unwrap();
    let bytes = encode_checkpoint(&params);
    let sites = ModuleSelector::All.sites(&c);
    let table = random_scores(&c, &sites, 3);
    let plan = build_plan(&table, &c, 0.6, ModuleSelector::All, PlanOptions { allow_empty: true, per_layer: false }).unwrap();
    let pruned = apply_plan(&params, &plan).unwrap();
    assert_ne!(pruned.num_params(), params.num_params());
    let back = restore(&bytes, &pruned).unwrap();
    assert_eq!(back.checksum(), params.checksum());
    let again = restore(&bytes, &pruned).unwrap();
    assert_eq!(again, back);

    let other = encode_checkpoint(&ParameterSet::init(c, 13).unwrap());
    assert!(matches!(restore(&other, &pruned), Err(DoeError::Integrity { .. })));
}

#[test]
fn parameter_accounting_matches_site_fans() {
    let c = small();
    let params = ParameterSet::init(c.clone(), 14).unwrap();
    let d = c.d_model;
    let f = c.d_ffn;
    let inter = SiteId::new(0, SiteKind::FfnInter);
    let out = SiteId::new(1, SiteKind::FfnOut);
    let mut plan = PrunePlan::full(&c, ModuleSelector::Ffn);
    plan.retained.insert(inter, (0..10).collect());
    plan.retained.insert(out, vec![0, 1, 2]);
    let pruned = apply_plan(&params, &plan).unwrap();
    let acc = ParamAccounting::of(&params, &pruned);
    // intermediate neuron: W1 column + b1 entry + W2 row; output: W2 column + b2 entry
    assert_eq!(acc.removed, (f - 10) * (2 * d + 1) + (d - 3) * (f + 1));
    assert_eq!(acc.ffn_total, 2 * (2 * d * f + f + d));
    assert!(acc.model_rate() < acc.ffn_rate());
}

#[test]
fn built_plans_satisfy_invariants() {
    let c = small();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for sel in [ModuleSelector::Ffn, ModuleSelector::Attn, ModuleSelector::Dense, ModuleSelector::All] {
        let sites = ModuleSelector::All.sites(&c);
        let table = random_scores(&c, &sites, rng.random());
        let p: f64 = rng.random_range(0.0..=1.0);
        let opts = PlanOptions {
            allow_empty: true,
            per_layer: false,
        };
        let plan = build_plan(&table, &c, p, sel, opts).unwrap();
        plan.validate(&c).unwrap();
        let total: usize = sel.sites(&c).iter().map(|s| s.kind.width(&c)).sum();
        let kept: usize = plan.retained.values().map(Vec::len).sum();
        assert_eq!(kept, keep_count(p, total));
        assert_eq!(plan.retained.keys().copied().collect::<Vec<_>>(), sel.sites(&c));
    }
}
