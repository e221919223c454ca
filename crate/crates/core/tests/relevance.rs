use doe_core::data::Example;
use doe_core::model::*;
use doe_core::relevance::*;

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 12,
        max_seq_len: 8,
        eps: 1e-5,
        prompt_len: 0,
    }
}

fn verbalizer() -> VerbalizerMap {
    VerbalizerMap::new(vec![5, 9], 12).unwrap()
}

/// Scales channel `i` of `site` by `alpha` through the weights: output
/// channels through the producing layer's column and bias, inputs of a
/// linear consumer through its row.
fn scale_channel(p: &mut ParameterSet<f64>, site: SiteId, i: usize, alpha: f64) {
    let c = p.config().clone();
    let l = site.layer;
    let cols = |p: &mut ParameterSet<f64>, w: &str, b: &str, rows: usize, cols: usize| {
        let wt = p.get_mut(&format!("layers.{l}.{w}")).unwrap();
        for r in 0..rows {
            wt.data_mut()[r * cols + i] *= alpha;
        }
        p.get_mut(&format!("layers.{l}.{b}")).unwrap().data_mut()[i] *= alpha;
    };
    match site.kind {
        SiteKind::AttnQk => cols(p, "attn.K.weight", "attn.K.bias", c.d_model, c.d_model),
        SiteKind::AttnO => cols(p, "attn.O.weight", "attn.O.bias", c.d_model, c.d_model),
        SiteKind::FfnOut => cols(p, "ffn.W2", "ffn.b2", c.d_ffn, c.d_model),
        SiteKind::AttnV | SiteKind::FfnInter => {
            let (w, width) = if site.kind == SiteKind::AttnV {
                ("attn.O.weight", c.d_model)
            } else {
                ("ffn.W2", c.d_model)
            };
            let wt = p.get_mut(&format!("layers.{l}.{w}")).unwrap();
            for v in &mut wt.data_mut()[i * width..(i + 1) * width] {
                *v *= alpha;
            }
        }
    }
}

fn gold_logit(p: &ParameterSet<f64>, tokens: &[usize], label: usize) -> f64 {
    let logits = forward(&p.weights().unwrap(), None, tokens, &ForwardOptions::default()).unwrap();
    logits[verbalizer().tokens()[label]]
}

// On a one-token input the attribution of a channel is the derivative of
// the gold logit with respect to a uniform scaling of that channel.
#[test]
fn attribution_matches_channel_scaling_derivative() {
    let params = ParameterSet::init(config(), 7).unwrap();
    let sites = ModuleSelector::All.sites(params.config());
    let tokens = vec![Vocabulary::MASK_ID];
    let ex = Example { tokens: tokens.clone(), label: 1 };
    let table = attribution_scores(&params.weights().unwrap(), None, &[ex], &sites, &verbalizer()).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &site in &sites {
        let scores = table.get(site).unwrap();
        for (i, &s) in scores.iter().enumerate() {
            let mut plus = params.clone();
            scale_channel(&mut plus, site, i, 1.0 + h);
            let mut minus = params.clone();
            scale_channel(&mut minus, site, i, 1.0 - h);
            let fd = (gold_logit(&plus, &tokens, 1) - gold_logit(&minus, &tokens, 1)) / (2.0 * h);
            let err = (s - fd.abs()).abs() / fd.abs().max(1e-4);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn attribution_is_activation_times_gradient() {
    let params = ParameterSet::init(config(), 8).unwrap();
    let sites = ModuleSelector::All.sites(params.config());
    let w = params.weights().unwrap();
    let sample = [Example {
        tokens: vec![Vocabulary::MASK_ID],
        label: 0,
    }];
    let attr = attribution_scores(&w, None, &sample, &sites, &verbalizer()).unwrap();
    let act = activation_scores(&w, None, &sample, &sites, &verbalizer()).unwrap();
    let grad = gradient_scores(&w, None, &sample, &sites, &verbalizer()).unwrap();
    for &s in &sites {
        for ((a, x), g) in attr.get(s).unwrap().iter().zip(act.get(s).unwrap()).zip(grad.get(s).unwrap()) {
            assert!((a - x * g).abs() <= 1e-12 * a.max(1e-12), "{s}: {a} != {x}·{g}");
        }
    }
}

#[test]
fn instances_add_up() {
    let params = ParameterSet::init(config(), 9).unwrap();
    let sites = ModuleSelector::Ffn.sites(params.config());
    let w = params.weights().unwrap();
    let a = Example {
        tokens: vec![3, Vocabulary::MASK_ID, 6],
        label: 0,
    };
    let b = Example {
        tokens: vec![Vocabulary::MASK_ID, 7],
        label: 1,
    };
    let one = attribution_scores(&w, None, std::slice::from_ref(&a), &sites, &verbalizer()).unwrap();
    let two = attribution_scores(&w, None, std::slice::from_ref(&b), &sites, &verbalizer()).unwrap();
    let both = attribution_scores(&w, None, &[a, b], &sites, &verbalizer()).unwrap();
    for &s in &sites {
        for ((x, y), z) in one.get(s).unwrap().iter().zip(two.get(s).unwrap()).zip(both.get(s).unwrap()) {
            assert!((x + y - z).abs() <= 1e-12 * z.abs().max(1.0));
        }
    }
    assert_eq!(both.instances, 2);
}

#[test]
fn instances_without_a_mask_are_skipped() {
    let params = ParameterSet::init(config(), 10).unwrap();
    let sites = ModuleSelector::Ffn.sites(params.config());
    let w = params.weights().unwrap();
    let bad = Example {
        tokens: vec![3, 4],
        label: 0,
    };
    let good = Example {
        tokens: vec![Vocabulary::MASK_ID, 4],
        label: 0,
    };
    let t = attribution_scores(&w, None, &[bad, good.clone()], &sites, &verbalizer()).unwrap();
    let only = attribution_scores(&w, None, &[good], &sites, &verbalizer()).unwrap();
    assert_eq!(t.skipped, 1);
    assert_eq!(t.instances, 1);
    assert_eq!(t.get(sites[0]), only.get(sites[0]));
}
