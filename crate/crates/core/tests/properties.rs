use doe_core::localize::*;
use doe_core::model::*;
use doe_core::relevance::random_scores;
use proptest::prelude::*;

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 12,
        max_seq_len: 8,
        eps: 1e-5,
        prompt_len: 2,
    }
}

fn selector() -> impl Strategy<Value = ModuleSelector> {
    prop_oneof![
        Just(ModuleSelector::Ffn),
        Just(ModuleSelector::Attn),
        Just(ModuleSelector::Dense),
        Just(ModuleSelector::All),
    ]
}

proptest! {
    #[test]
    fn keep_count_is_bounded_and_monotone(total in 0usize..500, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(keep_count(lo, total) <= keep_count(hi, total));
        prop_assert!(keep_count(hi, total) <= total);
        prop_assert!(keep_count(lo, total) as f64 >= lo * total as f64 - 1e-6);
        prop_assert_eq!(keep_count(1.0, total), total);
        prop_assert_eq!(keep_count(0.0, total), 0);
    }

    #[test]
    fn plans_keep_the_top_scores(seed in any::<u64>(), keep in 0.0f64..=1.0, sel in selector()) {
        let c = config();
        let table = random_scores(&c, &ModuleSelector::All.sites(&c), seed);
        let opts = PlanOptions { allow_empty: true, per_layer: false };
        let plan = build_plan(&table, &c, keep, sel, opts).unwrap();
        let total: usize = sel.sites(&c).iter().map(|s| s.kind.width(&c)).sum();
        let kept: usize = plan.retained.values().map(Vec::len).sum();
        prop_assert_eq!(kept, keep_count(keep, total));
        let mut min_kept = f64::INFINITY;
        let mut max_dropped = f64::NEG_INFINITY;
        for (site, idx) in &plan.retained {
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            let scores = table.get(*site).unwrap();
            for (i, &s) in scores.iter().enumerate() {
                if idx.binary_search(&i).is_ok() {
                    min_kept = min_kept.min(s);
                } else {
                    max_dropped = max_dropped.max(s);
                }
            }
        }
        prop_assert!(min_kept >= max_dropped);
        prop_assert!(plan.pruning_rate(&c) <= 1.0 - keep + 1e-9);
    }

    #[test]
    fn higher_keep_ratio_retains_a_superset(seed in any::<u64>(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let c = config();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let table = random_scores(&c, &ModuleSelector::All.sites(&c), seed);
        let opts = PlanOptions { allow_empty: true, per_layer: true };
        let small = build_plan(&table, &c, lo, ModuleSelector::All, opts).unwrap();
        let large = build_plan(&table, &c, hi, ModuleSelector::All, opts).unwrap();
        for (site, idx) in &small.retained {
            let big = &large.retained[site];
            prop_assert!(idx.iter().all(|i| big.binary_search(i).is_ok()));
        }
    }

    #[test]
    fn zero_recovery_places_values(width in 1usize..40, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let retained: Vec<usize> = (0..width).filter(|_| rng.random_bool(0.5)).collect();
        let v: Vec<f64> = retained.iter().map(|&i| i as f64 + 0.5).collect();
        let out = zero_recover(&v, &retained, width).unwrap();
        for (i, x) in out.iter().enumerate() {
            let want = if retained.contains(&i) { i as f64 + 0.5 } else { 0.0 };
            prop_assert_eq!(*x, want);
        }
        prop_assert!(zero_recover(&v, &retained, 0).is_err() || retained.is_empty());
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>()) {
        let p = ParameterSet::init(config(), seed).unwrap();
        let bytes = encode_checkpoint(&p);
        let q = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&q), bytes);
        prop_assert_eq!(q.checksum(), p.checksum());
    }

    #[test]
    fn expert_specs_round_trip(seed in any::<u64>(), keep in 0.0f64..=1.0) {
        let c = config();
        let p = ParameterSet::init(c.clone(), 1).unwrap();
        let table = random_scores(&c, &ModuleSelector::All.sites(&c), seed);
        let opts = PlanOptions { allow_empty: true, per_layer: false };
        let spec = ExpertSpec {
            task: "t".into(),
            plan: build_plan(&table, &c, keep, ModuleSelector::Dense, opts).unwrap(),
            prompt: PromptState::init_from_vocab(&p, "t", seed).unwrap().matrix,
            original_checksum: p.checksum(),
            full_accuracy: 0.875,
            expert_accuracy: 0.8125,
        };
        let back = ExpertSpec::from_text(&spec.to_text()).unwrap();
        prop_assert_eq!(back, spec);
    }
}
