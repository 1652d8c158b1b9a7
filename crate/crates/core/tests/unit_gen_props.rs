use proptest::prelude::*;
use respagent_core::rng::seeded;
use respagent_core::unit_gen::*;
use respagent_core::Mat;

fn model(style_tokens: usize, seed: u64) -> UnitGenerator {
    UnitGenerator::new(UnitGenConfig {
        codebook: 8,
        style_tokens,
        layers: 1,
        heads: 2,
        hidden: 12,
        feature_dim: 3,
        text_vocab: 4,
        seed,
        ..UnitGenConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_are_causal(units in proptest::collection::vec(0usize..8, 2..14), cut in any::<prop::sample::Index>(), seed in 0u64..50) {
        let m = model(2, seed);
        let style = Mat::randn(5, 3, 1.0, &mut seeded(seed));
        let k = cut.index(units.len() - 1) + 1;
        let mut changed = units.clone();
        for u in &mut changed[k..] {
            *u = (*u + 3) % 8;
        }
        let a = m.logits_for_inputs(&[1], &style, &units).unwrap();
        let b = m.logits_for_inputs(&[1], &style, &changed).unwrap();
        // row j sees inputs[..j]
        for j in 0..=k {
            prop_assert_eq!(a.row(j), b.row(j));
        }
    }

    #[test]
    fn nll_sums_per_sequence(lens in proptest::collection::vec(1usize..10, 1..5), seed in 0u64..50) {
        let m = model(0, seed);
        let mut rng = seeded(seed);
        let batch: Vec<UnitExample> = lens
            .iter()
            .map(|&l| UnitExample {
                diagnosis: vec![0],
                style_frames: Mat::randn(2, 3, 1.0, &mut rng),
                units: UnitSequence::terminated((0..l).map(|i| (i * 5 + l) % 8).collect()),
            })
            .collect();
        let whole = m.batch_nll(&batch).unwrap();
        let parts: Vec<NllReport> = batch.iter().map(|ex| m.batch_nll(std::slice::from_ref(ex)).unwrap()).collect();
        prop_assert!((whole.sum - parts.iter().map(|p| p.sum).sum::<f64>()).abs() < 1e-9);
        prop_assert_eq!(whole.tokens, lens.iter().map(|l| l + 1).sum::<usize>());
    }

    #[test]
    fn mask_plan_stays_in_span(start in 1usize..5, len in 0usize..40, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let plan = sample_mask(start..start + len, ratio, seed).unwrap();
        prop_assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.masked.iter().all(|t| (start..start + len).contains(t)));
        prop_assert_eq!(plan.masked.len(), ((ratio * len as f64).round_ties_even() as usize).min(len));
    }
}

#[test]
fn style_token_count_sweeps_prompt_length() {
    let frames = Mat::randn(16, 3, 1.0, &mut seeded(3));
    for k in [0, 1, 2, 4, 8, 16] {
        let m = model(k, 1);
        let prompt = m.embed_prompt(&[2, 3], &frames).unwrap();
        assert_eq!(prompt.rows(), 1 + 2 + k);
        let logits = m.teacher_logits(&[2, 3], &frames, &[1, 2, 8], &MaskPlan { target_span: 1..3, masked: vec![], ratio: 0.0 }).unwrap();
        assert_eq!(logits.shape(), (3, 9));
    }
}

#[test]
fn memorizes_a_tiny_corpus() {
    let cfg = UnitGenConfig {
        codebook: 6,
        style_tokens: 2,
        layers: 1,
        heads: 2,
        hidden: 24,
        feature_dim: 3,
        text_vocab: 3,
        mask_ratio: 0.0,
        epochs: 120,
        batch_size: 3,
        learning_rate: 1e-2,
        seed: 5,
        ..UnitGenConfig::default()
    };
    let mut rng = seeded(5);
    let data: Vec<UnitExample> = (0..3)
        .map(|d| UnitExample {
            diagnosis: vec![d],
            style_frames: Mat::randn(4, 3, 1.0, &mut rng),
            units: UnitSequence::terminated(vec![d, (d + 2) % 6, (d + 4) % 6, d]),
        })
        .collect();
    let (model, history) = train_unit_generator(&cfg, &data).unwrap();
    assert!(history.last().unwrap().mean_nll < history[0].mean_nll / 4.0);
    for ex in &data {
        let got = model.generate(&ex.diagnosis, &ex.style_frames, 10, 0, 0.0).unwrap();
        assert_eq!(got, ex.units);
    }
}
