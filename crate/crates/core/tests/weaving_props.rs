use proptest::prelude::*;
use respagent_core::rng::seeded;
use respagent_core::weaving::*;
use respagent_core::Mat;

fn setup(text_len: usize, frames: usize, src_frames: usize, seed: u64) -> (Vec<usize>, WeaveLayout, Mat, FeatureBlock, Mat) {
    let vocab = Vocab::from_words(["wheeze", "crackle", "normal", "breath"]);
    let (tokens, layout) = vocab.layout("normal breath with wheeze and crackle", text_len, frames);
    let mut rng = seeded(seed);
    let table = Mat::randn(vocab.len(), 8, 1.0, &mut rng);
    let audio = FeatureBlock::new(Mat::randn(src_frames, 5, 1.0, &mut rng)).unwrap();
    let w = Mat::randn(5, 8, 0.3, &mut rng);
    (tokens, layout, table, audio, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weaving_is_in_place(text_len in 1usize..20, frames in 1usize..40, src in 0usize..60, seed in any::<u64>()) {
        let (tokens, layout, table, audio, w) = setup(text_len, frames, src, seed);
        let seq = weave(&tokens, &table, &audio, &w, &layout, &PatternConfig::default()).unwrap();
        prop_assert_eq!(seq.len(), tokens.len());
        prop_assert_eq!(&seq.token_ids, &tokens);
        for i in (0..tokens.len()).filter(|i| !layout.audio_span().contains(i)) {
            prop_assert_eq!(seq.embeddings.row(i), table.row(tokens[i]));
        }
    }

    #[test]
    fn weaving_and_dropout_are_deterministic(seed in any::<u64>(), drop_seed in any::<u64>()) {
        let (tokens, layout, table, audio, w) = setup(12, 16, 20, seed);
        let a = weave(&tokens, &table, &audio, &w, &layout, &PatternConfig::default()).unwrap();
        let b = weave(&tokens, &table, &audio, &w, &layout, &PatternConfig::default()).unwrap();
        prop_assert_eq!(&a, &b);
        let cfg = DropoutConfig { p_text: 0.4, p_audio: 0.3, rescale: false };
        let once = modality_dropout(&a, &cfg, drop_seed).unwrap();
        prop_assert_eq!(&once, &modality_dropout(&b, &cfg, drop_seed).unwrap());
        let twice = modality_dropout(&once, &cfg, drop_seed).unwrap();
        prop_assert_eq!(&once, &twice);
        for &s in &[CLS, DESCRIPTION, SEP] {
            for i in tokens.iter().enumerate().filter(|(_, &t)| t == s).map(|(i, _)| i) {
                prop_assert_eq!(once.embeddings.row(i), a.embeddings.row(i));
            }
        }
    }

    #[test]
    fn alignment_is_idempotent(src in 0usize..80, frames in 1usize..64, seed in any::<u64>()) {
        let block = FeatureBlock::new(Mat::randn(src, 3, 1.0, &mut seeded(seed))).unwrap();
        let once = align_features(&block, frames).unwrap();
        let twice = align_features(&FeatureBlock::new(once.clone()).unwrap(), frames).unwrap();
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn audio_rows_are_the_projected_features() {
    let (tokens, layout, table, audio, w) = setup(6, 10, 14, 3);
    let seq = weave(&tokens, &table, &audio, &w, &layout, &PatternConfig::default()).unwrap();
    let expected = project_audio(&align_features(&audio, 10).unwrap(), &w).unwrap();
    for r in 0..10 {
        assert_eq!(seq.embeddings.row(layout.audio_start + r), expected.row(r));
    }
    assert!(seq.global_flags[layout.cls_pos] && seq.global_flags[layout.desc_pos]);
}
