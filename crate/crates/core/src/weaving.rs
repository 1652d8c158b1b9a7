//! Input-level modality weaving.
//!
//! Text tokens and a fixed-length audio block share one sequence. The
//! audio block is a run of `[AUDIO_EMBED]` placeholders whose embedding
//! rows are overwritten in place by `Align(features) · W`, so the sequence
//! length and every non-audio position are untouched.
//!
//! Canonical layout produced by [`Vocab::layout`]:
//!
//! ```text
//! [CLS] [DESCRIPTION] text… (padded) [SEP] [AUDIO_EMBED]×T [SEP]
//! ```

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{build_anchor_set, build_global_set, AttentionPattern};
use crate::error::{ensure, Error, Result};
use crate::rng::seeded;
use crate::tensor::Mat;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const DESCRIPTION: usize = 2;
pub const SEP: usize = 3;
pub const AUDIO_EMBED: usize = 4;
pub const UNK: usize = 5;
const NUM_SPECIAL: usize = 6;

/// Default dropout probabilities for text tokens and audio frames.
pub const DEFAULT_P_TEXT: f64 = 0.2;
pub const DEFAULT_P_AUDIO: f64 = 0.1;

/// Framewise audio features, `T̃ x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    frames: Mat,
}

impl FeatureBlock {
    pub fn new(frames: Mat) -> Result<Self> {
        frames.check_finite("feature block")?;
        Ok(Self { frames })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self { frames: Mat::zeros(0, feature_dim) }
    }

    pub fn frames(&self) -> &Mat {
        &self.frames
    }

    pub fn source_len(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Head-crop or zero-pad to exactly `frames` rows.
pub fn align_features(features: &FeatureBlock, frames: usize) -> Result<Mat> {
    ensure!(frames >= 1, "alignment target must be >= 1 frame");
    let src = features.frames();
    let mut out = Mat::zeros(frames, src.cols());
    for i in 0..frames.min(src.rows()) {
        out.set_row(i, src.row(i));
    }
    Ok(out)
}

/// `aligned · W`.
pub fn project_audio(aligned: &Mat, w: &Mat) -> Result<Mat> {
    aligned.matmul(w)
}

/// Where the sentinels and the audio block sit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeaveLayout {
    pub cls_pos: usize,
    pub desc_pos: usize,
    pub audio_start: usize,
    pub frames: usize,
}

impl WeaveLayout {
    pub fn audio_span(&self) -> Range<usize> {
        self.audio_start..self.audio_start + self.frames
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternConfig {
    pub window: usize,
    pub anchor_stride: usize,
    /// Test-only switch: leave `[CLS]` out of the global set.
    #[serde(default = "yes")]
    pub cls_global: bool,
}

fn yes() -> bool {
    true
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            window: crate::attention::DEFAULT_WINDOW,
            anchor_stride: crate::attention::DEFAULT_ANCHOR_STRIDE,
            cls_global: true,
        }
    }
}

/// The strategic-global pattern for a woven layout of length `n`.
pub fn layout_pattern(n: usize, layout: &WeaveLayout, cfg: &PatternConfig) -> Result<AttentionPattern> {
    let anchors = build_anchor_set(layout.frames, cfg.anchor_stride)?;
    let mut global = build_global_set(n, layout.cls_pos, layout.desc_pos, layout.audio_start, &anchors)?;
    if !cfg.cls_global {
        global.retain(|&g| g != layout.cls_pos);
    }
    AttentionPattern::new(n, cfg.window, global, layout.audio_start, layout.frames)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WovenSequence {
    pub embeddings: Mat,
    pub token_ids: Vec<usize>,
    pub audio_span: Range<usize>,
    pub global_flags: Vec<bool>,
    pub pattern: AttentionPattern,
}

impl WovenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Validate that `tokens` and `layout` agree.
pub fn check_layout(tokens: &[usize], layout: &WeaveLayout) -> Result<()> {
    let n = tokens.len();
    let span = layout.audio_span();
    ensure!(span.end <= n, "audio span {span:?} exceeds sequence length {n}");
    ensure!(layout.frames >= 1, "audio block must hold at least one frame");
    for (name, pos) in [("[CLS]", layout.cls_pos), ("[DESCRIPTION]", layout.desc_pos)] {
        ensure!(pos < n, "{name} position {pos} out of range");
        ensure!(!span.contains(&pos), "{name} at {pos} overlaps the audio span {span:?}");
    }
    ensure!(layout.cls_pos != layout.desc_pos, "[CLS] and [DESCRIPTION] overlap");
    ensure!(
        tokens[span.clone()].iter().all(|&t| t == AUDIO_EMBED),
        "audio span {span:?} is not reserved with [AUDIO_EMBED] placeholders"
    );
    Ok(())
}

/// Build the single token-aligned stream.
pub fn weave(
    tokens: &[usize],
    text_embed: &Mat,
    audio: &FeatureBlock,
    w: &Mat,
    layout: &WeaveLayout,
    pattern_cfg: &PatternConfig,
) -> Result<WovenSequence> {
    check_layout(tokens, layout)?;
    ensure!(
        audio.feature_dim() == w.rows(),
        "feature width {} does not match projection rows {}",
        audio.feature_dim(),
        w.rows()
    );
    ensure!(w.cols() == text_embed.cols(), "projection width differs from embedding width");
    if let Some(&bad) = tokens.iter().find(|&&t| t >= text_embed.rows()) {
        return Err(Error::invalid(format!("token id {bad} outside embedding table")));
    }
    let n = tokens.len();
    let mut embeddings = Mat::zeros(n, text_embed.cols());
    for (i, &t) in tokens.iter().enumerate() {
        embeddings.set_row(i, text_embed.row(t));
    }
    let projected = project_audio(&align_features(audio, layout.frames)?, w)?;
    for r in 0..layout.frames {
        embeddings.set_row(layout.audio_start + r, projected.row(r));
    }
    let pattern = layout_pattern(n, layout, pattern_cfg)?;
    Ok(WovenSequence {
        embeddings,
        token_ids: tokens.to_vec(),
        audio_span: layout.audio_span(),
        global_flags: pattern.global_flags().to_vec(),
        pattern,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub p_text: f64,
    pub p_audio: f64,
    /// Scale surviving rows by `1/(1-p)`; off by default.
    #[serde(default)]
    pub rescale: bool,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self { p_text: DEFAULT_P_TEXT, p_audio: DEFAULT_P_AUDIO, rescale: false }
    }
}

fn is_protected(token: usize) -> bool {
    matches!(token, PAD | CLS | DESCRIPTION | SEP)
}

/// One multiplier per sequence row: 0 for dropped rows.
pub fn dropout_factors(token_ids: &[usize], audio_span: &Range<usize>, cfg: &DropoutConfig, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    token_ids
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            // one draw per row keeps the stream aligned with positions
            let u: f64 = rng.random();
            let p = if audio_span.contains(&i) {
                cfg.p_audio
            } else if is_protected(t) {
                return 1.0;
            } else {
                cfg.p_text
            };
            if u < p {
                0.0
            } else if cfg.rescale && p < 1.0 {
                1.0 / (1.0 - p)
            } else {
                1.0
            }
        })
        .collect()
}

/// Zero whole text-token and audio-frame rows; sentinels are never dropped.
pub fn modality_dropout(seq: &WovenSequence, cfg: &DropoutConfig, seed: u64) -> Result<WovenSequence> {
    ensure!(
        (0.0..=1.0).contains(&cfg.p_text) && (0.0..=1.0).contains(&cfg.p_audio),
        "dropout probabilities must lie in [0, 1]"
    );
    let factors = dropout_factors(&seq.token_ids, &seq.audio_span, cfg, seed);
    let mut out = seq.clone();
    for (i, &f) in factors.iter().enumerate() {
        if f != 1.0 {
            out.embeddings.row_mut(i).iter_mut().for_each(|x| *x *= f);
        }
    }
    Ok(out)
}

/// Lowercased alphanumeric words; punctuation separates and is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whitespace/punctuation vocabulary with the reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: BTreeMap<String, usize>,
}

impl Vocab {
    /// Ids are assigned in sorted word order after the reserved range.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sorted: Vec<String> = words.into_iter().flat_map(|w| tokenize(w.as_ref())).collect();
        sorted.sort();
        sorted.dedup();
        let words = sorted.into_iter().enumerate().map(|(i, w)| (w, NUM_SPECIAL + i)).collect();
        Self { words }
    }

    pub fn len(&self) -> usize {
        NUM_SPECIAL + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.words.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Canonical token list and layout for `text_len` text slots and
    /// `frames` audio placeholders. Text is truncated or padded with `[PAD]`.
    pub fn layout(&self, text: &str, text_len: usize, frames: usize) -> (Vec<usize>, WeaveLayout) {
        let mut ids = vec![CLS, DESCRIPTION];
        let mut body = self.encode(text);
        body.resize(text_len, PAD);
        ids.extend(body);
        ids.push(SEP);
        let audio_start = ids.len();
        ids.extend(std::iter::repeat_n(AUDIO_EMBED, frames));
        ids.push(SEP);
        (ids, WeaveLayout { cls_pos: 0, desc_pos: 1, audio_start, frames })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn block(rows: usize, cols: usize, seed: u64) -> FeatureBlock {
        FeatureBlock::new(Mat::randn(rows, cols, 1.0, &mut seeded(seed))).unwrap()
    }

    #[test]
    fn align_crops_and_pads() {
        let long = block(600, 3, 1);
        let a = align_features(&long, 496).unwrap();
        assert_eq!(a.as_slice(), &long.frames().as_slice()[..496 * 3]);
        let exact = block(496, 3, 2);
        assert_eq!(&align_features(&exact, 496).unwrap(), exact.frames());
        let short = block(300, 3, 3);
        let a = align_features(&short, 496).unwrap();
        assert!(a.slice_rows(300, 496).as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(a.slice_rows(0, 300), *short.frames());
        assert!(align_features(&short, 0).is_err());
    }

    #[test]
    fn feature_block_rejects_nan() {
        let mut m = Mat::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(FeatureBlock::new(m).is_err());
    }

    #[test]
    fn projection_basis_rows() {
        let mut rng = seeded(4);
        let w = Mat::randn(3, 5, 1.0, &mut rng);
        let mut onehot = Mat::zeros(2, 3);
        onehot[(1, 2)] = 1.0;
        let out = project_audio(&onehot, &w).unwrap();
        assert_eq!(out.row(1), w.row(2));
        let x = Mat::randn(4, 3, 1.0, &mut rng);
        assert_eq!(project_audio(&x, &Mat::identity(3)).unwrap(), x);
        assert!(project_audio(&x, &Mat::zeros(4, 4)).is_err());
    }

    #[test]
    fn weave_rejects_overlap_and_unreserved_span() {
        let vocab = Vocab::from_words(["wheeze"]);
        let (ids, layout) = vocab.layout("wheeze", 4, 8);
        let table = Mat::zeros(vocab.len(), 4);
        let w = Mat::zeros(3, 4);
        let audio = block(8, 3, 5);
        let cfg = PatternConfig { window: 2, anchor_stride: 4, cls_global: true };
        assert!(weave(&ids, &table, &audio, &w, &layout, &cfg).is_ok());
        let overlap = WeaveLayout { cls_pos: layout.audio_start + 1, ..layout };
        assert!(weave(&ids, &table, &audio, &w, &overlap, &cfg).is_err());
        let shifted = WeaveLayout { audio_start: layout.audio_start - 1, ..layout };
        assert!(weave(&ids, &table, &audio, &w, &shifted, &cfg).is_err());
    }

    #[test]
    fn vocab_layout_shape() {
        let vocab = Vocab::from_words(["Fine crackles, heard.", "wheeze"]);
        assert_eq!(vocab.encode("WHEEZE and crackles"), vec![vocab.id("wheeze"), UNK, vocab.id("crackles")]);
        let (ids, layout) = vocab.layout("wheeze", 3, 5);
        assert_eq!(ids.len(), 2 + 3 + 1 + 5 + 1);
        assert_eq!(layout.audio_start, 6);
        assert_eq!(ids[layout.audio_span()], [AUDIO_EMBED; 5]);
        assert_eq!(*ids.last().unwrap(), SEP);
    }
}
