//! Toy long-context classifier over woven sequences.
//!
//! Pre-norm transformer blocks whose attention is the strategic-global
//! sparse kernel, a final layer norm, and one affine head reading the
//! `[CLS]` position. Sinusoidal positions are added inside the model so a
//! [`WovenSequence`] stays a pure lookup/projection product.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{default_scale, AttentionPattern};
use crate::autodiff::{focal_ce_row, Activation, Bound, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::params::{sum_grads, Adam, AdamConfig, ParamId, ParamStore};
use crate::rng::{derive_seed, derived, seeded};
use crate::tensor::{argmax, softmax_in_place, Mat};
use crate::weaving::{align_features, dropout_factors, layout_pattern, DropoutConfig, FeatureBlock, PatternConfig, WeaveLayout, WovenSequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Ce,
    WeightedCe,
    Focal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoserConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub window: usize,
    pub anchor_stride: usize,
    pub classes: usize,
    pub loss_kind: LossKind,
    pub focal_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Text slots between `[DESCRIPTION]` and the first `[SEP]`.
    pub text_len: usize,
    /// Audio block length `T`.
    pub frames: usize,
    pub ffn_mult: usize,
    pub tail_k: usize,
    /// `None` disables modality dropout during training.
    pub dropout: Option<DropoutConfig>,
    /// Test-only: drop `[CLS]` from the global set.
    pub cls_global: bool,
    /// Test-only: route attention through the dense masked oracle.
    pub dense_attention: bool,
}

impl Default for DiagnoserConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            window: crate::attention::DEFAULT_WINDOW,
            anchor_stride: crate::attention::DEFAULT_ANCHOR_STRIDE,
            classes: 16,
            loss_kind: LossKind::Ce,
            focal_gamma: 2.0,
            epochs: 10,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
            text_len: 128,
            frames: 64,
            ffn_mult: 2,
            tail_k: 8,
            dropout: Some(DropoutConfig::default()),
            cls_global: true,
            dense_attention: false,
        }
    }
}

impl DiagnoserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.heads >= 1 && self.hidden % self.heads == 0, "hidden {} not divisible by heads {}", self.hidden, self.heads);
        ensure!(self.classes >= 2, "need at least two classes");
        ensure!(self.focal_gamma >= 0.0, "focal gamma must be >= 0");
        ensure!(self.frames >= 1 && self.window >= 1 && self.anchor_stride >= 1, "frames, window and stride must be >= 1");
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        ensure!(self.tail_k <= self.classes, "tail_k exceeds class count");
        Ok(())
    }

    pub fn pattern_config(&self) -> PatternConfig {
        PatternConfig { window: self.window, anchor_stride: self.anchor_stride, cls_global: self.cls_global }
    }
}

/// One labelled clip ready for weaving.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub layout: WeaveLayout,
    pub features: FeatureBlock,
    pub label: usize,
    pub domain: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DiagnoserIds {
    text_embed: ParamId,
    audio_proj: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Diagnoser {
    pub cfg: DiagnoserConfig,
    pub params: ParamStore,
    ids: DiagnoserIds,
}

/// Sinusoidal position table, `n x h`.
pub fn positional_encoding(n: usize, h: usize) -> Mat {
    let mut m = Mat::zeros(n, h);
    for pos in 0..n {
        for i in 0..h {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / h as f64);
            let angle = pos as f64 * freq;
            m[(pos, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

/// Shared pre-norm transformer encoder used by the diagnoser and the unit generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct Encoder {
    blocks: Vec<BlockIds>,
    heads: usize,
}

impl Encoder {
    pub(crate) fn new(store: &mut ParamStore, prefix: &str, layers: usize, hidden: usize, heads: usize, ffn_mult: usize, rng: &mut crate::rng::Rng) -> Self {
        let h = hidden;
        let f = hidden * ffn_mult.max(1);
        let std_h = 1.0 / (h as f64).sqrt();
        let std_f = 1.0 / (f as f64).sqrt();
        let residual_scale = 1.0 / (2.0 * layers.max(1) as f64).sqrt();
        let blocks = (0..layers)
            .map(|l| {
                let p = |s: &str| format!("{prefix}.{l}.{s}");
                BlockIds {
                    ln1_g: store.add(p("ln1_g"), Mat::filled(1, h, 1.0)),
                    ln1_b: store.add(p("ln1_b"), Mat::zeros(1, h)),
                    wq: store.add(p("wq"), Mat::randn(h, h, std_h, rng)),
                    wk: store.add(p("wk"), Mat::randn(h, h, std_h, rng)),
                    wv: store.add(p("wv"), Mat::randn(h, h, std_h, rng)),
                    wo: store.add(p("wo"), Mat::randn(h, h, std_h * residual_scale, rng)),
                    ln2_g: store.add(p("ln2_g"), Mat::filled(1, h, 1.0)),
                    ln2_b: store.add(p("ln2_b"), Mat::zeros(1, h)),
                    w1: store.add(p("w1"), Mat::randn(h, f, std_h, rng)),
                    b1: store.add(p("b1"), Mat::zeros(1, f)),
                    w2: store.add(p("w2"), Mat::randn(f, h, std_f * residual_scale, rng)),
                    b2: store.add(p("b2"), Mat::zeros(1, h)),
                }
            })
            .collect();
        Self { blocks, heads }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var, pattern: &Arc<AttentionPattern>, dense: bool) -> Var {
        let hidden = tape.value(x).cols();
        let scale = default_scale(hidden / self.heads);
        for b in &self.blocks {
            let h = tape.layer_norm(x, p[b.ln1_g], p[b.ln1_b]);
            let q = tape.matmul(h, p[b.wq]);
            let k = tape.matmul(h, p[b.wk]);
            let v = tape.matmul(h, p[b.wv]);
            let a = tape.attention(q, k, v, pattern, self.heads, scale, dense);
            let o = tape.matmul(a, p[b.wo]);
            x = tape.add(x, o);
            let h = tape.layer_norm(x, p[b.ln2_g], p[b.ln2_b]);
            let f = tape.affine(h, p[b.w1], p[b.b1]);
            let f = tape.act(f, Activation::Gelu);
            let f = tape.affine(f, p[b.w2], p[b.b2]);
            x = tape.add(x, f);
        }
        x
    }
}

impl Diagnoser {
    pub fn new(cfg: DiagnoserConfig, vocab_size: usize, feature_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derived(cfg.seed, 0xD1A6);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let text_embed = store.add("text_embed", Mat::randn(vocab_size, h, 0.5, &mut rng));
        let audio_proj = store.add("audio_proj", Mat::randn(feature_dim, h, 1.0 / (feature_dim.max(1) as f64).sqrt(), &mut rng));
        let encoder = Encoder::new(&mut store, "block", cfg.layers, h, cfg.heads, cfg.ffn_mult, &mut rng);
        let ids = DiagnoserIds {
            text_embed,
            audio_proj,
            blocks: encoder.blocks,
            lnf_g: store.add("lnf_g", Mat::filled(1, h, 1.0)),
            lnf_b: store.add("lnf_b", Mat::zeros(1, h)),
            head_w: store.add("head_w", Mat::randn(h, cfg.classes, 0.02, &mut rng)),
            head_b: store.add("head_b", Mat::zeros(1, cfg.classes)),
        };
        Ok(Self { cfg, params: store, ids })
    }

    /// Rebuild a model around stored parameters (same config, same layout).
    pub fn with_params(cfg: DiagnoserConfig, params: ParamStore) -> Result<Self> {
        let text = params.values().first().ok_or_else(|| Error::invalid("empty parameter store"))?;
        let audio = &params.values()[1];
        let mut probe = Self::new(cfg, text.rows(), audio.rows())?;
        ensure!(probe.params.names() == params.names(), "parameter layout does not match config");
        for (a, b) in probe.params.values().iter().zip(params.values()) {
            ensure!(a.shape() == b.shape(), "parameter shape mismatch");
        }
        probe.params = params;
        Ok(probe)
    }

    pub fn text_embedding(&self) -> &Mat {
        self.params.get(self.ids.text_embed)
    }

    pub fn audio_projection(&self) -> &Mat {
        self.params.get(self.ids.audio_proj)
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.ids.head_w, self.ids.head_b)
    }

    fn encoder(&self) -> Encoder {
        Encoder { blocks: self.ids.blocks.clone(), heads: self.cfg.heads }
    }

    fn logits_from_embeddings(&self, tape: &mut Tape, p: &Bound, emb: Var, pattern: &Arc<AttentionPattern>, cls_pos: usize) -> Var {
        let (n, h) = tape.value(emb).shape();
        let pos = tape.leaf(positional_encoding(n, h));
        let x = tape.add(emb, pos);
        let x = self.encoder().forward(tape, p, x, pattern, self.cfg.dense_attention);
        let cls = tape.select_rows(x, &[cls_pos]);
        let cls = tape.layer_norm(cls, p[self.ids.lnf_g], p[self.ids.lnf_b]);
        tape.affine(cls, p[self.ids.head_w], p[self.ids.head_b])
    }

    /// In-tape weaving: identical values to [`crate::weaving::weave`], but
    /// differentiable in the embedding table and projection.
    fn woven_embeddings(&self, tape: &mut Tape, p: &Bound, ex: &Example, drop_seed: Option<u64>) -> Result<Var> {
        let aligned = align_features(&ex.features, ex.layout.frames)?;
        let text = tape.gather(p[self.ids.text_embed], &ex.tokens);
        let audio_in = tape.leaf(aligned);
        let audio = tape.matmul(audio_in, p[self.ids.audio_proj]);
        let mut emb = tape.splice(text, audio, ex.layout.audio_start);
        if let (Some(seed), Some(cfg)) = (drop_seed, self.cfg.dropout.as_ref()) {
            let factors = dropout_factors(&ex.tokens, &ex.layout.audio_span(), cfg, seed);
            emb = tape.row_scale(emb, &factors);
        }
        Ok(emb)
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        ensure!(ex.label < self.cfg.classes, "label {} outside [0, {})", ex.label, self.cfg.classes);
        ensure!(ex.layout.frames == self.cfg.frames, "example has {} audio frames, model expects {}", ex.layout.frames, self.cfg.frames);
        ensure!(ex.features.feature_dim() == self.audio_projection().rows(), "feature width mismatch");
        let vocab = self.text_embedding().rows();
        ensure!(ex.tokens.iter().all(|&t| t < vocab), "token id outside vocabulary");
        crate::weaving::check_layout(&ex.tokens, &ex.layout)
    }

    fn example_pattern(&self, ex: &Example) -> Result<Arc<AttentionPattern>> {
        Ok(Arc::new(layout_pattern(ex.tokens.len(), &ex.layout, &self.cfg.pattern_config())?))
    }

    /// Logits for an already woven sequence (eval mode).
    pub fn classify(&self, seq: &WovenSequence) -> Result<Vec<f64>> {
        ensure!(seq.embeddings.cols() == self.cfg.hidden, "sequence width {} != hidden {}", seq.embeddings.cols(), self.cfg.hidden);
        ensure!(seq.pattern.seq_len() == seq.embeddings.rows(), "pattern length does not match sequence");
        let cls_pos = seq.token_ids.iter().position(|&t| t == crate::weaving::CLS).ok_or_else(|| Error::invalid("sequence has no [CLS]"))?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let emb = tape.leaf(seq.embeddings.clone());
        let pattern = Arc::new(seq.pattern.clone());
        let logits = self.logits_from_embeddings(&mut tape, &p, emb, &pattern, cls_pos);
        Ok(tape.value(logits).row(0).to_vec())
    }

    /// Weave with this model's own table and projection.
    pub fn weave(&self, ex: &Example) -> Result<WovenSequence> {
        crate::weaving::weave(&ex.tokens, self.text_embedding(), &ex.features, self.audio_projection(), &ex.layout, &self.cfg.pattern_config())
    }

    /// Logits for one example (eval mode, no dropout).
    pub fn logits(&self, ex: &Example) -> Result<Vec<f64>> {
        self.check_example(ex)?;
        self.logits_with(&self.params, ex)
    }

    fn logits_with(&self, store: &ParamStore, ex: &Example) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let emb = self.woven_embeddings(&mut tape, &p, ex, None)?;
        let pattern = self.example_pattern(ex)?;
        let logits = self.logits_from_embeddings(&mut tape, &p, emb, &pattern, ex.layout.cls_pos);
        Ok(tape.value(logits).row(0).to_vec())
    }

    /// Per-example loss and parameter gradients, loss scaled by `norm`.
    fn loss_and_grads(&self, ex: &Example, weight: f64, norm: f64, drop_seed: Option<u64>) -> Result<(f64, Vec<f64>, Vec<Mat>)> {
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let emb = self.woven_embeddings(&mut tape, &p, ex, drop_seed)?;
        let pattern = self.example_pattern(ex)?;
        let logits = self.logits_from_embeddings(&mut tape, &p, emb, &pattern, ex.layout.cls_pos);
        let gamma = if self.cfg.loss_kind == LossKind::Focal { self.cfg.focal_gamma } else { 0.0 };
        let loss = tape.focal_ce(logits, &[ex.label], &[weight], gamma, norm);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss).for_params(p.vars(), &self.params);
        Ok((value, tape.value(logits).row(0).to_vec(), grads))
    }

    /// Mean configured loss over `batch` evaluated at `store`; used by the
    /// finite-difference harness.
    pub fn batch_loss_with(&self, store: &ParamStore, batch: &[Example], class_weights: &[f64]) -> Result<f64> {
        let logits = batch.iter().map(|ex| self.logits_with(store, ex)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let m = Mat::from_rows(&logits)?;
        classification_loss(&m, &labels, self.cfg.loss_kind, self.cfg.focal_gamma, Some(class_weights))
    }

    /// Analytic gradient of [`Self::batch_loss_with`] at the current parameters.
    pub fn batch_grads(&self, batch: &[Example], class_weights: &[f64]) -> Result<(f64, Vec<Mat>)> {
        let norm = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut parts = Vec::with_capacity(batch.len());
        for ex in batch {
            self.check_example(ex)?;
            let w = self.sample_weight(ex.label, class_weights);
            let (l, _, g) = self.loss_and_grads(ex, w, norm, None)?;
            total += l;
            parts.push(g);
        }
        Ok((total, sum_grads(parts).unwrap_or_else(|| self.params.zeros_like())))
    }

    fn sample_weight(&self, label: usize, class_weights: &[f64]) -> f64 {
        match self.cfg.loss_kind {
            LossKind::WeightedCe => class_weights[label],
            _ => 1.0,
        }
    }

    /// Metrics over `examples`; `tail` lists the frozen tail classes.
    pub fn evaluate(&self, examples: &[Example], tail: &[usize]) -> Result<ClassificationMetrics> {
        for ex in examples {
            self.check_example(ex)?;
        }
        let logits: Vec<Vec<f64>> = examples.par_iter().map(|ex| self.logits_with(&self.params, ex)).collect::<Result<_>>()?;
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        let domains: Vec<&str> = examples.iter().map(|e| e.domain.as_str()).collect();
        ClassificationMetrics::from_logits(&logits, &labels, &domains, self.cfg.classes, tail)
    }
}

/// Inverse-frequency class weights normalized to mean 1; empty classes
/// are treated as having one sample.
pub fn inverse_frequency_weights(support: &[usize]) -> Vec<f64> {
    let raw: Vec<f64> = support.iter().map(|&s| 1.0 / s.max(1) as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// Mean loss over the rows of `logits`.
///
/// `ce` is `−log softmax[label]`; `weighted_ce` multiplies each sample by
/// its class weight; `focal` multiplies by `(1 − p_true)^γ`.
pub fn classification_loss(logits: &Mat, labels: &[usize], kind: LossKind, gamma: f64, class_weights: Option<&[f64]>) -> Result<f64> {
    ensure!(logits.rows() == labels.len(), "{} logit rows for {} labels", logits.rows(), labels.len());
    ensure!(!labels.is_empty(), "empty batch");
    ensure!(gamma >= 0.0, "focal gamma must be >= 0");
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
    }
    if kind == LossKind::WeightedCe {
        ensure!(class_weights.is_some_and(|w| w.len() == c), "weighted_ce needs one weight per class");
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let per = match kind {
            LossKind::Ce => focal_ce_row(logits.row(i), y, 0.0).0,
            LossKind::WeightedCe => class_weights.unwrap()[y] * focal_ce_row(logits.row(i), y, 0.0).0,
            LossKind::Focal => focal_ce_row(logits.row(i), y, gamma).0,
        };
        total += per;
    }
    Ok(total / labels.len() as f64)
}

/// The `k` classes with the smallest training support. Ties go to the
/// higher class index, which is the rarer end of the taxonomy ordering.
pub fn tail_classes(support: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..support.len()).collect();
    order.sort_by_key(|&c| (support[c], std::cmp::Reverse(c)));
    let mut tail: Vec<usize> = order.into_iter().take(k).collect();
    tail.sort_unstable();
    tail
}

/// Per-class F1 from predictions; `0/0` counts as 0.
pub fn per_class_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Vec<f64> {
    let conf = confusion_matrix(preds, labels, num_classes);
    f1_from_confusion(&conf)
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        m[y][p] += 1;
    }
    m
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1_from_confusion(conf: &[Vec<u64>]) -> Vec<f64> {
    let c = conf.len();
    (0..c)
        .map(|k| {
            let tp = conf[k][k] as f64;
            let fn_ = conf[k].iter().sum::<u64>() as f64 - tp;
            let fp = (0..c).map(|r| conf[r][k]).sum::<u64>() as f64 - tp;
            ratio(2.0 * tp, 2.0 * tp + fp + fn_)
        })
        .collect()
}

/// `(macro_f1, macro_f1_tail)`: unweighted means over all classes and over
/// the `tail` classes.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize, tail: &[usize]) -> Result<(f64, f64)> {
    ensure!(!labels.is_empty(), "empty prediction set");
    ensure!(preds.len() == labels.len(), "predictions and labels differ in length");
    ensure!(tail.len() <= num_classes && tail.iter().all(|&t| t < num_classes), "invalid tail class set");
    ensure!(preds.iter().chain(labels).all(|&x| x < num_classes), "class index out of range");
    let f1 = per_class_f1(preds, labels, num_classes);
    let macro_all = f1.iter().sum::<f64>() / num_classes as f64;
    let macro_tail = if tail.is_empty() { 0.0 } else { tail.iter().map(|&k| f1[k]).sum::<f64>() / tail.len() as f64 };
    Ok((macro_all, macro_tail))
}

/// `(Sp + Se) / 2`.
pub fn icbhi_score(specificity: f64, sensitivity: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&specificity) && (0.0..=1.0).contains(&sensitivity), "Sp and Se must lie in [0, 1]");
    Ok((specificity + sensitivity) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_f1_tail: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub per_domain_loss: BTreeMap<String, f64>,
    /// Mean max-softmax per true class; logged only.
    pub confidence: Vec<f64>,
    pub mean_loss: f64,
}

impl ClassificationMetrics {
    pub fn from_logits(logits: &[Vec<f64>], labels: &[usize], domains: &[&str], num_classes: usize, tail: &[usize]) -> Result<Self> {
        ensure!(!labels.is_empty(), "cannot evaluate an empty split");
        let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
        let (macro_all, macro_tail) = macro_f1(&preds, labels, num_classes, tail)?;
        let confusion = confusion_matrix(&preds, labels, num_classes);
        let per_class_f1 = f1_from_confusion(&confusion);
        let per_class_recall = (0..num_classes).map(|k| ratio(confusion[k][k] as f64, confusion[k].iter().sum::<u64>() as f64)).collect();
        let mut domain_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut conf_acc = vec![(0.0, 0usize); num_classes];
        let mut loss_total = 0.0;
        for ((l, &y), &d) in logits.iter().zip(labels).zip(domains) {
            let ce = focal_ce_row(l, y, 0.0).0;
            loss_total += ce;
            let e = domain_acc.entry(d.to_string()).or_insert((0.0, 0));
            e.0 += ce;
            e.1 += 1;
            let mut p = l.clone();
            softmax_in_place(&mut p);
            conf_acc[y].0 += p.iter().copied().fold(0.0, f64::max);
            conf_acc[y].1 += 1;
        }
        let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            macro_f1: macro_all,
            macro_f1_tail: macro_tail,
            per_class_f1,
            per_class_recall,
            confusion,
            per_domain_loss: domain_acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            confidence: conf_acc.iter().map(|&(s, n)| ratio(s, n as f64)).collect(),
            mean_loss: loss_total / labels.len() as f64,
        })
    }

    pub fn support(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn evaluated(&self) -> u64 {
        self.support().iter().sum()
    }
}

/// One CSV row of a training trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_f1_tail: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Diagnoser,
    pub best_epoch: usize,
    pub trajectory: Vec<EpochRecord>,
    pub best_valid: Option<ClassificationMetrics>,
    pub tail: Vec<usize>,
    pub train_support: Vec<usize>,
}

pub fn class_support(examples: &[Example], num_classes: usize) -> Vec<usize> {
    let mut s = vec![0; num_classes];
    for e in examples {
        s[e.label] += 1;
    }
    s
}

/// Mini-batch Adam training; returns the best-validation checkpoint.
pub fn train(cfg: &DiagnoserConfig, train_set: &[Example], valid_set: &[Example], vocab_size: usize, feature_dim: usize) -> Result<TrainOutcome> {
    ensure!(!train_set.is_empty(), "empty training split");
    let mut model = Diagnoser::new(cfg.clone(), vocab_size, feature_dim)?;
    for ex in train_set.iter().chain(valid_set) {
        model.check_example(ex)?;
    }
    let train_support = class_support(train_set, cfg.classes);
    let tail = tail_classes(&train_support, cfg.tail_k);
    let class_weights = inverse_frequency_weights(&train_support);
    let mut opt = Adam::new(&model.params, AdamConfig { lr: cfg.learning_rate, ..Default::default() });

    let mut trajectory = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, ClassificationMetrics)> = None;
    let mut consider = |epoch: usize, model: &Diagnoser, trajectory: &mut Vec<EpochRecord>| -> Result<()> {
        if valid_set.is_empty() {
            return Ok(());
        }
        let m = model.evaluate(valid_set, &tail)?;
        trajectory.push(EpochRecord { epoch, split: "valid".into(), accuracy: m.accuracy, macro_f1: m.macro_f1, macro_f1_tail: m.macro_f1_tail });
        if best.as_ref().is_none_or(|b| m.macro_f1 > b.0) {
            best = Some((m.macro_f1, epoch, model.params.clone(), m));
        }
        Ok(())
    };
    consider(0, &model, &mut trajectory)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut derived(cfg.seed, 0xE90C + epoch as u64));
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut preds = Vec::with_capacity(train_set.len());
        let mut labels = Vec::with_capacity(train_set.len());
        for chunk in order.chunks(cfg.batch_size) {
            let norm = 1.0 / chunk.len() as f64;
            let results: Vec<(f64, Vec<f64>, Vec<Mat>)> = chunk
                .par_iter()
                .map(|&i| {
                    let ex = &train_set[i];
                    let w = model.sample_weight(ex.label, &class_weights);
                    let drop_seed = derive_seed(cfg.seed, ((epoch as u64) << 32) | i as u64);
                    model.loss_and_grads(ex, w, norm, Some(drop_seed))
                })
                .collect::<Result<_>>()?;
            let mut batch_loss = 0.0;
            let mut parts = Vec::with_capacity(results.len());
            for (&i, (l, logits, g)) in chunk.iter().zip(results) {
                batch_loss += l;
                let p = argmax(&logits);
                correct += usize::from(p == train_set[i].label);
                preds.push(p);
                labels.push(train_set[i].label);
                parts.push(g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::TrainingFailure { epoch, reason: "non-finite loss".into() });
            }
            epoch_loss += batch_loss * chunk.len() as f64;
            let grads = sum_grads(parts).expect("non-empty batch");
            opt.step(&mut model.params, &grads);
            if !model.params.all_finite() {
                return Err(Error::TrainingFailure { epoch, reason: "non-finite parameters".into() });
            }
        }
        let (mf1, mtail) = macro_f1(&preds, &labels, cfg.classes, &tail)?;
        trajectory.push(EpochRecord {
            epoch,
            split: "train".into(),
            accuracy: correct as f64 / train_set.len() as f64,
            macro_f1: mf1,
            macro_f1_tail: mtail,
        });
        log::debug!("epoch {epoch}: train loss {:.4}", epoch_loss / train_set.len() as f64);
        consider(epoch, &model, &mut trajectory)?;
    }

    let (best_epoch, best_valid) = match best {
        Some((_, epoch, params, m)) => {
            model.params = params;
            (epoch, Some(m))
        }
        None => (cfg.epochs, None),
    };
    Ok(TrainOutcome { model, best_epoch, trajectory, best_valid, tail, train_support })
}

/// A fixed-seed shuffle of indices, exposed for split construction.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut seeded(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_closed_forms() {
        // p_true = 0.5 with two classes and equal logits
        let m = Mat::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let focal = classification_loss(&m, &[0], LossKind::Focal, 2.0, None).unwrap();
        assert!((focal - 0.25 * 2f64.ln()).abs() < 1e-12);
        let uniform = Mat::zeros(3, 16);
        let ce = classification_loss(&uniform, &[0, 5, 15], LossKind::Ce, 0.0, None).unwrap();
        assert!((ce - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        let m = Mat::zeros(1, 3);
        assert!(classification_loss(&m, &[3], LossKind::Ce, 0.0, None).is_err());
        assert!(classification_loss(&m, &[0], LossKind::WeightedCe, 0.0, None).is_err());
    }

    #[test]
    fn weighted_ce_scales_samples() {
        let m = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = [2.0, 0.5];
        let plain = classification_loss(&m, &[1, 1], LossKind::Ce, 0.0, None).unwrap();
        let weighted = classification_loss(&m, &[1, 1], LossKind::WeightedCe, 0.0, Some(&w)).unwrap();
        assert!((weighted - 0.5 * plain).abs() < 1e-15);
    }

    #[test]
    fn hand_macro_f1() {
        let (m, t) = macro_f1(&[0, 0, 1], &[0, 1, 1], 3, &[0, 1, 2]).unwrap();
        assert!((m - 4.0 / 9.0).abs() < 1e-12);
        assert_eq!(m, t);
        let (m, t) = macro_f1(&[0, 1, 2], &[0, 1, 2], 3, &[2]).unwrap();
        assert_eq!((m, t), (1.0, 1.0));
        assert!(macro_f1(&[], &[], 3, &[]).is_err());
    }

    #[test]
    fn icbhi() {
        assert!((icbhi_score(0.7929, 0.6610).unwrap() - 0.72695).abs() < 1e-12);
        assert_eq!(icbhi_score(1.0, 0.0).unwrap(), 0.5);
        assert!((icbhi_score(0.8599, 0.4911).unwrap() - 0.6755).abs() < 1e-12);
        assert!(icbhi_score(1.1, 0.5).is_err());
    }

    #[test]
    fn tail_selection_prefers_rare_end_on_ties() {
        assert_eq!(tail_classes(&[100, 2, 2, 50, 2], 2), vec![2, 4]);
        assert_eq!(tail_classes(&[5, 1, 3], 3), vec![0, 1, 2]);
    }

    #[test]
    fn inverse_weights_have_unit_mean() {
        let w = inverse_frequency_weights(&[100, 10, 1, 0]);
        assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert!(w[2] > w[1] && w[1] > w[0]);
    }
}
