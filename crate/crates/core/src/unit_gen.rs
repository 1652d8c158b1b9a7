//! Style-conditioned autoregressive model over discrete acoustic units.
//!
//! Embedding-table id layout: units occupy `[0, V)`, followed by `END`,
//! the input mask token, `[DIAGNOSIS]`, the `[AUDIO_k]` placeholder, and
//! then the diagnosis word vocabulary. The output head predicts `V + 1`
//! classes (units plus `END`).

use std::ops::Range;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionPattern;
use crate::autodiff::{focal_ce_row, Activation, Bound, Tape, Var};
use crate::diagnoser::{positional_encoding, Encoder};
use crate::error::{ensure, Error, Result};
use crate::params::{sum_grads, Adam, AdamConfig, ParamId, ParamStore};
use crate::rng::{derive_seed, derived, seeded};
use crate::tensor::{argmax, softmax_in_place, Mat};

/// Mean over `k` contiguous, maximally even segments of the rows of `z`.
/// Segment `j` covers rows `[⌊jT/K⌋, ⌊(j+1)T/K⌋)`.
pub fn pool_style(z: &Mat, k: usize) -> Result<Mat> {
    let t = z.rows();
    ensure!(t >= 1 && k >= 1, "pool_style needs T >= 1 and K >= 1");
    ensure!(k <= t, "cannot pool {t} frames into {k} segments");
    let mut out = Mat::zeros(k, z.cols());
    for (j, range) in segments(t, k).enumerate() {
        let len = range.len() as f64;
        for r in range {
            for (o, x) in out.row_mut(j).iter_mut().zip(z.row(r)) {
                *o += x;
            }
        }
        out.row_mut(j).iter_mut().for_each(|o| *o /= len);
    }
    Ok(out)
}

fn segments(t: usize, k: usize) -> impl Iterator<Item = Range<usize>> {
    (0..k).map(move |j| j * t / k..(j + 1) * t / k)
}

/// Two-layer row-wise perceptron mapping pooled features to hidden width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMlp {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

const STYLE_ACT: Activation = Activation::Relu;

impl StyleMlp {
    pub fn random(d: usize, inner: usize, h: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        Self {
            w1: Mat::randn(d, inner, 1.0 / (d as f64).sqrt(), &mut rng),
            b1: Mat::randn(1, inner, 0.1, &mut rng),
            w2: Mat::randn(inner, h, 1.0 / (inner as f64).sqrt(), &mut rng),
            b2: Mat::randn(1, h, 0.1, &mut rng),
        }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, m) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)] {
            s.add(name, m.clone());
        }
        s
    }

    pub fn from_store(s: &ParamStore) -> Result<Self> {
        ensure!(s.len() == 4, "style MLP store needs 4 tensors");
        let v = s.values();
        Ok(Self { w1: v[0].clone(), b1: v[1].clone(), w2: v[2].clone(), b2: v[3].clone() })
    }

    fn check(&self, d: usize) -> Result<()> {
        ensure!(self.w1.rows() == d, "style input width {d} != {}", self.w1.rows());
        ensure!(self.b1.shape() == (1, self.w1.cols()), "b1 shape mismatch");
        ensure!(self.w2.rows() == self.w1.cols(), "w2 rows != w1 cols");
        ensure!(self.b2.shape() == (1, self.w2.cols()), "b2 shape mismatch");
        Ok(())
    }
}

fn style_on_tape(tape: &mut Tape, pooled: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let h = tape.affine(pooled, w1, b1);
    let h = tape.act(h, STYLE_ACT);
    tape.affine(h, w2, b2)
}

/// `ReLU(P·W1 + b1)·W2 + b2`, row-wise.
pub fn style_project(pooled: &Mat, mlp: &StyleMlp) -> Result<Mat> {
    mlp.check(pooled.cols())?;
    let mut tape = Tape::new();
    let p = tape.bind(&mlp.to_store());
    let x = tape.leaf(pooled.clone());
    let v = p.vars();
    let out = style_on_tape(&mut tape, x, v[0], v[1], v[2], v[3]);
    Ok(tape.value(out).clone())
}

/// Mean squared error of the projection against `target`, evaluated at
/// `store` (laid out as [`StyleMlp::to_store`]).
pub fn style_mse_with(store: &ParamStore, pooled: &Mat, target: &Mat) -> Result<f64> {
    let (loss, _) = style_mse_grads(store, pooled, target)?;
    Ok(loss)
}

pub fn style_mse_grads(store: &ParamStore, pooled: &Mat, target: &Mat) -> Result<(f64, Vec<Mat>)> {
    StyleMlp::from_store(store)?.check(pooled.cols())?;
    let mut tape = Tape::new();
    let p = tape.bind(store);
    let x = tape.leaf(pooled.clone());
    let v = p.vars();
    let out = style_on_tape(&mut tape, x, v[0], v[1], v[2], v[3]);
    ensure!(tape.value(out).shape() == target.shape(), "target shape mismatch");
    let loss = tape.mse(out, target);
    Ok((tape.scalar(loss), tape.backward(loss).for_params(p.vars(), store)))
}

/// Reserved ids above the unit codebook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub end: usize,
    pub mask: usize,
    pub diagnosis: usize,
    pub audio: usize,
    pub text_base: usize,
}

impl SpecialIds {
    pub fn for_codebook(v: usize) -> Self {
        Self { end: v, mask: v + 1, diagnosis: v + 2, audio: v + 3, text_base: v + 4 }
    }
}

/// `[DIAGNOSIS] d [AUDIO_0] … [AUDIO_{K−1}]` as table ids; `diagnosis`
/// holds already-offset table ids.
pub fn prompt_ids(ids: &SpecialIds, diagnosis: &[usize], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(1 + diagnosis.len() + k);
    out.push(ids.diagnosis);
    out.extend_from_slice(diagnosis);
    out.extend(std::iter::repeat_n(ids.audio, k));
    out
}

/// Embed `prompt` from `table`, replacing the placeholder rows by the rows
/// of `style` in order.
pub fn build_prompt(prompt: &[usize], placeholder: usize, style: &Mat, table: &Mat) -> Result<Mat> {
    let slots: Vec<usize> = prompt.iter().enumerate().filter(|(_, &t)| t == placeholder).map(|(i, _)| i).collect();
    ensure!(slots.len() == style.rows(), "{} placeholder slots for {} style rows", slots.len(), style.rows());
    ensure!(style.rows() == 0 || style.cols() == table.cols(), "style width differs from embedding width");
    ensure!(prompt.iter().all(|&t| t < table.rows()), "prompt id outside embedding table");
    let mut out = Mat::zeros(prompt.len(), table.cols());
    for (i, &t) in prompt.iter().enumerate() {
        out.set_row(i, table.row(t));
    }
    for (k, &i) in slots.iter().enumerate() {
        out.set_row(i, style.row(k));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub target_span: Range<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
}

/// Draw `round_half_even(ratio·|span|)` positions uniformly without replacement.
pub fn sample_mask(span: Range<usize>, ratio: f64, seed: u64) -> Result<MaskPlan> {
    ensure!((0.0..=1.0).contains(&ratio), "mask ratio {ratio} outside [0, 1]");
    let len = span.len();
    let count = ((ratio * len as f64).round_ties_even() as usize).min(len);
    let mut masked: Vec<usize> = sample(&mut seeded(seed), len, count).into_iter().map(|i| span.start + i).collect();
    masked.sort_unstable();
    Ok(MaskPlan { target_span: span, masked, ratio })
}

/// Replace the input row preceding every masked target by `mask_vec`.
pub fn apply_leakfree_mask(embeds: &Mat, plan: &MaskPlan, mask_vec: &[f64]) -> Result<Mat> {
    ensure!(mask_vec.len() == embeds.cols(), "mask vector width mismatch");
    let mut out = embeds.clone();
    for &t in &plan.masked {
        ensure!(t >= 1, "masked target 0 has no preceding input");
        ensure!(t <= embeds.rows(), "masked target {t} beyond sequence");
        out.set_row(t - 1, mask_vec);
    }
    Ok(out)
}

/// Unit body plus whether `END` was emitted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSequence {
    pub units: Vec<usize>,
    pub terminated: bool,
}

impl UnitSequence {
    pub fn terminated(units: Vec<usize>) -> Self {
        Self { units, terminated: true }
    }

    /// Training targets: the body followed by `END` when terminated.
    pub fn targets(&self, end: usize) -> Vec<usize> {
        let mut t = self.units.clone();
        if self.terminated {
            t.push(end);
        }
        t
    }

    /// Targets right-padded to `len` with `pad`, and the padding mask.
    pub fn padded(&self, len: usize, end: usize, pad: usize) -> (Vec<usize>, Vec<bool>) {
        let mut ids = self.targets(end);
        let real = ids.len();
        ids.resize(len.max(real), pad);
        let mask = (0..ids.len()).map(|i| i >= real).collect();
        (ids, mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub sum: f64,
    pub mean: f64,
    pub tokens: usize,
}

/// Summed and per-token `−log softmax` over non-pad rows. The logit width
/// is the output class count, `END` included.
pub fn unit_nll(logits: &Mat, targets: &[usize], pad_mask: &[bool]) -> Result<NllReport> {
    ensure!(logits.rows() == targets.len() && targets.len() == pad_mask.len(), "logits, targets and pad mask differ in length");
    let width = logits.cols();
    let mut sum = 0.0;
    let mut tokens = 0;
    for (i, (&y, &pad)) in targets.iter().zip(pad_mask).enumerate() {
        if pad {
            continue;
        }
        ensure!(y < width, "target id {y} outside [0, {width})");
        sum += focal_ce_row(logits.row(i), y, 0.0).0;
        tokens += 1;
    }
    let mean = if tokens == 0 { 0.0 } else { sum / tokens as f64 };
    Ok(NllReport { sum, mean, tokens })
}

/// Scalar quantizer of one feature band into `levels` units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuantizer {
    pub lo: f64,
    pub hi: f64,
    pub levels: usize,
    pub band: usize,
}

impl UnitQuantizer {
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a Mat>, band: usize, levels: usize) -> Result<Self> {
        ensure!(levels >= 1, "quantizer needs at least one level");
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for m in frames {
            ensure!(band < m.cols(), "band {band} outside feature width {}", m.cols());
            for r in 0..m.rows() {
                lo = lo.min(m[(r, band)]);
                hi = hi.max(m[(r, band)]);
            }
        }
        ensure!(lo.is_finite() && hi.is_finite(), "no frames to fit the quantizer");
        if hi <= lo {
            hi = lo + 1.0;
        }
        Ok(Self { lo, hi, levels, band })
    }

    pub fn encode(&self, frames: &Mat) -> Vec<usize> {
        (0..frames.rows())
            .map(|r| {
                let u = (frames[(r, self.band)] - self.lo) / (self.hi - self.lo);
                ((u * self.levels as f64).floor().max(0.0) as usize).min(self.levels - 1)
            })
            .collect()
    }

    /// Bin centres.
    pub fn decode(&self, units: &[usize]) -> Vec<f64> {
        let width = (self.hi - self.lo) / self.levels as f64;
        units.iter().map(|&u| self.lo + (u as f64 + 0.5) * width).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnitGenConfig {
    /// Codebook size `V`.
    pub codebook: usize,
    /// Style tokens `K`; 0 disables style conditioning.
    pub style_tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_mult: usize,
    pub feature_dim: usize,
    /// Size of the diagnosis word vocabulary.
    pub text_vocab: usize,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for UnitGenConfig {
    fn default() -> Self {
        Self {
            codebook: 64,
            style_tokens: 8,
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn_mult: 2,
            feature_dim: 16,
            text_vocab: 32,
            mask_ratio: 0.1,
            epochs: 20,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

impl UnitGenConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.codebook >= 1, "codebook must be non-empty");
        ensure!(self.heads >= 1 && self.hidden % self.heads == 0, "hidden {} not divisible by heads {}", self.hidden, self.heads);
        ensure!((0.0..=1.0).contains(&self.mask_ratio), "mask ratio outside [0, 1]");
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        Ok(())
    }

    pub fn special_ids(&self) -> SpecialIds {
        SpecialIds::for_codebook(self.codebook)
    }
}

/// One training item: diagnosis words, reference features and target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitExample {
    pub diagnosis: Vec<usize>,
    pub style_frames: Mat,
    pub units: UnitSequence,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UnitGenIds {
    table: ParamId,
    style: [ParamId; 4],
    encoder: Encoder,
    lnf_g: ParamId,
    lnf_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct UnitGenerator {
    pub cfg: UnitGenConfig,
    pub params: ParamStore,
    ids: UnitGenIds,
}

impl UnitGenerator {
    pub fn new(cfg: UnitGenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derived(cfg.seed, 0x5717);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let rows = cfg.special_ids().text_base + cfg.text_vocab;
        let table = store.add("table", Mat::randn(rows, h, 0.5, &mut rng));
        let d = cfg.feature_dim;
        let style = [
            store.add("style_w1", Mat::randn(d, h, 1.0 / (d as f64).sqrt(), &mut rng)),
            store.add("style_b1", Mat::zeros(1, h)),
            store.add("style_w2", Mat::randn(h, h, 1.0 / (h as f64).sqrt(), &mut rng)),
            store.add("style_b2", Mat::zeros(1, h)),
        ];
        let encoder = Encoder::new(&mut store, "block", cfg.layers, h, cfg.heads, cfg.ffn_mult, &mut rng);
        let ids = UnitGenIds {
            table,
            style,
            encoder,
            lnf_g: store.add("lnf_g", Mat::filled(1, h, 1.0)),
            lnf_b: store.add("lnf_b", Mat::zeros(1, h)),
            out_w: store.add("out_w", Mat::randn(h, cfg.codebook + 1, 0.02, &mut rng)),
            out_b: store.add("out_b", Mat::zeros(1, cfg.codebook + 1)),
        };
        Ok(Self { cfg, params: store, ids })
    }

    pub fn with_params(cfg: UnitGenConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        ensure!(m.params.names() == params.names(), "parameter layout does not match config");
        ensure!(m.params.values().iter().zip(params.values()).all(|(a, b)| a.shape() == b.shape()), "parameter shape mismatch");
        m.params = params;
        Ok(m)
    }

    pub fn special_ids(&self) -> SpecialIds {
        self.cfg.special_ids()
    }

    pub fn table(&self) -> &Mat {
        self.params.get(self.ids.table)
    }

    /// Output layer `(weights, bias)`.
    pub fn output_layer_mut(&mut self) -> (&mut Mat, &mut Mat) {
        let (w, b) = (self.ids.out_w.index(), self.ids.out_b.index());
        let vals = self.params.values_mut();
        let (lo, hi) = vals.split_at_mut(b);
        (&mut lo[w], &mut hi[0])
    }

    pub fn style_mlp(&self) -> StyleMlp {
        let s = &self.ids.style;
        StyleMlp {
            w1: self.params.get(s[0]).clone(),
            b1: self.params.get(s[1]).clone(),
            w2: self.params.get(s[2]).clone(),
            b2: self.params.get(s[3]).clone(),
        }
    }

    /// Table-space prompt ids for diagnosis word ids.
    pub fn prompt_for(&self, diagnosis: &[usize]) -> Result<Vec<usize>> {
        let ids = self.special_ids();
        ensure!(diagnosis.iter().all(|&w| w < self.cfg.text_vocab), "diagnosis word outside vocabulary");
        let words: Vec<usize> = diagnosis.iter().map(|w| w + ids.text_base).collect();
        Ok(prompt_ids(&ids, &words, self.cfg.style_tokens))
    }

    /// Embedded prompt for inspection; identical rows to the in-model prompt.
    pub fn embed_prompt(&self, diagnosis: &[usize], style_frames: &Mat) -> Result<Mat> {
        let prompt = self.prompt_for(diagnosis)?;
        let style = if self.cfg.style_tokens == 0 {
            Mat::zeros(0, self.cfg.hidden)
        } else {
            style_project(&pool_style(style_frames, self.cfg.style_tokens)?, &self.style_mlp())?
        };
        build_prompt(&prompt, self.special_ids().audio, &style, self.table())
    }

    /// Logits for every target position: row `j` predicts target `j` from
    /// the prompt and `inputs[..j]`. Returns `inputs.len() + 1` rows.
    fn logits_on_tape(&self, tape: &mut Tape, p: &Bound, prompt: &[usize], style_frames: &Mat, inputs: &[usize]) -> Result<Var> {
        let k = self.cfg.style_tokens;
        ensure!(style_frames.cols() == self.cfg.feature_dim, "style frame width mismatch");
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(inputs);
        let n = ids.len();
        let mut x = tape.gather(p[self.ids.table], &ids);
        if k > 0 {
            let pooled = tape.leaf(pool_style(style_frames, k)?);
            let s = &self.ids.style;
            let style = style_on_tape(tape, pooled, p[s[0]], p[s[1]], p[s[2]], p[s[3]]);
            x = tape.splice(x, style, prompt.len() - k);
        }
        let pos = tape.leaf(positional_encoding(n, self.cfg.hidden));
        let x = tape.add(x, pos);
        let pattern = Arc::new(AttentionPattern::causal_full(n)?);
        let x = self.ids.encoder.forward(tape, p, x, &pattern, false);
        let rows: Vec<usize> = (prompt.len() - 1..n).collect();
        let x = tape.select_rows(x, &rows);
        let x = tape.layer_norm(x, p[self.ids.lnf_g], p[self.ids.lnf_b]);
        Ok(tape.affine(x, p[self.ids.out_w], p[self.ids.out_b]))
    }

    /// Teacher-forced inputs for `targets` under `plan`: the unit preceding
    /// each masked target is replaced by the mask id.
    pub fn masked_inputs(&self, targets: &[usize], plan: &MaskPlan) -> Result<Vec<usize>> {
        ensure!(!targets.is_empty(), "empty target sequence");
        let mut inputs = targets[..targets.len() - 1].to_vec();
        for &t in &plan.masked {
            ensure!(t >= 1 && t < targets.len(), "masked target {t} outside [1, {})", targets.len());
            inputs[t - 1] = self.special_ids().mask;
        }
        Ok(inputs)
    }

    /// Teacher-forced logits, `targets.len()` rows of width `V + 1`.
    pub fn teacher_logits(&self, diagnosis: &[usize], style_frames: &Mat, targets: &[usize], plan: &MaskPlan) -> Result<Mat> {
        let prompt = self.prompt_for(diagnosis)?;
        let inputs = self.masked_inputs(targets, plan)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let out = self.logits_on_tape(&mut tape, &p, &prompt, style_frames, &inputs)?;
        Ok(tape.value(out).clone())
    }

    /// Logits for raw (already substituted) input ids; used by probes.
    pub fn logits_for_inputs(&self, diagnosis: &[usize], style_frames: &Mat, inputs: &[usize]) -> Result<Mat> {
        let prompt = self.prompt_for(diagnosis)?;
        let table_rows = self.table().rows();
        ensure!(inputs.iter().all(|&t| t < table_rows), "input id outside embedding table");
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let out = self.logits_on_tape(&mut tape, &p, &prompt, style_frames, inputs)?;
        Ok(tape.value(out).clone())
    }

    fn check_example(&self, ex: &UnitExample) -> Result<()> {
        ensure!(ex.units.units.iter().all(|&u| u < self.cfg.codebook), "unit id outside codebook");
        ensure!(ex.style_frames.rows() >= self.cfg.style_tokens, "fewer style frames than style tokens");
        Ok(())
    }

    fn example_loss_grads(&self, ex: &UnitExample, plan: &MaskPlan, norm: f64) -> Result<(f64, usize, Vec<Mat>)> {
        let targets = ex.units.targets(self.special_ids().end);
        let prompt = self.prompt_for(&ex.diagnosis)?;
        let inputs = self.masked_inputs(&targets, plan)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let logits = self.logits_on_tape(&mut tape, &p, &prompt, &ex.style_frames, &inputs)?;
        let weights = vec![1.0; targets.len()];
        let loss = tape.focal_ce(logits, &targets, &weights, 0.0, norm);
        let value = tape.scalar(loss);
        Ok((value, targets.len(), tape.backward(loss).for_params(p.vars(), &self.params)))
    }

    /// Summed unit NLL over a batch without masking.
    pub fn batch_nll(&self, batch: &[UnitExample]) -> Result<NllReport> {
        let end = self.special_ids().end;
        let reports: Vec<NllReport> = batch
            .par_iter()
            .map(|ex| {
                let targets = ex.units.targets(end);
                let plan = MaskPlan { target_span: 1..targets.len(), masked: vec![], ratio: 0.0 };
                let logits = self.teacher_logits(&ex.diagnosis, &ex.style_frames, &targets, &plan)?;
                unit_nll(&logits, &targets, &vec![false; targets.len()])
            })
            .collect::<Result<_>>()?;
        let sum: f64 = reports.iter().map(|r| r.sum).sum();
        let tokens: usize = reports.iter().map(|r| r.tokens).sum();
        Ok(NllReport { sum, mean: if tokens == 0 { 0.0 } else { sum / tokens as f64 }, tokens })
    }

    /// Causal sampling until `END` or `max_len` units; greedy at temperature 0.
    pub fn generate(&self, diagnosis: &[usize], style_frames: &Mat, max_len: usize, seed: u64, temperature: f64) -> Result<UnitSequence> {
        ensure!(max_len >= 1, "max_len must be >= 1");
        ensure!(temperature >= 0.0, "temperature must be >= 0");
        let prompt = self.prompt_for(diagnosis)?;
        let end = self.special_ids().end;
        let mut rng = seeded(seed);
        let mut units = Vec::new();
        while units.len() < max_len {
            let mut tape = Tape::new();
            let p = tape.bind(&self.params);
            let logits = self.logits_on_tape(&mut tape, &p, &prompt, style_frames, &units)?;
            let last = tape.value(logits).row(units.len()).to_vec();
            let next = if temperature == 0.0 {
                argmax(&last)
            } else {
                let mut probs: Vec<f64> = last.iter().map(|l| l / temperature).collect();
                softmax_in_place(&mut probs);
                draw(&probs, rng.random::<f64>())
            };
            if next == end {
                return Ok(UnitSequence { units, terminated: true });
            }
            units.push(next);
        }
        Ok(UnitSequence { units, terminated: false })
    }
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnitEpoch {
    pub epoch: usize,
    pub mean_nll: f64,
}

/// Teacher-forced training with leak-free masking resampled per sequence
/// and epoch.
pub fn train_unit_generator(cfg: &UnitGenConfig, data: &[UnitExample]) -> Result<(UnitGenerator, Vec<UnitEpoch>)> {
    ensure!(!data.is_empty(), "empty unit corpus");
    let mut model = UnitGenerator::new(cfg.clone())?;
    for ex in data {
        model.check_example(ex)?;
    }
    let end = model.special_ids().end;
    let mut opt = Adam::new(&model.params, AdamConfig { lr: cfg.learning_rate, ..Default::default() });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut derived(cfg.seed, 0x0E0C + epoch as u64));
        let (mut total, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_tokens: usize = chunk.iter().map(|&i| data[i].units.targets(end).len()).sum();
            let norm = 1.0 / batch_tokens as f64;
            let parts: Vec<(f64, usize, Vec<Mat>)> = chunk
                .par_iter()
                .map(|&i| {
                    let ex = &data[i];
                    let l = ex.units.targets(end).len();
                    let plan = sample_mask(1..l, cfg.mask_ratio, derive_seed(cfg.seed, ((epoch as u64) << 32) | i as u64))?;
                    model.example_loss_grads(ex, &plan, norm)
                })
                .collect::<Result<_>>()?;
            let mut grads = Vec::with_capacity(parts.len());
            for (l, n, g) in parts {
                total += l / norm;
                tokens += n;
                grads.push(g);
            }
            if !total.is_finite() {
                return Err(Error::TrainingFailure { epoch, reason: "non-finite unit loss".into() });
            }
            opt.step(&mut model.params, &sum_grads(grads).expect("non-empty batch"));
        }
        history.push(UnitEpoch { epoch, mean_nll: total / tokens as f64 });
    }
    Ok((model, history))
}
