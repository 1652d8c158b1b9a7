//! Strategic-global sparse attention.
//!
//! A query at position `i` scores the keys in its allowed set
//!
//! ```text
//! A(i) = { j : |i - j| <= w } ∪ G ∪ ({0..n} if i ∈ G)
//! ```
//!
//! where `G` holds the sentinel positions ([CLS], [DESCRIPTION]) plus
//! stride-sampled anchors inside the audio block. Global tokens therefore
//! see everything and are seen by everything; all other tokens stay local.
//! The sliding window is truncated at the sequence boundaries (no wrap).
//!
//! [`sparse_attention`] never computes a score outside `A(i)`;
//! [`dense_reference_attention`] materializes the full `n x n` additive
//! mask and exists as the equivalence oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{dot, softmax_in_place, Mat};

/// Default one-sided window half-width in tokens.
pub const DEFAULT_WINDOW: usize = 32;
/// Default anchor stride inside the audio block.
pub const DEFAULT_ANCHOR_STRIDE: usize = 4;

/// Which query/key pairs are scored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PatternDescriptor", into = "PatternDescriptor")]
pub struct AttentionPattern {
    seq_len: usize,
    window: usize,
    global: Vec<usize>,
    audio_start: usize,
    audio_len: usize,
    causal: bool,
    is_global: Vec<bool>,
}

/// On-disk form: `{n, w, global: [..], audio_span: [start, len]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternDescriptor {
    pub n: usize,
    pub w: usize,
    pub global: Vec<usize>,
    pub audio_span: [usize; 2],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub causal: bool,
}

impl TryFrom<PatternDescriptor> for AttentionPattern {
    type Error = crate::Error;

    fn try_from(d: PatternDescriptor) -> Result<Self> {
        let p = AttentionPattern::new(d.n, d.w, d.global, d.audio_span[0], d.audio_span[1])?;
        Ok(p.with_causal(d.causal))
    }
}

impl From<AttentionPattern> for PatternDescriptor {
    fn from(p: AttentionPattern) -> Self {
        PatternDescriptor {
            n: p.seq_len,
            w: p.window,
            global: p.global,
            audio_span: [p.audio_start, p.audio_len],
            causal: p.causal,
        }
    }
}

impl AttentionPattern {
    /// `global` is sorted and deduplicated here; indices must be `< n`.
    pub fn new(
        n: usize,
        window: usize,
        mut global: Vec<usize>,
        audio_start: usize,
        audio_len: usize,
    ) -> Result<Self> {
        ensure!(window >= 1, "window must be >= 1");
        ensure!(
            audio_start + audio_len <= n,
            "audio span [{audio_start}, {}) exceeds sequence length {n}",
            audio_start + audio_len
        );
        global.sort_unstable();
        global.dedup();
        if let Some(&last) = global.last() {
            ensure!(last < n, "global index {last} out of range for n = {n}");
        }
        let mut is_global = vec![false; n];
        for &g in &global {
            is_global[g] = true;
        }
        Ok(Self { seq_len: n, window, global, audio_start, audio_len, causal: false, is_global })
    }

    /// A pattern with no global tokens and no audio block.
    pub fn local(n: usize, window: usize) -> Result<Self> {
        Self::new(n, window, Vec::new(), 0, 0)
    }

    /// Full causal attention (`w = n`, keys restricted to `j <= i`).
    pub fn causal_full(n: usize) -> Result<Self> {
        Ok(Self::new(n, n.max(1), Vec::new(), 0, 0)?.with_causal(true))
    }

    /// Restrict every allowed set to keys `j <= i`.
    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn global(&self) -> &[usize] {
        &self.global
    }

    pub fn audio_span(&self) -> std::ops::Range<usize> {
        self.audio_start..self.audio_start + self.audio_len
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    #[inline]
    pub fn is_global(&self, i: usize) -> bool {
        self.is_global[i]
    }

    pub fn global_flags(&self) -> &[bool] {
        &self.is_global
    }

    pub fn descriptor(&self) -> PatternDescriptor {
        self.clone().into()
    }

    fn window_bounds(&self, i: usize) -> (usize, usize) {
        let lo = i.saturating_sub(self.window);
        let mut hi = (i + self.window).min(self.seq_len - 1);
        if self.causal {
            hi = hi.min(i);
        }
        (lo, hi)
    }

    /// Writes the sorted allowed key set `A(i)` into `keys`.
    pub fn allowed_keys_into(&self, i: usize, keys: &mut Vec<usize>) {
        keys.clear();
        let last = if self.causal { i } else { self.seq_len - 1 };
        if self.is_global[i] {
            keys.extend(0..=last);
            return;
        }
        let (lo, hi) = self.window_bounds(i);
        let split_lo = self.global.partition_point(|&g| g < lo);
        let split_hi = self.global.partition_point(|&g| g <= hi);
        keys.extend_from_slice(&self.global[..split_lo]);
        keys.extend(lo..=hi);
        keys.extend(self.global[split_hi..].iter().copied().take_while(|&g| g <= last));
    }

    pub fn allowed_keys(&self, i: usize) -> Vec<usize> {
        let mut keys = Vec::new();
        self.allowed_keys_into(i, &mut keys);
        keys
    }

    /// `|A(i)|` without enumerating the set.
    pub fn allowed_count(&self, i: usize) -> usize {
        if self.is_global[i] {
            return if self.causal { i + 1 } else { self.seq_len };
        }
        let (lo, hi) = self.window_bounds(i);
        let below = self.global.partition_point(|&g| g < lo);
        let above = if self.causal {
            0
        } else {
            self.global.len() - self.global.partition_point(|&g| g <= hi)
        };
        hi - lo + 1 + below + above
    }

    /// Whether key `j` is in `A(i)`.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        self.is_global[i] || self.is_global[j] || i.abs_diff(j) <= self.window
    }
}

/// Timing of the anchor grid over an audio segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub frames: usize,
    pub stride: usize,
    pub duration_ms: f64,
    pub hop_ms: f64,
    pub spacing_ms: f64,
    pub worst_dev_ms: f64,
}

/// 0-based anchor offsets `{k·s : k = 0..=⌊(T-1)/s⌋}` within the audio block.
pub fn build_anchor_set(frames: usize, stride: usize) -> Result<Vec<usize>> {
    ensure!(frames >= 1, "anchor grid needs at least one frame");
    ensure!(stride >= 1, "anchor stride must be >= 1");
    Ok((0..=(frames - 1) / stride).map(|k| k * stride).collect())
}

/// `{cls, desc} ∪ {audio_start + a}`, sorted and deduplicated.
pub fn build_global_set(
    n: usize,
    cls_pos: usize,
    desc_pos: usize,
    audio_start: usize,
    anchors: &[usize],
) -> Result<Vec<usize>> {
    ensure!(cls_pos != desc_pos, "[CLS] and [DESCRIPTION] share position {cls_pos}");
    ensure!(cls_pos < n && desc_pos < n, "sentinel position out of range for n = {n}");
    let mut set = Vec::with_capacity(anchors.len() + 2);
    set.push(cls_pos);
    set.push(desc_pos);
    for &a in anchors {
        let pos = audio_start + a;
        ensure!(pos < n, "anchor at {pos} out of range for n = {n}");
        set.push(pos);
    }
    set.sort_unstable();
    set.dedup();
    Ok(set)
}

pub fn anchor_grid_stats(duration_ms: f64, frames: usize, stride: usize) -> Result<AnchorGrid> {
    ensure!(duration_ms > 0.0 && duration_ms.is_finite(), "duration must be positive");
    ensure!(frames >= 1, "anchor grid needs at least one frame");
    ensure!(stride >= 1, "anchor stride must be >= 1");
    let hop_ms = duration_ms / frames as f64;
    let spacing_ms = stride as f64 * hop_ms;
    Ok(AnchorGrid {
        frames,
        stride,
        duration_ms,
        hop_ms,
        spacing_ms,
        worst_dev_ms: spacing_ms / 2.0,
    })
}

/// Standard `1/√d_k` temperature.
pub fn default_scale(d_k: usize) -> f64 {
    1.0 / (d_k.max(1) as f64).sqrt()
}

fn check_inputs(q: &Mat, k: &Mat, v: &Mat, pattern: &AttentionPattern) -> Result<()> {
    let n = pattern.seq_len();
    ensure!(n >= 1, "empty attention pattern");
    ensure!(
        q.rows() == n && k.rows() == n && v.rows() == n,
        "Q/K/V rows ({}, {}, {}) must equal pattern length {n}",
        q.rows(),
        k.rows(),
        v.rows()
    );
    ensure!(q.cols() == k.cols(), "Q and K widths differ: {} vs {}", q.cols(), k.cols());
    q.check_finite("Q")?;
    k.check_finite("K")?;
    v.check_finite("V")?;
    Ok(())
}

/// Probabilities for one query row over its allowed keys.
pub(crate) fn row_probs(q_row: &[f64], k: &Mat, keys: &[usize], scale: f64, probs: &mut Vec<f64>) {
    probs.clear();
    probs.extend(keys.iter().map(|&j| scale * dot(q_row, k.row(j))));
    softmax_in_place(probs);
}

/// Attention restricted to each query's allowed set.
pub fn sparse_attention(q: &Mat, k: &Mat, v: &Mat, pattern: &AttentionPattern, scale: f64) -> Result<Mat> {
    check_inputs(q, k, v, pattern)?;
    let d_v = v.cols();
    let mut out = Mat::zeros(pattern.seq_len(), d_v);
    if d_v == 0 {
        return Ok(out);
    }
    out.as_mut_slice().par_chunks_mut(d_v).enumerate().for_each_init(
        || (Vec::new(), Vec::new()),
        |(keys, probs), (i, out_row)| {
            pattern.allowed_keys_into(i, keys);
            row_probs(q.row(i), k, keys, scale, probs);
            for (&j, &p) in keys.iter().zip(probs.iter()) {
                for (o, &x) in out_row.iter_mut().zip(v.row(j)) {
                    *o += p * x;
                }
            }
        },
    );
    Ok(out)
}

/// Allowed keys and softmax weights of every query row, kept for the
/// backward pass.
#[derive(Clone, Debug, Default)]
pub(crate) struct HeadCache {
    pub keys: Vec<Vec<usize>>,
    pub probs: Vec<Vec<f64>>,
}

/// Single-head attention with a cache. `dense` routes through the full
/// masked score matrix instead of the allowed-set enumeration.
pub(crate) fn attend_head(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    pattern: &AttentionPattern,
    scale: f64,
    dense: bool,
) -> (Mat, HeadCache) {
    let n = pattern.seq_len();
    let mut out = Mat::zeros(n, v.cols());
    let mut cache = HeadCache { keys: Vec::with_capacity(n), probs: Vec::with_capacity(n) };
    for i in 0..n {
        let mut keys = Vec::new();
        let mut probs = Vec::new();
        if dense {
            keys.extend(0..n);
            probs.extend((0..n).map(|j| {
                let bias = if pattern.allows(i, j) { 0.0 } else { f64::MIN };
                scale * dot(q.row(i), k.row(j)) + bias
            }));
            softmax_in_place(&mut probs);
        } else {
            pattern.allowed_keys_into(i, &mut keys);
            row_probs(q.row(i), k, &keys, scale, &mut probs);
        }
        let out_row = out.row_mut(i);
        for (&j, &p) in keys.iter().zip(&probs) {
            if p == 0.0 {
                continue;
            }
            for (o, &x) in out_row.iter_mut().zip(v.row(j)) {
                *o += p * x;
            }
        }
        cache.keys.push(keys);
        cache.probs.push(probs);
    }
    (out, cache)
}

/// Gradients `(dQ, dK, dV)` of one head given the upstream `dout`.
pub(crate) fn attend_head_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    cache: &HeadCache,
    scale: f64,
    dout: &Mat,
) -> (Mat, Mat, Mat) {
    let mut dq = Mat::zeros(q.rows(), q.cols());
    let mut dk = Mat::zeros(k.rows(), k.cols());
    let mut dv = Mat::zeros(v.rows(), v.cols());
    let mut dp = Vec::new();
    for (i, (keys, probs)) in cache.keys.iter().zip(&cache.probs).enumerate() {
        let g = dout.row(i);
        dp.clear();
        dp.extend(keys.iter().map(|&j| dot(g, v.row(j))));
        let mean: f64 = probs.iter().zip(&dp).map(|(p, d)| p * d).sum();
        for ((&j, &p), &d) in keys.iter().zip(probs).zip(&dp) {
            if p == 0.0 {
                continue;
            }
            for (a, &b) in dv.row_mut(j).iter_mut().zip(g) {
                *a += p * b;
            }
            let ds = scale * p * (d - mean);
            for (a, &b) in dq.row_mut(i).iter_mut().zip(k.row(j)) {
                *a += ds * b;
            }
            for (a, &b) in dk.row_mut(j).iter_mut().zip(q.row(i)) {
                *a += ds * b;
            }
        }
    }
    (dq, dk, dv)
}

/// Full `n x n` masked attention; disallowed pairs get the most negative
/// finite bias so the softmax assigns them exactly zero weight.
pub fn dense_reference_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    pattern: &AttentionPattern,
    scale: f64,
) -> Result<Mat> {
    check_inputs(q, k, v, pattern)?;
    let n = pattern.seq_len();
    let mut bias = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if !pattern.allows(i, j) {
                bias[(i, j)] = f64::MIN;
            }
        }
    }
    let mut scores = q.matmul_t(k)?.scale(scale).add(&bias)?;
    for i in 0..n {
        softmax_in_place(scores.row_mut(i));
    }
    scores.matmul(v)
}

/// `Σ_i |A(i)|`, the number of scored query/key pairs.
pub fn attention_cost(pattern: &AttentionPattern) -> u64 {
    (0..pattern.seq_len()).map(|i| pattern.allowed_count(i) as u64).sum()
}

/// Pair count of unmasked dense attention.
pub fn dense_cost(n: usize) -> u64 {
    (n as u64) * (n as u64)
}

/// One row of the cost probe CSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostProbe {
    pub n: usize,
    pub w: usize,
    pub g: usize,
    pub scored_pairs: u64,
}

/// `g` global positions spread evenly over `[0, n)`.
pub fn spread_global_set(n: usize, g: usize) -> Vec<usize> {
    let g = g.min(n);
    let mut set: Vec<usize> = (0..g).map(|k| k * n / g.max(1)).collect();
    set.dedup();
    set
}

/// Cost of a `(w, g)` pattern for each length in `lengths`.
pub fn cost_probe(lengths: &[usize], w: usize, g: usize) -> Result<Vec<CostProbe>> {
    lengths
        .iter()
        .map(|&n| {
            let global = spread_global_set(n, g);
            let p = AttentionPattern::new(n, w, global, 0, 0)?;
            Ok(CostProbe { n, w, g: p.global().len(), scored_pairs: attention_cost(&p) })
        })
        .collect()
}
