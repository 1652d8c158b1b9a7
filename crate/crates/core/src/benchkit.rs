//! Synthetic long-tail respiratory corpus, label unification, text QA and
//! the distribution metrics shared by the experiments.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Mat;

/// Unified 16-class taxonomy, most to least frequent.
pub const CLASS_NAMES: [&str; 16] = [
    "Control Group",
    "COVID-19",
    "Pneumonia",
    "COPD",
    "Asthma",
    "Bronchitis",
    "Bronchiectasis",
    "Hemoptysis",
    "Other respiratory diseases",
    "URTI",
    "Bronchiolitis",
    "Pulmonary hemosiderosis",
    "Chronic cough",
    "Airway foreign body",
    "Kawasaki disease",
    "LRTI",
];

/// Full-corpus class totals in [`CLASS_NAMES`] order.
pub const TABLE6_COUNTS: [usize; 16] = [156_527, 77_994, 1_909, 820, 324, 188, 103, 65, 49, 42, 18, 13, 11, 6, 3, 2];

/// `max(floor, ⌈count / divisor⌉)` per class.
pub fn scaled_class_counts(counts: &[usize], divisor: usize, floor: usize) -> Vec<usize> {
    counts.iter().map(|&c| c.div_ceil(divisor.max(1)).max(floor)).collect()
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}

/// Map raw diagnosis strings onto the unified taxonomy.
pub fn unify_label(raw: &str) -> String {
    let t = raw.trim();
    if t == "Bronchiectasia" {
        return "Bronchiectasis".into();
    }
    if t == "Acute upper respiratory infection" {
        return "URTI".into();
    }
    if let Some(rest) = t.strip_prefix("Pneumonia") {
        let rest = rest.trim_start();
        if rest.starts_with('(') && rest.ends_with(')') {
            return "Pneumonia".into();
        }
    }
    if class_index(t).is_none() {
        log::info!("label `{t}` is outside the unified taxonomy; passing through");
    }
    t.to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QaFlag {
    Ok,
    EmptyOrTruncated,
    Overlong,
    PromptLeak,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaReport {
    pub flag: QaFlag,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    pub max_chars: usize,
    pub min_chars: usize,
    pub leak_patterns: Vec<String>,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            max_chars: 1200,
            min_chars: 40,
            leak_patterns: [
                "as an ai language model",
                "as an ai assistant",
                "as a language model",
                "i cannot provide",
                "system prompt",
                "instruction:",
                "you are a helpful",
                "<|im_start|>",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        }
    }
}

const TERMINAL: [char; 4] = ['.', '!', '?', '。'];

/// Heuristic screen; precedence is empty/truncated, then prompt leak,
/// then overlong.
pub fn qa_screen(text: &str, cfg: &QaConfig) -> QaReport {
    let trimmed = text.trim();
    let chars = trimmed.chars().count();
    let report = |flag, detail: String| QaReport { flag, detail };
    if trimmed.is_empty() {
        return report(QaFlag::EmptyOrTruncated, "empty text".into());
    }
    if chars < cfg.min_chars {
        return report(QaFlag::EmptyOrTruncated, format!("{chars} chars < min {}", cfg.min_chars));
    }
    if !trimmed.ends_with(TERMINAL) {
        return report(QaFlag::EmptyOrTruncated, "no terminal punctuation".into());
    }
    let lower = trimmed.to_lowercase();
    if let Some(p) = cfg.leak_patterns.iter().find(|p| !p.is_empty() && lower.contains(&p.to_lowercase())) {
        return report(QaFlag::PromptLeak, format!("matched `{p}`"));
    }
    if chars > cfg.max_chars {
        return report(QaFlag::Overlong, format!("{chars} chars > max {}", cfg.max_chars));
    }
    report(QaFlag::Ok, "passed".into())
}

/// Mean and unbiased covariance of the rows of `x`.
fn moments(x: &Mat) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, e) = x.shape();
    ensure!(n >= 2, "need at least two embeddings, got {n}");
    ensure!(e >= 1, "embedding width must be >= 1");
    x.check_finite("embeddings")?;
    let m = DMatrix::from_row_slice(n, e, x.as_slice());
    let mu = DVector::from_iterator(e, (0..e).map(|j| m.column(j).mean()));
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

const FRECHET_EPS: f64 = 1e-6;

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&l| l < 0.0) {
        log::debug!("clamping negative eigenvalues in matrix square root");
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn regularize(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let min = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    if min < FRECHET_EPS {
        log::info!("degenerate covariance (min eigenvalue {min:.3e}); adding {FRECHET_EPS}·I");
        cov + DMatrix::identity(cov.nrows(), cov.ncols()) * FRECHET_EPS
    } else {
        cov.clone()
    }
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})` from given moments.
pub fn frechet_from_moments(mu_a: &[f64], cov_a: &Mat, mu_b: &[f64], cov_b: &Mat) -> Result<f64> {
    let e = mu_a.len();
    ensure!(mu_b.len() == e && cov_a.shape() == (e, e) && cov_b.shape() == (e, e), "moment shapes disagree");
    let ca = DMatrix::from_row_slice(e, e, cov_a.as_slice());
    let cb = DMatrix::from_row_slice(e, e, cov_b.as_slice());
    Ok(frechet_core(&DVector::from_column_slice(mu_a), &ca, &DVector::from_column_slice(mu_b), &cb))
}

fn frechet_core(mu_a: &DVector<f64>, ca: &DMatrix<f64>, mu_b: &DVector<f64>, cb: &DMatrix<f64>) -> f64 {
    let ca = regularize(ca);
    let cb = regularize(cb);
    // Tr((Σa Σb)^{1/2}) = Tr((√Σa Σb √Σa)^{1/2}), the latter symmetric
    let ra = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    if eig.eigenvalues.iter().any(|&l| l < 0.0) {
        log::debug!("clamping negative eigenvalues of the covariance product");
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    (diff.norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0)
}

/// Fréchet distance between Gaussian fits of two embedding sets (rows).
pub fn frechet_distance(a: &Mat, b: &Mat) -> Result<f64> {
    ensure!(a.cols() == b.cols(), "embedding widths differ: {} vs {}", a.cols(), b.cols());
    let (mu_a, ca) = moments(a)?;
    let (mu_b, cb) = moments(b)?;
    Ok(frechet_core(&mu_a, &ca, &mu_b, &cb))
}

pub fn style_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() == b.len(), "vector lengths differ");
    let na = crate::tensor::dot(a, a).sqrt();
    let nb = crate::tensor::dot(b, b).sqrt();
    ensure!(na > 0.0 && nb > 0.0, "cosine of a zero vector is undefined");
    Ok((crate::tensor::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Toy log band-energy front end.
#[derive(Clone)]
pub struct FeatureExtractor {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub bands: usize,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("frame_len", &self.frame_len).field("hop", &self.hop).field("bands", &self.bands).finish()
    }
}

/// High bands whose transient energy flags crackles.
pub const CRACKLE_BANDS: std::ops::Range<usize> = 10..16;

impl FeatureExtractor {
    pub fn new(sample_rate: u32, frame_len: usize, hop: usize, bands: usize) -> Result<Self> {
        ensure!(frame_len >= 2 && hop >= 1 && bands >= 1, "invalid extractor geometry");
        ensure!(bands <= frame_len / 2, "more bands than spectral bins");
        let fft = FftPlanner::new().plan_fft_forward(frame_len);
        let window = (0..frame_len).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame_len as f64).cos()).collect();
        Ok(Self { sample_rate, frame_len, hop, bands, fft, window })
    }

    pub fn toy() -> Self {
        Self::new(TOY_SAMPLE_RATE, 256, 128, 16).expect("static geometry")
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        if samples < self.frame_len {
            1
        } else {
            (samples - self.frame_len) / self.hop + 1
        }
    }

    /// Raw log band energies, `frames × bands`.
    pub fn log_energies(&self, wave: &[f32]) -> Mat {
        let frames = self.frames_for(wave.len());
        let bins = self.frame_len / 2;
        let per_band = bins / self.bands;
        let mut out = Mat::zeros(frames, self.bands);
        let mut buf = vec![Complex::new(0.0, 0.0); self.frame_len];
        for f in 0..frames {
            let start = f * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let x = wave.get(start + i).copied().unwrap_or(0.0) as f64;
                *b = Complex::new(x * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for band in 0..self.bands {
                let lo = 1 + band * per_band;
                let e: f64 = buf[lo..lo + per_band].iter().map(|c| c.norm_sqr()).sum();
                out[(f, band)] = (e + 1e-8).ln();
            }
        }
        out
    }

    /// Log energies minus their clip-wide mean.
    pub fn extract(&self, wave: &[f32]) -> Mat {
        let raw = self.log_energies(wave);
        let mean = raw.sum() / raw.len() as f64;
        raw.map(|x| x - mean)
    }
}

/// Peak-over-median of the mean crackle-band log energy, in nats.
pub fn crackle_index(features: &Mat) -> f64 {
    let mut series: Vec<f64> = (0..features.rows())
        .map(|r| {
            let row = &features.row(r)[CRACKLE_BANDS.start.min(features.cols())..CRACKLE_BANDS.end.min(features.cols())];
            row.iter().sum::<f64>() / row.len().max(1) as f64
        })
        .collect();
    let peak = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    series.sort_by(f64::total_cmp);
    peak - series[series.len() / 2]
}

/// Crackle indices above this count as transient-bearing.
pub const CRACKLE_THRESHOLD: f64 = 2.0;

/// Time-mean of features; the toy style embedding.
pub fn style_embedding(features: &Mat) -> Vec<f64> {
    features.col_means()
}

pub const TOY_SAMPLE_RATE: u32 = 4000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryRegime {
    Technical,
    Enriched,
}

/// Acquisition-site signal transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub gain: f64,
    /// One-pole low-pass cutoff in Hz; `None` keeps the full band.
    pub lowpass_hz: Option<f64>,
    /// Playback-rate factor applied by linear-interpolation resampling.
    pub resample: f64,
    pub noise_floor: f64,
    pub regime: SummaryRegime,
    pub held_out: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Clips per class in every domain.
    pub class_counts: Vec<usize>,
    pub domains: Vec<DomainSpec>,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            class_counts: scaled_class_counts(&TABLE6_COUNTS, 500, 2),
            domains: default_domains(),
            sample_rate: TOY_SAMPLE_RATE,
            duration_s: 2.0,
            valid_fraction: 0.2,
            seed: 0,
        }
    }
}

pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec { name: "site_a".into(), gain: 1.0, lowpass_hz: None, resample: 1.0, noise_floor: 0.01, regime: SummaryRegime::Technical, held_out: false },
        DomainSpec { name: "site_b".into(), gain: 0.6, lowpass_hz: Some(1700.0), resample: 1.03, noise_floor: 0.02, regime: SummaryRegime::Enriched, held_out: false },
        DomainSpec { name: "site_c".into(), gain: 1.6, lowpass_hz: Some(1500.0), resample: 0.93, noise_floor: 0.03, regime: SummaryRegime::Technical, held_out: true },
    ]
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.class_counts.is_empty(), "class_counts is empty");
        ensure!(self.class_counts.len() <= CLASS_NAMES.len(), "at most {} classes supported", CLASS_NAMES.len());
        ensure!(self.class_counts.iter().all(|&c| c >= 2), "every class needs at least 2 clips per domain");
        ensure!(!self.domains.is_empty(), "domains must be non-empty");
        ensure!(self.domains.iter().any(|d| d.held_out), "need a held-out domain");
        ensure!(self.domains.iter().any(|d| !d.held_out), "need a training domain");
        let mut names = std::collections::BTreeSet::new();
        ensure!(self.domains.iter().all(|d| names.insert(d.name.as_str())), "duplicate domain name");
        ensure!(self.sample_rate >= 1000 && self.duration_s > 0.0, "invalid audio geometry");
        ensure!((0.0..1.0).contains(&self.valid_fraction), "valid_fraction must be in [0, 1)");
        for d in &self.domains {
            ensure!(d.resample > 0.5 && d.resample < 2.0 && d.gain > 0.0, "domain `{}` transform out of range", d.name);
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn train_domains(&self) -> Vec<String> {
        self.domains.iter().filter(|d| !d.held_out).map(|d| d.name.clone()).collect()
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub id: String,
    pub label: usize,
    pub domain: String,
    pub split: Split,
    pub summary: String,
    pub seed: u64,
    #[serde(skip)]
    pub wave: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub clips: Vec<Clip>,
}

/// Acoustic signature of a class: an optional tonal component and an
/// optional crackle process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub wheeze_hz: Option<f64>,
    pub crackle_rate: f64,
}

/// Class `k` gets wheeze slot `k mod 8` (slot 0 = none) and crackles when
/// `k ≥ 8`, giving 16 distinct signatures; class 0 is pure breath noise.
pub fn class_signature(k: usize) -> ClassSignature {
    let slot = k % 8;
    ClassSignature {
        wheeze_hz: (slot > 0).then_some(125.0 * (slot as f64 + 1.5)),
        crackle_rate: if k >= 8 { 12.0 } else { 0.0 },
    }
}

/// Render one clip of class `label` through `domain`.
pub fn synthesize_wave(label: usize, domain: &DomainSpec, sample_rate: u32, duration_s: f64, seed: u64) -> Vec<f32> {
    let mut rng = seeded(seed);
    let sr = sample_rate as f64;
    let n = (sr * duration_s).round() as usize;
    // render slightly longer so resampling never reads past the end
    let src_len = (n as f64 * domain.resample).ceil() as usize + 2;
    let sig = class_signature(label);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let breath_rate = rng.random_range(0.3..0.6);
    let breath_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let breath_level = rng.random_range(0.2..0.45);
    let mut src = vec![0.0f64; src_len];
    // breath: smoothed noise under a slow envelope
    let mut lp = 0.0;
    for (i, s) in src.iter_mut().enumerate() {
        let t = i as f64 / sr;
        lp += 0.15 * (normal.sample(&mut rng) - lp);
        let env = 0.6 + 0.4 * (std::f64::consts::TAU * breath_rate * t + breath_phase).sin();
        *s = breath_level * env * lp;
    }
    if let Some(f0) = sig.wheeze_hz {
        // intermittent tone gated by the breathing phase
        let f = f0 * rng.random_range(0.88..1.12);
        let amp = rng.random_range(0.04..0.2);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let gate_offset = rng.random_range(0.0..std::f64::consts::TAU);
        let gate_level = rng.random_range(-0.3..0.5);
        for (i, s) in src.iter_mut().enumerate() {
            let t = i as f64 / sr;
            if (std::f64::consts::TAU * breath_rate * t + gate_offset).sin() > gate_level {
                *s += amp * (std::f64::consts::TAU * f * t + phase).sin();
            }
        }
    }
    // crackle classes carry a dense click train; other non-control classes
    // an occasional stray click
    let click_rate = if sig.crackle_rate > 0.0 {
        rng.random_range(0.25..1.0) * sig.crackle_rate
    } else if label > 0 {
        0.5
    } else {
        0.0
    };
    if click_rate > 0.0 {
        let mut count = Poisson::new(click_rate * duration_s).unwrap().sample(&mut rng) as usize;
        if sig.crackle_rate > 0.0 {
            count = count.max(1);
        }
        let decay = (-1.0 / (0.0015 * sr)).exp();
        for _ in 0..count {
            let at = rng.random_range(0..src_len);
            let mut a = rng.random_range(0.3..1.0);
            let mut prev = 0.0;
            for s in src.iter_mut().skip(at).take((0.006 * sr) as usize) {
                // first difference keeps the click broadband
                let w = normal.sample(&mut rng);
                *s += a * (w - prev);
                prev = w;
                a *= decay;
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pos = i as f64 * domain.resample;
        let j = pos.floor() as usize;
        let w = pos - j as f64;
        out.push((1.0 - w) * src[j] + w * src[j + 1]);
    }
    if let Some(fc) = domain.lowpass_hz {
        let alpha = 1.0 - (-std::f64::consts::TAU * fc / sr).exp();
        let mut y = 0.0;
        for x in out.iter_mut() {
            y += alpha * (*x - y);
            *x = y;
        }
    }
    out.into_iter().map(|x| (domain.gain * x + domain.noise_floor * normal.sample(&mut rng)) as f32).collect()
}

const PITCH_WORDS: [&str; 3] = ["low", "mid", "high"];

/// Templated summary. Event words are shared across classes and the pitch
/// is reported coarsely, so text alone cannot resolve every class.
pub fn synthesize_summary(label: usize, domain: &DomainSpec, seed: u64) -> String {
    let mut rng = seeded(seed);
    let sig = class_signature(label);
    let mut events = Vec::new();
    if let Some(f) = sig.wheeze_hz {
        let pitch = PITCH_WORDS[((f - 250.0) / 300.0).clamp(0.0, 2.0) as usize];
        events.push(format!("{pitch} pitched continuous wheeze"));
    }
    if sig.crackle_rate > 0.0 {
        events.push("scattered fine crackles".to_string());
    }
    if rng.random::<f64>() < 0.15 {
        events.push(["occasional cough", "mild stridor", "irregular breathing"][rng.random_range(0..3)].to_string());
    }
    let findings = if events.is_empty() { "no adventitious sounds".to_string() } else { events.join(" and ") };
    let age = rng.random_range(4..80);
    match domain.regime {
        SummaryRegime::Technical => format!("Auscultation recording from {}: {findings} observed across the breathing cycle.", domain.name),
        SummaryRegime::Enriched => format!(
            "Patient aged {age} presented for respiratory assessment at {}. Auscultation revealed {findings}; breathing effort appeared {}.",
            domain.name,
            ["normal", "slightly increased", "labored"][rng.random_range(0..3)]
        ),
    }
}

/// Every word the summary templates can emit.
pub fn summary_vocabulary(domains: &[DomainSpec]) -> Vec<String> {
    let mut words: Vec<String> = "auscultation recording from observed across the breathing cycle patient aged presented for respiratory assessment at revealed effort appeared normal slightly increased labored no adventitious sounds and pitched continuous wheeze scattered fine crackles occasional cough mild stridor irregular"
        .split_whitespace()
        .map(String::from)
        .collect();
    words.extend(PITCH_WORDS.iter().map(|s| s.to_string()));
    for d in domains {
        words.extend(crate::weaving::tokenize(&d.name));
    }
    words.sort();
    words.dedup();
    words
}

/// Generate the corpus: per (class, domain) clips, train/valid on the
/// training domains and test on the held-out ones.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut plan = Vec::new();
    for (label, &count) in spec.class_counts.iter().enumerate() {
        for (di, d) in spec.domains.iter().enumerate() {
            let n_valid = if d.held_out { 0 } else { ((spec.valid_fraction * count as f64).round() as usize).max(1).min(count - 1) };
            for i in 0..count {
                let split = if d.held_out {
                    Split::Test
                } else if i < n_valid {
                    Split::Valid
                } else {
                    Split::Train
                };
                let seed = derive_seed(spec.seed, ((label as u64) << 40) | ((di as u64) << 24) | i as u64);
                plan.push((label, di, i, split, seed));
            }
        }
    }
    let clips: Vec<Clip> = plan
        .par_iter()
        .map(|&(label, di, i, split, seed)| {
            let d = &spec.domains[di];
            Clip {
                id: format!("c{label:02}_{}_{i:04}", d.name),
                label,
                domain: d.name.clone(),
                split,
                summary: synthesize_summary(label, d, derive_seed(seed, 1)),
                seed,
                wave: synthesize_wave(label, d, spec.sample_rate, spec.duration_s, seed),
            }
        })
        .collect();
    let corpus = Corpus { spec: spec.clone(), clips };
    corpus.assert_source_disjoint()?;
    Ok(corpus)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub domain: String,
    pub split: Split,
    pub wave_sha256: String,
    pub summary: String,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Clip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn assert_source_disjoint(&self) -> Result<()> {
        let mut train = std::collections::BTreeSet::new();
        let mut test = std::collections::BTreeSet::new();
        for c in &self.clips {
            match c.split {
                Split::Test => test.insert(c.domain.as_str()),
                _ => train.insert(c.domain.as_str()),
            };
        }
        if let Some(d) = train.intersection(&test).next() {
            return Err(Error::invalid(format!("domain `{d}` appears in both train and test")));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.clips
            .iter()
            .map(|c| ManifestEntry {
                id: c.id.clone(),
                label: CLASS_NAMES[c.label].to_string(),
                domain: c.domain.clone(),
                split: c.split,
                wave_sha256: wave_digest(&c.wave),
                summary: c.summary.clone(),
            })
            .collect()
    }

    /// Clip counts per (split, class).
    pub fn counts(&self) -> BTreeMap<Split, Vec<usize>> {
        let mut m: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
        for c in &self.clips {
            m.entry(c.split).or_insert_with(|| vec![0; self.spec.classes()])[c.label] += 1;
        }
        m
    }
}

pub fn wave_digest(wave: &[f32]) -> String {
    let mut h = Sha256::new();
    for x in wave {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn write_f32(path: &std::path::Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &std::path::Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ensure!(bytes.len() % 4 == 0, "{} is not a float32 blob", path.display());
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_counts_match_floor_rule() {
        let c = scaled_class_counts(&TABLE6_COUNTS, 500, 2);
        assert_eq!(&c[..4], &[314, 156, 4, 2]);
        assert!(c[3..].iter().all(|&x| x == 2));
        assert_eq!(c.iter().sum::<usize>(), 500);
        assert_eq!(TABLE6_COUNTS.iter().sum::<usize>(), 238_074);
    }

    #[test]
    fn label_mappings() {
        assert_eq!(unify_label("Bronchiectasia"), "Bronchiectasis");
        assert_eq!(unify_label("Acute upper respiratory infection"), "URTI");
        assert_eq!(unify_label("Pneumonia (severe)"), "Pneumonia");
        assert_eq!(unify_label("Pneumonia (non-severe)"), "Pneumonia");
        assert_eq!(unify_label("Asthma"), "Asthma");
        assert_eq!(unify_label("Pneumothorax"), "Pneumothorax");
    }

    #[test]
    fn qa_precedence() {
        let cfg = QaConfig::default();
        assert_eq!(qa_screen("", &cfg).flag, QaFlag::EmptyOrTruncated);
        let long = format!("{}.", "wheeze ".repeat(800));
        assert_eq!(qa_screen(&long, &cfg).flag, QaFlag::Overlong);
        let leak = format!("As an AI language model, {}.", "wheeze ".repeat(800));
        assert_eq!(qa_screen(&leak, &cfg).flag, QaFlag::PromptLeak);
        assert_eq!(qa_screen("Auscultation revealed mild expiratory wheeze in both lungs.", &cfg).flag, QaFlag::Ok);
    }

    #[test]
    fn frechet_identity_and_closed_form() {
        let a = Mat::randn(50, 3, 1.0, &mut seeded(1));
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let x = Mat::from_vec(2, 1, vec![-s, s]).unwrap();
        let y = Mat::from_vec(2, 1, vec![1.0 - s, 1.0 + s]).unwrap();
        assert!((frechet_distance(&x, &y).unwrap() - 1.0).abs() < 1e-6);
        assert!(frechet_distance(&Mat::zeros(1, 2), &a).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((style_cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(style_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((style_cosine(&[1.0, -3.0], &[2.0, -6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(style_cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn signatures_are_distinct() {
        let sigs: Vec<_> = (0..16).map(class_signature).collect();
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(sigs[i], sigs[j]);
            }
        }
        assert_eq!(sigs[0], ClassSignature { wheeze_hz: None, crackle_rate: 0.0 });
    }

    #[test]
    fn extractor_geometry() {
        let fx = FeatureExtractor::toy();
        let d = &default_domains()[0];
        let w = synthesize_wave(3, d, TOY_SAMPLE_RATE, 2.0, 5);
        assert_eq!(w.len(), 8000);
        let f = fx.extract(&w);
        assert_eq!(f.shape(), (61, 16));
        assert!(f.all_finite());
        assert!(f.sum().abs() < 1e-9);
    }
}
