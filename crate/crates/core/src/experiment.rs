//! Config-driven experiment runner: corpus generation, training jobs,
//! planning sweeps, the closed loop and the attention cost bench.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{cost_probe, dense_cost};
use crate::benchkit::{
    self, qa_screen, style_embedding, synth_corpus, synthesize_summary, synthesize_wave, Clip, Corpus, CorpusSpec, FeatureExtractor, QaConfig,
    QaFlag, Split, CLASS_NAMES,
};
use crate::cfm::{
    build_condition, default_prefix_len, euler_sample, evaluate_mixture, train_flow, ContentInterp, FlowTrainConfig, GaussianMixture, VelocityNet,
    VnetConfig,
};
use crate::diagnoser::{self, class_support, tail_classes, Diagnoser, DiagnoserConfig, Example, TrainOutcome};
use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::planner::{
    allocate, profile_from_eval, run_loop, A2caWeights, AllocationPlan, Evaluation, Executor, PlannerOptions, Policy, ResponseModel,
    SimulatedExecutor, Trajectory,
};
use crate::rng::derive_seed;
use crate::unit_gen::{train_unit_generator, UnitExample, UnitGenConfig, UnitGenerator, UnitQuantizer, UnitSequence};
use crate::weaving::{FeatureBlock, Vocab};
use crate::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GenData,
    TrainDiagnoser,
    TrainGenerator,
    TrainCfm,
    Plan,
    Loop,
    BenchAttn,
    QaText,
    Eval,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::GenData,
        ExperimentKind::TrainDiagnoser,
        ExperimentKind::TrainGenerator,
        ExperimentKind::TrainCfm,
        ExperimentKind::Plan,
        ExperimentKind::Loop,
        ExperimentKind::BenchAttn,
        ExperimentKind::QaText,
        ExperimentKind::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GenData => "gen-data",
            ExperimentKind::TrainDiagnoser => "train-diagnoser",
            ExperimentKind::TrainGenerator => "train-generator",
            ExperimentKind::TrainCfm => "train-cfm",
            ExperimentKind::Plan => "plan",
            ExperimentKind::Loop => "loop",
            ExperimentKind::BenchAttn => "bench-attn",
            ExperimentKind::QaText => "qa-text",
            ExperimentKind::Eval => "eval",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::invalid(format!("unknown experiment `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    #[default]
    ResponseModel,
    RealRetrain,
}

/// Where real-retrain synthetic clips come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSource {
    /// Class-conditioned parametric synthesizer of the corpus.
    #[default]
    Parametric,
    /// Units from the unit generator decoded to feature frames by a flow decoder.
    Generative,
}

/// Diagnoser sized for desk-scale closed-loop runs.
pub fn desk_diagnoser() -> DiagnoserConfig {
    DiagnoserConfig {
        layers: 1,
        heads: 4,
        hidden: 32,
        window: 8,
        text_len: 24,
        frames: 64,
        epochs: 12,
        batch_size: 32,
        learning_rate: 3e-3,
        ..DiagnoserConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub model: UnitGenConfig,
    /// Feature band quantized into units.
    pub band: usize,
    /// Keep every `frame_step`-th frame when building unit targets.
    pub frame_step: usize,
    pub clips_per_class: usize,
    pub max_len: usize,
    pub temperature: f64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            model: UnitGenConfig { codebook: 16, style_tokens: 4, layers: 1, hidden: 32, epochs: 8, ..UnitGenConfig::default() },
            band: 4,
            frame_step: 2,
            clips_per_class: 6,
            max_len: 40,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfmSection {
    pub vnet: VnetConfig,
    pub flow: FlowTrainConfig,
    pub eval_samples: usize,
    pub steps: usize,
}

impl Default for CfmSection {
    fn default() -> Self {
        Self { vnet: VnetConfig::default(), flow: FlowTrainConfig::default(), eval_samples: 1000, steps: crate::cfm::DEFAULT_STEPS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub policies: Vec<Policy>,
    pub budgets: Vec<u64>,
    pub rounds: usize,
    pub executor: ExecutorKind,
    pub injection: InjectionSource,
    pub tail_k: usize,
    pub a2ca: A2caWeights,
    /// Seed of the heterogeneous response model.
    pub response_seed: u64,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self {
            policies: vec![Policy::NoSynth, Policy::Random, Policy::ClassPrior, Policy::UncertaintyStatic, Policy::A2ca],
            budgets: vec![0, 100, 200, 300, 500],
            rounds: 5,
            executor: ExecutorKind::ResponseModel,
            injection: InjectionSource::Parametric,
            tail_k: 8,
            a2ca: A2caWeights::default(),
            response_seed: 0,
        }
    }
}

impl PlannerSection {
    pub fn options(&self) -> PlannerOptions {
        PlannerOptions { tail_k: self.tail_k, a2ca: self.a2ca.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    pub window: usize,
    pub globals: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { lengths: vec![128, 256, 512, 1024, 2048], window: 32, globals: 126 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaSection {
    pub config: QaConfig,
    /// Texts to screen; the corpus summaries are used when empty.
    pub texts: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Output directory of a `train-diagnoser` run; trains afresh when unset.
    pub model_dir: Option<PathBuf>,
}

/// One experiment run. Sub-config seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default = "desk_diagnoser")]
    pub diagnoser: DiagnoserConfig,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub cfm: CfmSection,
    #[serde(default)]
    pub planner: PlannerSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub qa: QaSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

impl RunConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            seed: 0,
            corpus: CorpusSpec::default(),
            diagnoser: desk_diagnoser(),
            generator: GeneratorSection::default(),
            cfm: CfmSection::default(),
            planner: PlannerSection::default(),
            bench: BenchSection::default(),
            qa: QaSection::default(),
            eval: EvalSection::default(),
        }
    }

    /// Parse JSON; schema errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })?;
        cfg.reseed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Set the run seed and every derived sub-seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = derive_seed(seed, 1);
        self.diagnoser.seed = derive_seed(seed, 2);
        self.generator.model.seed = derive_seed(seed, 3);
        self.cfm.vnet.seed = derive_seed(seed, 4);
        self.cfm.flow.seed = derive_seed(seed, 5);
    }

    pub fn planner_seed(&self) -> u64 {
        derive_seed(self.seed, 6)
    }

    pub fn validate(&self) -> Result<()> {
        let at = |path: &'static str| move |e: Error| config_error(path, e.to_string());
        self.corpus.validate().map_err(at("corpus"))?;
        self.diagnoser.validate().map_err(at("diagnoser"))?;
        if self.diagnoser.classes != self.corpus.classes() {
            return Err(config_error(
                "diagnoser.classes",
                format!("{} classes but the corpus has {}", self.diagnoser.classes, self.corpus.classes()),
            ));
        }
        self.generator.model.validate().map_err(at("generator.model"))?;
        if self.generator.band >= FEATURE_BANDS {
            return Err(config_error("generator.band", format!("band must be < {FEATURE_BANDS}")));
        }
        if self.generator.frame_step == 0 {
            return Err(config_error("generator.frame_step", "must be >= 1"));
        }
        if self.generator.model.feature_dim != FEATURE_BANDS {
            return Err(config_error("generator.model.feature_dim", format!("must equal the extractor width {FEATURE_BANDS}")));
        }
        if self.planner.rounds == 0 {
            return Err(config_error("planner.rounds", "must be >= 1"));
        }
        if self.planner.policies.is_empty() {
            return Err(config_error("planner.policies", "must be non-empty"));
        }
        if self.planner.tail_k > self.corpus.classes() {
            return Err(config_error("planner.tail_k", "exceeds the class count"));
        }
        if self.planner.a2ca.temperature.is_nan() || self.planner.a2ca.temperature <= 0.0 {
            return Err(config_error("planner.a2ca.temperature", "must be positive"));
        }
        if self.bench.lengths.len() < 2 || self.bench.window == 0 {
            return Err(config_error("bench", "need >= 2 lengths and a positive window"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

const FEATURE_BANDS: usize = 16;

/// Toy features, text tokens and labels for a set of clips.
pub struct Featurizer {
    pub extractor: FeatureExtractor,
    pub vocab: Vocab,
    pub text_len: usize,
    pub frames: usize,
}

impl Featurizer {
    pub fn new(spec: &CorpusSpec, cfg: &DiagnoserConfig) -> Self {
        Self {
            extractor: FeatureExtractor::toy(),
            vocab: Vocab::from_words(benchkit::summary_vocabulary(&spec.domains)),
            text_len: cfg.text_len,
            frames: cfg.frames,
        }
    }

    pub fn example(&self, label: usize, domain: &str, summary: &str, wave: &[f32]) -> Result<Example> {
        let (tokens, layout) = self.vocab.layout(summary, self.text_len, self.frames);
        Ok(Example { tokens, layout, features: FeatureBlock::new(self.extractor.extract(wave))?, label, domain: domain.to_string() })
    }

    pub fn clips<'a>(&self, clips: impl IntoParallelIterator<Item = &'a Clip>) -> Result<Vec<Example>> {
        clips.into_par_iter().map(|c| self.example(c.label, &c.domain, &c.summary, &c.wave)).collect()
    }
}

/// Examples per split of a corpus.
pub struct SplitExamples {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn featurize_corpus(corpus: &Corpus, fz: &Featurizer) -> Result<SplitExamples> {
    let pick = |s: Split| -> Result<Vec<Example>> {
        let clips: Vec<&Clip> = corpus.split(s).collect();
        fz.clips(clips)
    };
    Ok(SplitExamples { train: pick(Split::Train)?, valid: pick(Split::Valid)?, test: pick(Split::Test)? })
}

/// Unit generator plus flow decoder producing feature frames for a class,
/// styled by a real reference clip.
pub struct GenerativeSynth {
    words: Vocab,
    generator: UnitGenerator,
    decoder: VelocityNet,
    unit_embed: Mat,
    max_len: usize,
    temperature: f64,
    steps: usize,
    sigma: f64,
}

impl GenerativeSynth {
    /// Trains both stages on the training split of `corpus`.
    pub fn train(corpus: &Corpus, gen: &GeneratorSection, cfm: &CfmSection) -> Result<Self> {
        let (data, _, words) = unit_examples(corpus, gen)?;
        let (generator, _) = train_unit_generator(&gen.model, &data)?;
        let unit_embed = Mat::identity(gen.model.codebook);
        let pairs: Vec<(Mat, Mat)> = data
            .iter()
            .map(|ex| {
                let f = &ex.style_frames;
                let c = build_condition(&ex.units, &unit_embed, f, f, default_prefix_len(f.rows()), f.rows(), ContentInterp::Nearest)?;
                Ok((f.clone(), c.features()))
            })
            .collect::<Result<_>>()?;
        let (x_dim, cond_dim) = (pairs[0].0.cols(), pairs[0].1.cols());
        let mut decoder = VelocityNet::new(VnetConfig { x_dim, cond_dim, ..cfm.vnet.clone() })?;
        // Rows are decoded independently, so the decoder trains on single frames.
        train_flow(&mut decoder, &cfm.flow, &|rng| {
            let (x, c) = &pairs[rng.random_range(0..pairs.len())];
            let r = rng.random_range(0..x.rows());
            (x.slice_rows(r, r + 1), c.slice_rows(r, r + 1))
        })?;
        Ok(Self { words, generator, decoder, unit_embed, max_len: gen.max_len, temperature: gen.temperature, steps: cfm.steps, sigma: cfm.flow.sigma })
    }

    /// Feature frames for `class` shaped like `reference`.
    pub fn frames(&self, class: usize, reference: &Mat, seed: u64) -> Result<Mat> {
        let name = CLASS_NAMES.get(class).ok_or_else(|| Error::invalid(format!("class {class} has no name")))?;
        let mut units = self.generator.generate(&self.words.encode(name), reference, self.max_len, seed, self.temperature)?;
        if units.units.is_empty() {
            // An immediate end token leaves nothing to decode; fall back to the lowest unit.
            units.units.push(0);
        }
        let rows = reference.rows();
        let c = build_condition(&units, &self.unit_embed, reference, reference, default_prefix_len(rows), rows, ContentInterp::Nearest)?;
        euler_sample(&self.decoder, &c.features(), rows, reference.cols(), self.steps, self.sigma, derive_seed(seed, 1))
    }
}

/// Retrains the diagnoser from scratch on real plus injected synthetic
/// clips after each plan; planning profiles come from the validation split.
pub struct RetrainExecutor {
    cfg: DiagnoserConfig,
    spec: CorpusSpec,
    fz: Featurizer,
    data: SplitExamples,
    seed: u64,
    injected: AllocationPlan,
    pool: BTreeMap<(usize, usize), Vec<Example>>,
    domains: Vec<String>,
    generative: Option<GenerativeSynth>,
    last_outcome: Option<TrainOutcome>,
}

impl RetrainExecutor {
    pub fn new(corpus: &Corpus, cfg: DiagnoserConfig, seed: u64) -> Result<Self> {
        let fz = Featurizer::new(&corpus.spec, &cfg);
        let data = featurize_corpus(corpus, &fz)?;
        let domains = corpus.spec.train_domains();
        let injected = AllocationPlan::zeros(Policy::NoSynth, corpus.spec.classes(), domains.clone());
        Ok(Self { cfg, spec: corpus.spec.clone(), fz, data, seed, injected, pool: BTreeMap::new(), domains, generative: None, last_outcome: None })
    }

    /// Inject clips from `synth` instead of the parametric synthesizer.
    pub fn with_generative(mut self, synth: GenerativeSynth) -> Self {
        self.generative = Some(synth);
        self
    }

    fn reference(&self, class: usize, domain: &str, i: usize) -> Result<&Mat> {
        let same: Vec<&Example> = self.data.train.iter().filter(|e| e.label == class && e.domain == domain).collect();
        let pool = if same.is_empty() { self.data.train.iter().filter(|e| e.label == class).collect() } else { same };
        ensure!(!pool.is_empty(), "no training clip of class {class} to use as reference");
        Ok(pool[i % pool.len()].features.frames())
    }

    pub fn last_outcome(&self) -> Option<&TrainOutcome> {
        self.last_outcome.as_ref()
    }

    /// Synthetic clips for one cell; clip `i` is a pure function of the cell
    /// and `i`, so round splitting never changes the injected data.
    fn fill_cell(&mut self, class: usize, domain: usize, count: usize) -> Result<()> {
        let have = self.pool.get(&(class, domain)).map_or(0, Vec::len);
        if have >= count {
            return Ok(());
        }
        let name = &self.domains[domain];
        let spec = self.spec.domain(name).ok_or_else(|| Error::invalid(format!("unknown domain `{name}`")))?.clone();
        let fresh: Vec<Example> = (have..count)
            .into_par_iter()
            .map(|i| {
                let s = derive_seed(self.seed, 0x5_0000_0000 | ((class as u64) << 24) | ((domain as u64) << 20) | i as u64);
                let summary = synthesize_summary(class, &spec, derive_seed(s, 1));
                match &self.generative {
                    None => {
                        let wave = synthesize_wave(class, &spec, self.spec.sample_rate, self.spec.duration_s, s);
                        self.fz.example(class, name, &summary, &wave)
                    }
                    Some(g) => {
                        let frames = g.frames(class, self.reference(class, name, i)?, s)?;
                        let (tokens, layout) = self.fz.vocab.layout(&summary, self.fz.text_len, self.fz.frames);
                        Ok(Example { tokens, layout, features: FeatureBlock::new(frames)?, label: class, domain: name.clone() })
                    }
                }
            })
            .collect::<Result<_>>()?;
        self.pool.entry((class, domain)).or_default().extend(fresh);
        Ok(())
    }

    fn retrain(&mut self) -> Result<Evaluation> {
        let mut train = self.data.train.clone();
        for k in 0..self.injected.counts.len() {
            for d in 0..self.domains.len() {
                let n = self.injected.counts[k][d] as usize;
                self.fill_cell(k, d, n)?;
                if n > 0 {
                    train.extend_from_slice(&self.pool[&(k, d)][..n]);
                }
            }
        }
        let outcome = diagnoser::train(&self.cfg, &train, &self.data.valid, self.fz.vocab.len(), FEATURE_BANDS)?;
        let tail = tail_classes(&class_support(&self.data.train, self.cfg.classes), self.cfg.tail_k);
        let test = outcome.model.evaluate(&self.data.test, &tail)?;
        let valid = outcome.model.evaluate(&self.data.valid, &tail)?;
        let supports = class_support(&train, self.cfg.classes);
        let mut profile = profile_from_eval(&valid, &supports, None, 0)?;
        for d in &self.domains {
            profile.per_domain_loss.entry(d.clone()).or_insert(0.0);
        }
        self.last_outcome = Some(outcome);
        Ok(Evaluation { test, profile })
    }
}

impl Executor for RetrainExecutor {
    fn baseline(&mut self) -> Result<Evaluation> {
        self.injected = AllocationPlan::zeros(Policy::NoSynth, self.cfg.classes, self.domains.clone());
        self.retrain()
    }

    fn apply(&mut self, plan: &AllocationPlan) -> Result<Evaluation> {
        ensure!(plan.domains == self.domains, "plan domains {:?} differ from training domains {:?}", plan.domains, self.domains);
        self.injected.accumulate(plan)?;
        self.retrain()
    }
}

/// Files written by a run and the digest over them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: ExperimentKind,
    pub crate_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub outputs: BTreeMap<String, String>,
    pub result_digest: String,
}

struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, data).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(data)));
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut data = serde_json::to_vec_pretty(value)?;
        data.push(b'\n');
        self.bytes(name, &data)
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let data = w.into_inner().map_err(|e| Error::invalid(format!("csv flush: {e}")))?;
        self.bytes(name, &data)
    }

    fn finish(mut self, cfg: &RunConfig) -> Result<RunManifest> {
        let mut h = Sha256::new();
        for (name, digest) in &self.files {
            h.update(format!("{name}:{digest}\n"));
        }
        let manifest = RunManifest {
            experiment: cfg.experiment,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: cfg.digest(),
            seed: cfg.seed,
            outputs: std::mem::take(&mut self.files),
            result_digest: hex::encode(h.finalize()),
        };
        self.json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

#[derive(Serialize)]
struct CountRow<'a> {
    split: &'a str,
    class: usize,
    name: &'a str,
    count: usize,
}

#[derive(Serialize)]
struct ClipMeta<'a> {
    #[serde(flatten)]
    clip: &'a Clip,
    label_name: &'a str,
    samples: usize,
    sample_rate: u32,
}

#[derive(Serialize)]
struct PerClassRow<'a> {
    class: usize,
    name: &'a str,
    support: u64,
    f1: f64,
    recall: f64,
}

#[derive(Serialize)]
struct SweepRow {
    policy: String,
    budget: u64,
    acc: f64,
    macro_f1: f64,
    macro_f1_tail: f64,
}

#[derive(Serialize)]
struct RoundRow {
    policy: String,
    budget: u64,
    round: usize,
    spent: u64,
    cumulative: u64,
    acc: f64,
    macro_f1: f64,
    macro_f1_tail: f64,
}

#[derive(Serialize)]
struct PlanRow {
    policy: String,
    budget: u64,
    class: usize,
    domain: String,
    count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub n: usize,
    pub w: usize,
    pub g: usize,
    pub scored_pairs: u64,
    pub dense_pairs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    ensure!(xs.len() == ys.len() && xs.len() >= 2, "need >= 2 paired points");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    ensure!(sxx > 0.0, "x values are constant");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r2 })
}

/// Scored-pair counts per length and their linear fit.
pub fn attention_cost_table(bench: &BenchSection) -> Result<(Vec<CostRow>, LinearFit)> {
    let probes = cost_probe(&bench.lengths, bench.window, bench.globals)?;
    let rows: Vec<CostRow> =
        probes.iter().map(|p| CostRow { n: p.n, w: p.w, g: p.g, scored_pairs: p.scored_pairs, dense_pairs: dense_cost(p.n) }).collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.scored_pairs as f64).collect();
    Ok((rows.clone(), linear_fit(&xs, &ys)?))
}

fn per_class_rows(m: &crate::diagnoser::ClassificationMetrics) -> Vec<PerClassRow<'static>> {
    let support = m.support();
    (0..m.per_class_f1.len())
        .map(|k| PerClassRow { class: k, name: CLASS_NAMES[k], support: support[k], f1: m.per_class_f1[k], recall: m.per_class_recall[k] })
        .collect()
}

fn sweep_row(policy: Policy, budget: u64, m: &crate::diagnoser::ClassificationMetrics) -> SweepRow {
    SweepRow { policy: policy.name().into(), budget, acc: m.accuracy, macro_f1: m.macro_f1, macro_f1_tail: m.macro_f1_tail }
}

/// Run one experiment, writing results and `manifest.json` under `out`.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let mut o = Outputs::new(out)?;
    log::info!("running {} (seed {}) into {}", cfg.experiment, cfg.seed, out.display());
    o.json("config.json", cfg)?;
    match cfg.experiment {
        ExperimentKind::GenData => gen_data(cfg, &mut o)?,
        ExperimentKind::TrainDiagnoser => train_diagnoser(cfg, &mut o)?,
        ExperimentKind::TrainGenerator => train_generator(cfg, &mut o)?,
        ExperimentKind::TrainCfm => train_cfm(cfg, &mut o)?,
        ExperimentKind::Plan => plan(cfg, &mut o)?,
        ExperimentKind::Loop => closed_loop(cfg, &mut o)?,
        ExperimentKind::BenchAttn => bench_attn(cfg, &mut o)?,
        ExperimentKind::QaText => qa_text(cfg, &mut o)?,
        ExperimentKind::Eval => eval(cfg, &mut o)?,
    }
    o.finish(cfg)
}

/// Load a config file, apply an optional seed override and run it.
pub fn run_config_file(path: &Path, seed: Option<u64>, out: &Path) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.reseed(s);
    }
    run_experiment(&cfg, out)
}

fn gen_data(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let corpus = synth_corpus(&cfg.corpus)?;
    for c in &corpus.clips {
        let stem = format!("corpus/{}/{}/{}", c.split.name(), c.domain, c.id);
        let bytes: Vec<u8> = c.wave.iter().flat_map(|x| x.to_le_bytes()).collect();
        o.bytes(&format!("{stem}.f32"), &bytes)?;
        let meta = ClipMeta { clip: c, label_name: CLASS_NAMES[c.label], samples: c.wave.len(), sample_rate: cfg.corpus.sample_rate };
        o.json(&format!("{stem}.json"), &meta)?;
    }
    o.json("corpus_manifest.json", &corpus.manifest())?;
    let mut rows = Vec::new();
    for (split, counts) in corpus.counts() {
        for (k, &count) in counts.iter().enumerate() {
            rows.push(CountRow { split: split.name(), class: k, name: CLASS_NAMES[k], count });
        }
    }
    o.csv("class_counts.csv", &rows)
}

fn train_diagnoser(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let corpus = synth_corpus(&cfg.corpus)?;
    let fz = Featurizer::new(&cfg.corpus, &cfg.diagnoser);
    let data = featurize_corpus(&corpus, &fz)?;
    let outcome = diagnoser::train(&cfg.diagnoser, &data.train, &data.valid, fz.vocab.len(), FEATURE_BANDS)?;
    let test = outcome.model.evaluate(&data.test, &outcome.tail)?;
    o.csv("trajectory.csv", &outcome.trajectory)?;
    o.json("test_metrics.json", &test)?;
    o.csv("per_class.csv", &per_class_rows(&test))?;
    o.json("model_config.json", &(&cfg.diagnoser, &fz.vocab, outcome.best_epoch))?;
    let mut blob = Vec::new();
    outcome.model.params.write_blob(&mut blob).map_err(|e| Error::io(o.dir.join("model.params"), e))?;
    o.bytes("model.params", &blob)
}

fn eval(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let corpus = synth_corpus(&cfg.corpus)?;
    let (model, fz) = match &cfg.eval.model_dir {
        Some(dir) => {
            let path = dir.join("model_config.json");
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let (dcfg, vocab, _): (DiagnoserConfig, Vocab, usize) = serde_json::from_str(&text)?;
            let params = ParamStore::load(&dir.join("model.params"))?;
            let fz = Featurizer { extractor: FeatureExtractor::toy(), vocab, text_len: dcfg.text_len, frames: dcfg.frames };
            (Diagnoser::with_params(dcfg, params)?, fz)
        }
        None => {
            let fz = Featurizer::new(&cfg.corpus, &cfg.diagnoser);
            let data = featurize_corpus(&corpus, &fz)?;
            (diagnoser::train(&cfg.diagnoser, &data.train, &data.valid, fz.vocab.len(), FEATURE_BANDS)?.model, fz)
        }
    };
    let data = featurize_corpus(&corpus, &fz)?;
    let tail = tail_classes(&class_support(&data.train, model.cfg.classes), model.cfg.tail_k);
    let test = model.evaluate(&data.test, &tail)?;
    o.json("test_metrics.json", &test)?;
    o.csv("per_class.csv", &per_class_rows(&test))?;

    // style statistics of the toy embeddings, per domain and per class
    let embed = |exs: &[Example]| -> Vec<(usize, String, Vec<f64>)> {
        exs.iter().map(|e| (e.label, e.domain.clone(), style_embedding(e.features.frames()))).collect()
    };
    let all: Vec<_> = embed(&data.train).into_iter().chain(embed(&data.valid)).chain(embed(&data.test)).collect();
    let mut by_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut rows_per_domain: BTreeMap<String, usize> = BTreeMap::new();
    for (_, d, v) in &all {
        by_domain.entry(d.clone()).or_default().extend(v);
        *rows_per_domain.entry(d.clone()).or_default() += 1;
    }
    let mats: BTreeMap<String, crate::Mat> =
        by_domain.into_iter().map(|(d, v)| crate::Mat::from_vec(rows_per_domain[&d], FEATURE_BANDS, v).map(|m| (d, m))).collect::<Result<_>>()?;
    let mut frechet = Vec::new();
    let names: Vec<&String> = mats.keys().collect();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            frechet.push(((*a).clone(), (*b).clone(), benchkit::frechet_distance(&mats[*a], &mats[*b])?));
        }
    }
    let centroid = |split_test: bool, k: usize| -> Option<Vec<f64>> {
        let test_domains = cfg.corpus.domains.iter().filter(|d| d.held_out).map(|d| d.name.as_str()).collect::<Vec<_>>();
        let vs: Vec<&Vec<f64>> = all.iter().filter(|(l, d, _)| *l == k && test_domains.contains(&d.as_str()) == split_test).map(|x| &x.2).collect();
        (!vs.is_empty()).then(|| (0..FEATURE_BANDS).map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / vs.len() as f64).collect())
    };
    let mut cosine = Vec::new();
    for k in 0..model.cfg.classes {
        if let (Some(a), Some(b)) = (centroid(false, k), centroid(true, k)) {
            cosine.push((k, benchkit::style_cosine(&a, &b)?));
        }
    }
    o.json("style.json", &serde_json::json!({ "frechet_between_domains": frechet, "class_centroid_cosine_train_vs_test": cosine }))
}

fn unit_examples(corpus: &Corpus, cfg: &GeneratorSection) -> Result<(Vec<UnitExample>, UnitQuantizer, Vocab)> {
    let fx = FeatureExtractor::toy();
    let words = Vocab::from_words(CLASS_NAMES);
    ensure!(words.len() <= cfg.model.text_vocab, "diagnosis vocabulary {} exceeds text_vocab {}", words.len(), cfg.model.text_vocab);
    let mut picked = Vec::new();
    for k in 0..corpus.spec.classes() {
        picked.extend(corpus.split(Split::Train).filter(|c| c.label == k).take(cfg.clips_per_class));
    }
    let feats: Vec<crate::Mat> = picked.par_iter().map(|c| fx.extract(&c.wave)).collect();
    let q = UnitQuantizer::fit(&feats, cfg.band, cfg.model.codebook)?;
    let data = picked
        .iter()
        .zip(&feats)
        .map(|(c, f)| {
            let units: Vec<usize> = q.encode(f).into_iter().step_by(cfg.frame_step).collect();
            UnitExample { diagnosis: words.encode(CLASS_NAMES[c.label]), style_frames: f.clone(), units: UnitSequence::terminated(units) }
        })
        .collect();
    Ok((data, q, words))
}

#[derive(Serialize)]
struct GeneratedRow {
    class: usize,
    name: &'static str,
    terminated: bool,
    units: Vec<usize>,
}

fn train_generator(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let corpus = synth_corpus(&cfg.corpus)?;
    let (data, quantizer, words) = unit_examples(&corpus, &cfg.generator)?;
    let (model, epochs) = train_unit_generator(&cfg.generator.model, &data)?;
    o.csv("nll.csv", &epochs)?;
    let mut samples = Vec::new();
    for (k, &name) in CLASS_NAMES.iter().enumerate().take(corpus.spec.classes()) {
        let Some(ex) = data.iter().find(|e| e.diagnosis == words.encode(name)) else { continue };
        let seq = model.generate(&ex.diagnosis, &ex.style_frames, cfg.generator.max_len, derive_seed(cfg.seed, 100 + k as u64), cfg.generator.temperature)?;
        samples.push(GeneratedRow { class: k, name, terminated: seq.terminated, units: seq.units });
    }
    o.json("samples.json", &samples)?;
    o.json("quantizer.json", &quantizer)
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

fn train_cfm(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let gmm = GaussianMixture::default();
    let mut net = VelocityNet::new(cfg.cfm.vnet.clone())?;
    let losses = train_flow(&mut net, &cfg.cfm.flow, &|rng| gmm.draw(rng))?;
    let rows: Vec<LossRow> = losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
    o.csv("loss.csv", &rows)?;
    let report = evaluate_mixture(&net, &gmm, cfg.cfm.eval_samples, cfg.cfm.steps, cfg.cfm.flow.sigma, derive_seed(cfg.seed, 7))?;
    o.json("mixture.json", &report)
}

fn make_executor(cfg: &RunConfig) -> Result<Box<dyn Executor>> {
    Ok(match cfg.planner.executor {
        ExecutorKind::ResponseModel => {
            let support = benchkit::scaled_class_counts(&benchkit::TABLE6_COUNTS, 500, 2);
            let support = &support[..cfg.corpus.classes()];
            let mut model = ResponseModel::heterogeneous(support, 2, cfg.planner.response_seed);
            model.tail_k = cfg.planner.tail_k;
            Box::new(SimulatedExecutor::new(model)?)
        }
        ExecutorKind::RealRetrain => {
            let corpus = synth_corpus(&cfg.corpus)?;
            let ex = RetrainExecutor::new(&corpus, cfg.diagnoser.clone(), derive_seed(cfg.seed, 8))?;
            Box::new(match cfg.planner.injection {
                InjectionSource::Parametric => ex,
                InjectionSource::Generative => ex.with_generative(GenerativeSynth::train(&corpus, &cfg.generator, &cfg.cfm)?),
            })
        }
    })
}

fn plan(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let mut ex = make_executor(cfg)?;
    let base = ex.baseline()?;
    o.json("profile.json", &base.profile)?;
    let opts = cfg.planner.options();
    let mut plans = Vec::new();
    let mut rows = Vec::new();
    for &policy in &cfg.planner.policies {
        for &b in &cfg.planner.budgets {
            let p = allocate(policy, &base.profile, b, cfg.planner_seed(), &opts)?;
            for (k, row) in p.counts.iter().enumerate() {
                for (d, &count) in row.iter().enumerate() {
                    rows.push(PlanRow { policy: policy.name().into(), budget: b, class: k, domain: p.domains[d].clone(), count });
                }
            }
            plans.push(p);
        }
    }
    o.json("plans.json", &plans)?;
    o.csv("plans.csv", &rows)
}

/// Run every configured (policy, budget) pair through the closed loop.
pub fn loop_trajectories(cfg: &RunConfig) -> Result<Vec<Trajectory>> {
    let opts = cfg.planner.options();
    let mut out = Vec::new();
    for &policy in &cfg.planner.policies {
        for &b in &cfg.planner.budgets {
            let mut ex = make_executor(cfg)?;
            log::info!("loop: policy {policy}, budget {b}");
            out.push(run_loop(policy, b, cfg.planner.rounds, ex.as_mut(), cfg.planner_seed(), &opts)?);
        }
    }
    Ok(out)
}

fn closed_loop(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let trajectories = loop_trajectories(cfg)?;
    let mut sweep = Vec::new();
    let mut rounds = Vec::new();
    for t in &trajectories {
        sweep.push(sweep_row(t.policy, t.budget, &t.final_metrics));
        for r in &t.rounds {
            rounds.push(RoundRow {
                policy: t.policy.name().into(),
                budget: t.budget,
                round: r.round,
                spent: r.plan.total(),
                cumulative: r.cumulative,
                acc: r.accuracy,
                macro_f1: r.macro_f1,
                macro_f1_tail: r.macro_f1_tail,
            });
        }
    }
    o.json("trajectories.json", &trajectories)?;
    o.csv("sweep.csv", &sweep)?;
    o.csv("rounds.csv", &rounds)
}

fn bench_attn(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let (rows, fit) = attention_cost_table(&cfg.bench)?;
    o.csv("cost.csv", &rows)?;
    o.json("fit.json", &fit)
}

#[derive(Serialize)]
struct QaRow {
    id: String,
    flag: QaFlag,
    chars: usize,
    detail: String,
}

fn qa_text(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let texts: Vec<(String, String)> = if cfg.qa.texts.is_empty() {
        synth_corpus(&cfg.corpus)?.clips.into_iter().map(|c| (c.id, c.summary)).collect()
    } else {
        cfg.qa.texts.iter().enumerate().map(|(i, t)| (format!("text_{i:04}"), t.clone())).collect()
    };
    let mut counts: BTreeMap<QaFlag, usize> = BTreeMap::new();
    let rows: Vec<QaRow> = texts
        .into_iter()
        .map(|(id, t)| {
            let r = qa_screen(&t, &cfg.qa.config);
            *counts.entry(r.flag).or_default() += 1;
            QaRow { id, flag: r.flag, chars: t.trim().chars().count(), detail: r.detail }
        })
        .collect();
    o.csv("qa.csv", &rows)?;
    o.json("qa_summary.json", &counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_line() {
        let f = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = RunConfig::from_json(r#"{"experiment": "loop", "planner": {"rounds": "five"}}"#).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "planner.rounds"),
            e => panic!("unexpected {e}"),
        }
        let err = RunConfig::from_json(r#"{"experiment": "loop", "planner": {"rounds": 0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "planner.rounds"));
        assert!(RunConfig::from_json(r#"{"experiment": "warp"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"experiment": "plan", "bogus": 1}"#).is_err());
    }

    #[test]
    fn reseed_changes_every_sub_seed() {
        let mut a = RunConfig::new(ExperimentKind::Plan);
        a.reseed(1);
        let mut b = a.clone();
        b.reseed(2);
        assert_ne!(a.corpus.seed, b.corpus.seed);
        assert_ne!(a.diagnoser.seed, b.diagnoser.seed);
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn experiment_names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
    }
}
