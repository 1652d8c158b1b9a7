//! Synthesis-budget allocation over (class × domain) cells and the closed
//! analyze → synthesize → retrain loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diagnoser::{tail_classes, ClassificationMetrics};
use crate::error::{ensure, Error, Result};
use crate::rng::{derived, seeded};

/// Recycled evaluation signal driving allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    pub per_class_error: Vec<f64>,
    pub per_class_support: Vec<usize>,
    pub per_domain_loss: BTreeMap<String, f64>,
    pub confidence: Vec<f64>,
    pub round_index: usize,
    /// Classes with no evaluation support; their error is set to 1.
    pub unsupported: Vec<usize>,
}

impl ErrorProfile {
    pub fn classes(&self) -> usize {
        self.per_class_error.len()
    }

    pub fn domains(&self) -> Vec<String> {
        self.per_domain_loss.keys().cloned().collect()
    }
}

/// Per-class error `1 − recall` from the confusion matrix.
pub fn profile_from_eval(metrics: &ClassificationMetrics, supports: &[usize], confidences: Option<&[f64]>, round_index: usize) -> Result<ErrorProfile> {
    let c = metrics.confusion.len();
    ensure!(supports.len() == c, "{} supports for {c} classes", supports.len());
    let confidence = confidences.map_or_else(|| metrics.confidence.clone(), <[f64]>::to_vec);
    ensure!(confidence.len() == c, "{} confidences for {c} classes", confidence.len());
    let mut unsupported = Vec::new();
    let per_class_error = (0..c)
        .map(|k| {
            let row: u64 = metrics.confusion[k].iter().sum();
            if row == 0 {
                unsupported.push(k);
                1.0
            } else {
                1.0 - metrics.confusion[k][k] as f64 / row as f64
            }
        })
        .collect();
    if !unsupported.is_empty() {
        log::warn!("classes without evaluation support treated as maximally uncertain: {unsupported:?}");
    }
    Ok(ErrorProfile {
        per_class_error,
        per_class_support: supports.to_vec(),
        per_domain_loss: metrics.per_domain_loss.clone(),
        confidence,
        round_index,
        unsupported,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    NoSynth,
    Random,
    ClassPrior,
    UncertaintyStatic,
    RareOnly,
    HardCaseOnly,
    HardDomainOnly,
    RareXHardDomain,
    A2ca,
}

impl Policy {
    pub const ALL: [Policy; 9] = [
        Policy::NoSynth,
        Policy::Random,
        Policy::ClassPrior,
        Policy::UncertaintyStatic,
        Policy::RareOnly,
        Policy::HardCaseOnly,
        Policy::HardDomainOnly,
        Policy::RareXHardDomain,
        Policy::A2ca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::NoSynth => "no_synth",
            Policy::Random => "random",
            Policy::ClassPrior => "class_prior",
            Policy::UncertaintyStatic => "uncertainty_static",
            Policy::RareOnly => "rare_only",
            Policy::HardCaseOnly => "hard_case_only",
            Policy::HardDomainOnly => "hard_domain_only",
            Policy::RareXHardDomain => "rare_x_hard_domain",
            Policy::A2ca => "a2ca",
        }
    }

    /// Policies whose plan is fixed from the initial profile.
    pub fn is_static(self) -> bool {
        self != Policy::A2ca
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::invalid(format!("unknown policy `{s}`")))
    }
}

/// Per-(class × domain) synthetic sample counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub policy: Policy,
    pub budget: u64,
    pub domains: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl AllocationPlan {
    pub fn zeros(policy: Policy, classes: usize, domains: Vec<String>) -> Self {
        let d = domains.len();
        Self { policy, budget: 0, domains, counts: vec![vec![0; d]; classes] }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn class_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn from_flat(policy: Policy, budget: u64, classes: usize, domains: Vec<String>, flat: &[u64]) -> Self {
        let d = domains.len();
        let counts = (0..classes).map(|c| flat[c * d..(c + 1) * d].to_vec()).collect();
        Self { policy, budget, domains, counts }
    }

    fn flat(&self) -> Vec<u64> {
        self.counts.iter().flatten().copied().collect()
    }

    /// Elementwise sum; domain lists must agree.
    pub fn accumulate(&mut self, other: &AllocationPlan) -> Result<()> {
        ensure!(self.domains == other.domains && self.counts.len() == other.counts.len(), "plan shapes differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.budget += other.budget;
        Ok(())
    }
}

/// Integer apportionment of `budget` proportional to `weights`: floors
/// first, then one extra unit to the largest fractional parts, lowest
/// index first on ties. Non-positive total weight spreads uniformly.
pub fn largest_remainder(weights: &[f64], budget: u64) -> Vec<u64> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let clean: Vec<f64> = weights.iter().map(|&w| if w.is_finite() && w > 0.0 { w } else { 0.0 }).collect();
    let sum: f64 = clean.iter().sum();
    let w: Vec<f64> = if sum > 0.0 { clean } else { vec![1.0; n] };
    let sum: f64 = w.iter().sum();
    let quotas: Vec<f64> = w.iter().map(|x| x / sum * budget as f64).collect();
    let mut out: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut left = budget.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut i = 0;
    while left > 0 {
        out[order[i % order.len()]] += 1;
        left -= 1;
        i += 1;
    }
    // floors can overshoot by rounding only when `budget` is astronomically large
    let mut over: u64 = out.iter().sum::<u64>().saturating_sub(budget);
    let mut j = n;
    while over > 0 {
        j = if j == 0 { n - 1 } else { j - 1 };
        if out[j] > 0 {
            out[j] -= 1;
            over -= 1;
        }
    }
    out
}

/// Raise the smallest counts toward a common level one unit at a time,
/// lowest index first on ties.
pub fn water_fill(supports: &[usize], budget: u64) -> Vec<u64> {
    let mut level: Vec<u64> = supports.iter().map(|&s| s as u64).collect();
    let mut out = vec![0u64; supports.len()];
    if supports.is_empty() {
        return out;
    }
    let mut left = budget;
    while left > 0 {
        let min = *level.iter().min().unwrap();
        let lows: Vec<usize> = (0..level.len()).filter(|&i| level[i] == min).collect();
        let next = level.iter().copied().filter(|&l| l > min).min();
        let room = next.map_or(u64::MAX, |n| (n - min).saturating_mul(lows.len() as u64));
        if room <= left {
            let step = next.unwrap() - min;
            for &i in &lows {
                level[i] += step;
                out[i] += step;
            }
            left -= room;
        } else {
            let per = left / lows.len() as u64;
            let extra = (left % lows.len() as u64) as usize;
            for (k, &i) in lows.iter().enumerate() {
                let add = per + u64::from(k < extra);
                level[i] += add;
                out[i] += add;
            }
            left = 0;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A2caWeights {
    pub rarity: f64,
    pub error: f64,
    pub domain: f64,
    pub temperature: f64,
    /// Extra `(1 − confidence)` term weight; 0 leaves confidence as a logged diagnostic.
    pub confidence: f64,
}

impl Default for A2caWeights {
    fn default() -> Self {
        Self { rarity: 1.0, error: 1.0, domain: 1.0, temperature: 0.5, confidence: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerOptions {
    pub tail_k: usize,
    pub a2ca: A2caWeights,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self { tail_k: 8, a2ca: A2caWeights::default() }
    }
}

fn normalize_max(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter().map(|x| x / max).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Spread class totals evenly over `d` domains.
fn split_over_domains(class_counts: &[u64], d: usize) -> Vec<u64> {
    let even = vec![1.0; d];
    class_counts.iter().flat_map(|&n| largest_remainder(&even, n)).collect()
}

fn check_profile(profile: &ErrorProfile) -> Result<()> {
    let c = profile.classes();
    ensure!(c >= 1, "profile has no classes");
    ensure!(profile.per_class_support.len() == c, "support length differs from class count");
    ensure!(!profile.per_domain_loss.is_empty(), "profile has no domains");
    ensure!(profile.per_class_error.iter().all(|e| (0.0..=1.0).contains(e)), "class errors must lie in [0, 1]");
    Ok(())
}

/// One plan of size `budget` under a policy, from a single profile.
pub fn allocate(policy: Policy, profile: &ErrorProfile, budget: u64, seed: u64, opts: &PlannerOptions) -> Result<AllocationPlan> {
    check_profile(profile)?;
    let c = profile.classes();
    let domains = profile.domains();
    let d = domains.len();
    let support = &profile.per_class_support;
    let dom_loss: Vec<f64> = profile.per_domain_loss.values().copied().collect();
    let tail = tail_classes(support, opts.tail_k.min(c));
    let rarity_tail: Vec<f64> = (0..c).map(|k| if tail.contains(&k) { 1.0 / support[k].max(1) as f64 } else { 0.0 }).collect();
    let flat = match policy {
        Policy::NoSynth => vec![0; c * d],
        Policy::Random => random_stream(c * d, seed).take(budget as usize).fold(vec![0; c * d], |mut acc, i| {
            acc[i] += 1;
            acc
        }),
        Policy::ClassPrior => split_over_domains(&water_fill(support, budget), d),
        Policy::UncertaintyStatic | Policy::HardCaseOnly => split_over_domains(&largest_remainder(&profile.per_class_error, budget), d),
        Policy::RareOnly => split_over_domains(&largest_remainder(&rarity_tail, budget), d),
        Policy::HardDomainOnly => {
            let per_domain = largest_remainder(&dom_loss, budget);
            let even = vec![1.0; c];
            let cols: Vec<Vec<u64>> = per_domain.iter().map(|&n| largest_remainder(&even, n)).collect();
            (0..c).flat_map(|k| cols.iter().map(move |col| col[k])).collect()
        }
        Policy::RareXHardDomain => {
            let w: Vec<f64> = rarity_tail.iter().flat_map(|&r| dom_loss.iter().map(move |&l| r * l)).collect();
            largest_remainder(&w, budget)
        }
        Policy::A2ca => return a2ca_round(std::slice::from_ref(profile), budget, &opts.a2ca),
    };
    let plan = AllocationPlan::from_flat(policy, if policy == Policy::NoSynth { 0 } else { budget }, c, domains, &flat);
    debug_assert!(plan.total() == plan.budget);
    Ok(plan)
}

/// Uniform cell indices from one seeded stream; prefixes nest across budgets.
fn random_stream(cells: usize, seed: u64) -> impl Iterator<Item = usize> {
    let mut rng = derived(seed, 0x4A4D);
    std::iter::from_fn(move || Some(rng.random_range(0..cells)))
}

/// Cell scores `α·rarity + β·error + γ·domain_loss`, each factor scaled to a
/// maximum of 1; rarity is `1/(support + 1)`.
pub fn a2ca_scores(profile: &ErrorProfile, w: &A2caWeights) -> Vec<f64> {
    let rarity = normalize_max(&profile.per_class_support.iter().map(|&s| 1.0 / (s as f64 + 1.0)).collect::<Vec<_>>());
    let error = normalize_max(&profile.per_class_error);
    let dom = normalize_max(&profile.per_domain_loss.values().copied().collect::<Vec<_>>());
    let mut out = Vec::with_capacity(rarity.len() * dom.len());
    for k in 0..rarity.len() {
        let conf = 1.0 - profile.confidence.get(k).copied().unwrap_or(1.0);
        for &dl in &dom {
            out.push(w.rarity * rarity[k] + w.error * error[k] + w.domain * dl + w.confidence * conf);
        }
    }
    out
}

/// Tempered-softmax allocation of `round_budget` from the latest profile.
pub fn a2ca_round(history: &[ErrorProfile], round_budget: u64, w: &A2caWeights) -> Result<AllocationPlan> {
    let profile = history.last().ok_or_else(|| Error::invalid("a2ca needs at least one profile"))?;
    check_profile(profile)?;
    ensure!(w.temperature > 0.0, "temperature must be positive");
    let scores = a2ca_scores(profile, w);
    if scores.iter().all(|&s| s == 0.0) {
        log::warn!("all a2ca scores are zero; allocating uniformly");
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let soft: Vec<f64> = if w.temperature.is_infinite() {
        vec![1.0; scores.len()]
    } else {
        scores.iter().map(|s| ((s - max) / w.temperature).exp()).collect()
    };
    let flat = largest_remainder(&soft, round_budget);
    Ok(AllocationPlan::from_flat(Policy::A2ca, round_budget, profile.classes(), profile.domains(), &flat))
}

/// Per-round budgets: `⌊B/R⌋` each, remainder to the last round.
pub fn round_budgets(total: u64, rounds: usize) -> Result<Vec<u64>> {
    ensure!(rounds >= 1, "need at least one round");
    let base = total / rounds as u64;
    let mut v = vec![base; rounds];
    v[rounds - 1] += total - base * rounds as u64;
    Ok(v)
}

/// Split a full static plan into round plans of the given budgets.
fn split_plan(full: &AllocationPlan, budgets: &[u64], seed: u64) -> Vec<AllocationPlan> {
    let c = full.counts.len();
    if full.policy == Policy::Random {
        let cells = c * full.domains.len();
        let mut stream = random_stream(cells, seed);
        return budgets
            .iter()
            .map(|&b| {
                let mut flat = vec![0; cells];
                for i in stream.by_ref().take(b as usize) {
                    flat[i] += 1;
                }
                AllocationPlan::from_flat(full.policy, b, c, full.domains.clone(), &flat)
            })
            .collect();
    }
    let mut remaining = full.flat();
    budgets
        .iter()
        .map(|&b| {
            let w: Vec<f64> = remaining.iter().map(|&x| x as f64).collect();
            let part = if remaining.iter().all(|&x| x == 0) { vec![0; remaining.len()] } else { largest_remainder(&w, b) };
            for (r, p) in remaining.iter_mut().zip(&part) {
                *r -= p;
            }
            let spent = part.iter().sum();
            AllocationPlan::from_flat(full.policy, spent, c, full.domains.clone(), &part)
        })
        .collect()
}

/// Test-split result and the planning profile after one executor step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub test: ClassificationMetrics,
    pub profile: ErrorProfile,
}

/// Retrains (or simulates) with the cumulative synthetic allocation.
pub trait Executor {
    fn baseline(&mut self) -> Result<Evaluation>;
    /// Inject `plan` on top of everything injected so far and re-evaluate.
    fn apply(&mut self, plan: &AllocationPlan) -> Result<Evaluation>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub plan: AllocationPlan,
    pub cumulative: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_f1_tail: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub policy: Policy,
    pub budget: u64,
    pub rounds: Vec<RoundRecord>,
    pub baseline: ClassificationMetrics,
    pub final_metrics: ClassificationMetrics,
}

impl Trajectory {
    pub fn final_macro_f1(&self) -> f64 {
        self.final_metrics.macro_f1
    }
}

/// Run `rounds` rounds spending `budget` in total. Round 0 in the record
/// list is the baseline with an empty plan.
pub fn run_loop(policy: Policy, budget: u64, rounds: usize, executor: &mut dyn Executor, seed: u64, opts: &PlannerOptions) -> Result<Trajectory> {
    let budgets = round_budgets(budget, rounds)?;
    let base = executor.baseline().map_err(|e| Error::Round { round: 0, source: Box::new(e) })?;
    let classes = base.profile.classes();
    let domains = base.profile.domains();
    let mut records = vec![RoundRecord {
        round: 0,
        plan: AllocationPlan::zeros(policy, classes, domains.clone()),
        cumulative: 0,
        accuracy: base.test.accuracy,
        macro_f1: base.test.macro_f1,
        macro_f1_tail: base.test.macro_f1_tail,
    }];
    let static_plans = if policy.is_static() {
        let full = allocate(policy, &base.profile, budget, seed, opts)?;
        Some(split_plan(&full, &budgets, seed))
    } else {
        None
    };
    let mut history = vec![base.profile.clone()];
    let mut last = base.test.clone();
    let mut cumulative = 0;
    for (r, &b) in budgets.iter().enumerate() {
        let round = r + 1;
        let plan = match &static_plans {
            Some(plans) => plans[r].clone(),
            None => a2ca_round(&history, b, &opts.a2ca)?,
        };
        let eval = executor.apply(&plan).map_err(|e| Error::Round { round, source: Box::new(e) })?;
        cumulative += plan.total();
        records.push(RoundRecord {
            round,
            plan,
            cumulative,
            accuracy: eval.test.accuracy,
            macro_f1: eval.test.macro_f1,
            macro_f1_tail: eval.test.macro_f1_tail,
        });
        let mut profile = eval.profile;
        profile.round_index = round;
        history.push(profile);
        last = eval.test;
    }
    Ok(Trajectory { policy, budget, rounds: records, baseline: base.test, final_metrics: last })
}

/// Saturating per-cell response `gain_max·(1 − e^{−n/τ})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCurve {
    pub gain_max: f64,
    pub tau: f64,
}

impl CellCurve {
    pub fn gain(&self, n: f64) -> f64 {
        self.gain_max * (1.0 - (-n / self.tau).exp())
    }
}

/// Fast surrogate for retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseModel {
    pub domains: Vec<String>,
    /// `C × D` base recall.
    pub base_recall: Vec<Vec<f64>>,
    /// `C × D` response curves.
    pub curves: Vec<Vec<CellCurve>>,
    /// Fixed per-class precision used for F1.
    pub precision: Vec<f64>,
    pub support: Vec<usize>,
    pub tail_k: usize,
}

/// Evaluation support per class used to render the simulated confusion matrix.
pub const VIRTUAL_SUPPORT: u64 = 1_000_000;

impl ResponseModel {
    pub fn classes(&self) -> usize {
        self.base_recall.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes();
        let d = self.domains.len();
        ensure!(c >= 2 && d >= 1, "response model needs >= 2 classes and >= 1 domain");
        ensure!(self.curves.len() == c && self.precision.len() == c && self.support.len() == c, "response model class dimensions differ");
        for k in 0..c {
            ensure!(self.base_recall[k].len() == d && self.curves[k].len() == d, "response model domain dimensions differ");
            for (b, cv) in self.base_recall[k].iter().zip(&self.curves[k]) {
                ensure!((0.0..=1.0).contains(b), "base recall outside [0, 1]");
                ensure!((0.0..=1.0).contains(&cv.gain_max) && cv.tau > 0.0, "invalid response curve");
                ensure!(b + cv.gain_max <= 1.0 + 1e-12, "base + gain_max exceeds 1");
            }
        }
        Ok(())
    }

    /// Flat curves with the same base and gains everywhere.
    pub fn uniform(classes: usize, domains: usize, base: f64, gain_max: f64, tau: f64, support: usize) -> Self {
        Self {
            domains: (0..domains).map(|i| format!("d{i}")).collect(),
            base_recall: vec![vec![base; domains]; classes],
            curves: vec![vec![CellCurve { gain_max, tau }; domains]; classes],
            precision: vec![0.8; classes],
            support: vec![support; classes],
            tail_k: 8.min(classes),
        }
    }

    /// Seeded heterogeneous model over the long-tail supports. Base recall
    /// grows with log-support; headroom fractions vary over `[0.2, 0.8]`
    /// and `τ` over `[25, 200]`, log-uniform.
    pub fn heterogeneous(support: &[usize], domains: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let max_log = (1.0 + *support.iter().max().unwrap_or(&1) as f64).ln();
        let mut base_recall = Vec::new();
        let mut curves = Vec::new();
        let mut precision = Vec::new();
        for &s in support {
            let b = 0.1 + 0.75 * (1.0 + s as f64).ln() / max_log;
            let mut row_b = Vec::new();
            let mut row_c = Vec::new();
            for _ in 0..domains {
                let bd = (b + rng.random_range(-0.05..0.05)).clamp(0.0, 0.95);
                let frac = 0.2 * 4f64.powf(rng.random::<f64>());
                let tau = 25.0 * 8f64.powf(rng.random::<f64>());
                row_b.push(bd);
                row_c.push(CellCurve { gain_max: frac * (1.0 - bd), tau });
            }
            base_recall.push(row_b);
            curves.push(row_c);
            precision.push((0.5 + 0.4 * (1.0 + s as f64).ln() / max_log).min(0.95));
        }
        Self { domains: (0..domains).map(|i| format!("d{i}")).collect(), base_recall, curves, precision, support: support.to_vec(), tail_k: 8.min(support.len()) }
    }

    /// The fixed reference model used by the ordering checks.
    pub fn reference() -> Self {
        Self::heterogeneous(&crate::benchkit::scaled_class_counts(&crate::benchkit::TABLE6_COUNTS, 500, 2), 2, 0)
    }

    pub fn cell_recall(&self, class: usize, domain: usize, n: u64) -> f64 {
        self.base_recall[class][domain] + self.curves[class][domain].gain(n as f64)
    }
}

/// Metrics after injecting `plan` (cumulative counts) into the surrogate.
pub fn simulate_response(plan: &AllocationPlan, model: &ResponseModel) -> Result<ClassificationMetrics> {
    let c = model.classes();
    let d = model.domains.len();
    ensure!(plan.counts.len() == c && plan.domains.len() == d, "plan dimensions do not match the response model");
    let cell: Vec<Vec<f64>> = plan.counts.iter().enumerate().map(|(k, row)| row.iter().enumerate().map(|(j, &n)| model.cell_recall(k, j, n)).collect()).collect();
    let recall: Vec<f64> = cell.iter().map(|r| r.iter().sum::<f64>() / d as f64).collect();
    let f1: Vec<f64> = recall.iter().zip(&model.precision).map(|(&r, &p)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }).collect();
    let tail = tail_classes(&model.support, model.tail_k);
    let total_support: usize = model.support.iter().sum();
    let accuracy = recall.iter().zip(&model.support).map(|(r, &s)| r * s as f64).sum::<f64>() / total_support.max(1) as f64;
    let mut confusion = vec![vec![0u64; c]; c];
    for k in 0..c {
        let hit = (recall[k] * VIRTUAL_SUPPORT as f64).round() as u64;
        confusion[k][k] = hit;
        confusion[k][(k + 1) % c] += VIRTUAL_SUPPORT - hit;
    }
    let per_domain_loss = (0..d).map(|j| (model.domains[j].clone(), (0..c).map(|k| 1.0 - cell[k][j]).sum::<f64>() / c as f64)).collect();
    Ok(ClassificationMetrics {
        accuracy,
        macro_f1: f1.iter().sum::<f64>() / c as f64,
        macro_f1_tail: tail.iter().map(|&k| f1[k]).sum::<f64>() / tail.len().max(1) as f64,
        per_class_f1: f1,
        per_class_recall: recall.clone(),
        confusion,
        per_domain_loss,
        confidence: recall,
        mean_loss: 0.0,
    })
}

/// Executor over a [`ResponseModel`] with cumulative injected counts.
pub struct SimulatedExecutor {
    pub model: ResponseModel,
    injected: AllocationPlan,
}

impl SimulatedExecutor {
    pub fn new(model: ResponseModel) -> Result<Self> {
        model.validate()?;
        let injected = AllocationPlan::zeros(Policy::NoSynth, model.classes(), model.domains.clone());
        Ok(Self { model, injected })
    }

    fn evaluate(&self) -> Result<Evaluation> {
        let test = simulate_response(&self.injected, &self.model)?;
        let supports: Vec<usize> = self.model.support.iter().zip(self.injected.class_totals()).map(|(&s, n)| s + n as usize).collect();
        let profile = profile_from_eval(&test, &supports, None, 0)?;
        Ok(Evaluation { test, profile })
    }
}

impl Executor for SimulatedExecutor {
    fn baseline(&mut self) -> Result<Evaluation> {
        self.injected = AllocationPlan::zeros(Policy::NoSynth, self.model.classes(), self.model.domains.clone());
        self.evaluate()
    }

    fn apply(&mut self, plan: &AllocationPlan) -> Result<Evaluation> {
        self.injected.accumulate(plan)?;
        self.evaluate()
    }
}

/// Final simulated metrics for each budget.
pub fn budget_sweep(policy: Policy, budgets: &[u64], rounds: usize, model: &ResponseModel, seed: u64, opts: &PlannerOptions) -> Result<Vec<(u64, ClassificationMetrics)>> {
    budgets
        .iter()
        .map(|&b| {
            let mut ex = SimulatedExecutor::new(model.clone())?;
            let t = run_loop(policy, b, rounds, &mut ex, seed, opts)?;
            Ok((b, t.final_metrics))
        })
        .collect()
}

/// One leave-one-source-out fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub held_out: String,
}

pub fn loso_folds(sources: &[String]) -> Result<Vec<Fold>> {
    ensure!(sources.len() >= 2, "LoSO needs at least two sources");
    let mut seen = std::collections::BTreeSet::new();
    ensure!(sources.iter().all(|s| seen.insert(s)), "duplicate source tag");
    Ok(sources
        .iter()
        .enumerate()
        .map(|(i, s)| Fold { train: sources.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x.clone()).collect(), held_out: s.clone() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(errors: Vec<f64>, support: Vec<usize>, domains: &[(&str, f64)]) -> ErrorProfile {
        let c = errors.len();
        ErrorProfile {
            per_class_error: errors,
            per_class_support: support,
            per_domain_loss: domains.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            confidence: vec![0.5; c],
            round_index: 0,
            unsupported: vec![],
        }
    }

    #[test]
    fn class_prior_water_fills() {
        let p = profile(vec![0.0; 3], vec![100, 10, 5], &[("a", 1.0)]);
        let plan = allocate(Policy::ClassPrior, &p, 85, 0, &PlannerOptions::default()).unwrap();
        assert_eq!(plan.counts, vec![vec![0], vec![40], vec![45]]);
    }

    #[test]
    fn uncertainty_proportional() {
        let p = profile(vec![0.2, 0.1, 0.7], vec![1, 1, 1], &[("a", 1.0)]);
        let plan = allocate(Policy::UncertaintyStatic, &p, 10, 0, &PlannerOptions::default()).unwrap();
        assert_eq!(plan.class_totals(), vec![2, 1, 7]);
    }

    #[test]
    fn zero_budget_gives_zero_plans() {
        let p = profile(vec![0.3, 0.5], vec![4, 2], &[("a", 0.2), ("b", 0.9)]);
        for policy in Policy::ALL {
            assert_eq!(allocate(policy, &p, 0, 3, &PlannerOptions::default()).unwrap().total(), 0, "{policy}");
        }
    }

    #[test]
    fn every_policy_conserves_budget() {
        let p = profile(vec![0.3, 0.5, 0.0, 1.0], vec![40, 2, 9, 1], &[("a", 0.2), ("b", 0.9), ("c", 0.0)]);
        let opts = PlannerOptions { tail_k: 2, ..Default::default() };
        for policy in Policy::ALL.into_iter().filter(|&p| p != Policy::NoSynth) {
            for b in [1, 7, 100, 1001] {
                assert_eq!(allocate(policy, &p, b, 9, &opts).unwrap().total(), b, "{policy} {b}");
            }
        }
    }

    #[test]
    fn largest_remainder_ties_and_zeros() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 2), vec![1, 1, 0]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.0, 5.0], 3), vec![0, 3]);
    }

    #[test]
    fn profile_recall_arithmetic() {
        let m = ClassificationMetrics::from_logits(&[vec![1.0, 0.0]], &[0], &["a"], 2, &[1]).unwrap();
        let mut m2 = m.clone();
        m2.confusion = vec![vec![8, 2], vec![1, 9]];
        let p = profile_from_eval(&m2, &[10, 10], None, 0).unwrap();
        assert!((p.per_class_error[0] - 0.2).abs() < 1e-12 && (p.per_class_error[1] - 0.1).abs() < 1e-12);
        m2.confusion = vec![vec![0, 0], vec![0, 3]];
        let p = profile_from_eval(&m2, &[10, 10], None, 0).unwrap();
        assert_eq!(p.per_class_error, vec![1.0, 0.0]);
        assert_eq!(p.unsupported, vec![0]);
    }

    #[test]
    fn a2ca_concentrates_and_flattens() {
        let mut errors = vec![0.0; 6];
        errors[3] = 1.0;
        let p = profile(errors, vec![10; 6], &[("a", 1.0), ("b", 0.0)]);
        let cold = A2caWeights { temperature: 0.05, ..Default::default() };
        let plan = a2ca_round(std::slice::from_ref(&p), 100, &cold).unwrap();
        assert!(plan.counts[3][0] >= 90);
        let hot = A2caWeights { temperature: f64::INFINITY, ..Default::default() };
        let flat = a2ca_round(&[p], 120, &hot).unwrap();
        assert!(flat.counts.iter().flatten().all(|&n| n == 10));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("greedy".parse::<Policy>().is_err());
    }

    #[test]
    fn curve_closed_form() {
        let c = CellCurve { gain_max: 0.4, tau: 30.0 };
        assert!((c.gain(30.0) - 0.4 * (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert_eq!(c.gain(0.0), 0.0);
        assert!((c.gain(1e9) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn rounds_split_with_remainder_last() {
        assert_eq!(round_budgets(302, 5).unwrap(), vec![60, 60, 60, 60, 62]);
        assert!(round_budgets(10, 0).is_err());
    }

    #[test]
    fn folds_partition_sources() {
        let s: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|x| x.to_string()).collect();
        let f = loso_folds(&s).unwrap();
        assert_eq!(f.len(), 5);
        assert_eq!(f.iter().map(|x| x.held_out.clone()).collect::<Vec<_>>(), s);
        assert!(f.iter().all(|x| x.train.len() == 4 && !x.train.contains(&x.held_out)));
        assert!(loso_folds(&s[..1]).is_err());
    }
}
