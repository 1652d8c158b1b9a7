//! Conditional flow matching on linear noise-to-data paths.
//!
//! Velocity fields act row-wise: a sample is a `frames × bins` matrix and
//! its condition a `frames × c` matrix, so batches are stacked by rows
//! with one time value per row.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Bound, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::params::{finite_difference_check, Adam, AdamConfig, GradCheck, ParamId, ParamStore};
use crate::rng::{derived, seeded, Rng};
use crate::tensor::Mat;
use crate::unit_gen::UnitSequence;

pub const DEFAULT_STEPS: usize = 32;
pub const DEFAULT_SIGMA: f64 = 1.0;
/// Reference prefix length as a fraction of the output frames.
pub const DEFAULT_PREFIX_FRACTION: f64 = 0.1;

/// `round(DEFAULT_PREFIX_FRACTION · frames)`.
pub fn default_prefix_len(frames: usize) -> usize {
    (DEFAULT_PREFIX_FRACTION * frames as f64).round() as usize
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate(x0: &Mat, x1: &Mat, t: f64) -> Result<Mat> {
    x0.check_same_shape(x1)?;
    ensure!((0.0..=1.0).contains(&t), "t = {t} outside [0, 1]");
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

/// `x1 − x0`, the constant velocity of the linear path.
pub fn velocity_target(x0: &Mat, x1: &Mat) -> Result<Mat> {
    x1.sub(x0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub x0: Mat,
    pub x1: Mat,
    pub t: f64,
    pub xt: Mat,
}

impl FlowSample {
    pub fn new(x0: Mat, x1: Mat, t: f64) -> Result<Self> {
        let xt = interpolate(&x0, &x1, t)?;
        Ok(Self { x0, x1, t, xt })
    }

    /// Noise `x0 ~ N(0, σ²I)` and `t ~ U[0, 1]`.
    pub fn draw(x1: Mat, sigma: f64, rng: &mut Rng) -> Result<Self> {
        ensure!(sigma > 0.0, "sigma must be positive");
        let x0 = Mat::randn(x1.rows(), x1.cols(), sigma, rng);
        let t = rng.random::<f64>();
        Self::new(x0, x1, t)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentInterp {
    #[default]
    Nearest,
    Linear,
}

/// Dual-path conditioner: per-frame content, broadcast timbre, reference prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub content: Mat,
    pub timbre: Vec<f64>,
    pub ref_prefix: Mat,
    pub prefix_len: usize,
}

impl Condition {
    pub fn frames(&self) -> usize {
        self.content.rows()
    }

    /// `[content | timbre | prefix]` per frame.
    pub fn features(&self) -> Mat {
        let f = self.frames();
        let (e, d, b) = (self.content.cols(), self.timbre.len(), self.ref_prefix.cols());
        let mut out = Mat::zeros(f, e + d + b);
        for r in 0..f {
            let row = out.row_mut(r);
            row[..e].copy_from_slice(self.content.row(r));
            row[e..e + d].copy_from_slice(&self.timbre);
            row[e + d..].copy_from_slice(self.ref_prefix.row(r));
        }
        out
    }
}

/// Nearest-neighbour source index for output frame `i`: `⌊i·L/F⌋`.
pub fn nearest_index(i: usize, len: usize, frames: usize) -> usize {
    i * len / frames
}

pub fn build_condition(
    units: &UnitSequence,
    unit_embed: &Mat,
    timbre_frames: &Mat,
    reference: &Mat,
    prefix_len: usize,
    mel_frames: usize,
    interp: ContentInterp,
) -> Result<Condition> {
    ensure!(!units.units.is_empty(), "empty unit sequence");
    ensure!(mel_frames >= 1, "mel_frames must be >= 1");
    ensure!(prefix_len <= mel_frames, "prefix {prefix_len} longer than {mel_frames} frames");
    ensure!(prefix_len <= reference.rows(), "reference shorter than prefix");
    ensure!(timbre_frames.rows() >= 1, "timbre needs at least one frame");
    ensure!(units.units.iter().all(|&u| u < unit_embed.rows()), "unit id outside embedding table");
    let l = units.units.len();
    let e = unit_embed.cols();
    let mut content = Mat::zeros(mel_frames, e);
    for i in 0..mel_frames {
        match interp {
            ContentInterp::Nearest => content.set_row(i, unit_embed.row(units.units[nearest_index(i, l, mel_frames)])),
            ContentInterp::Linear => {
                let pos = if mel_frames == 1 { 0.0 } else { i as f64 * (l - 1) as f64 / (mel_frames - 1) as f64 };
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(l - 1);
                let w = pos - lo as f64;
                let (a, b) = (unit_embed.row(units.units[lo]), unit_embed.row(units.units[hi]));
                for (c, o) in content.row_mut(i).iter_mut().enumerate() {
                    *o = (1.0 - w) * a[c] + w * b[c];
                }
            }
        }
    }
    let timbre = timbre_frames.col_means();
    let mut ref_prefix = Mat::zeros(mel_frames, reference.cols());
    for r in 0..prefix_len {
        ref_prefix.set_row(r, reference.row(r));
    }
    Ok(Condition { content, timbre, ref_prefix, prefix_len })
}

/// `v(x, c, t)` applied to all rows of `x` with matching rows of `cond`.
pub trait VelocityField: Sync {
    fn velocity(&self, x: &Mat, cond: &Mat, t: f64) -> Result<Mat>;
}

/// `v ≡ c0` for every row.
#[derive(Clone, Debug)]
pub struct ConstantField(pub Vec<f64>);

impl VelocityField for ConstantField {
    fn velocity(&self, x: &Mat, _cond: &Mat, _t: f64) -> Result<Mat> {
        ensure!(self.0.len() == x.cols(), "constant field width mismatch");
        let mut out = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            out.set_row(r, &self.0);
        }
        Ok(out)
    }
}

/// Returns its condition unchanged; with `cond = x1 − x0` it is the exact teacher.
#[derive(Clone, Copy, Debug)]
pub struct EchoField;

impl VelocityField for EchoField {
    fn velocity(&self, x: &Mat, cond: &Mat, _t: f64) -> Result<Mat> {
        x.check_same_shape(cond)?;
        Ok(cond.clone())
    }
}

/// Flow toward a fixed target: `(x1* − x) / (1 − t)`.
#[derive(Clone, Debug)]
pub struct TargetField(pub Mat);

impl VelocityField for TargetField {
    fn velocity(&self, x: &Mat, _cond: &Mat, t: f64) -> Result<Mat> {
        ensure!(t < 1.0, "target field undefined at t = 1");
        Ok(self.0.sub(x)?.scale(1.0 / (1.0 - t)))
    }
}

/// `mean ‖v(x_t, c, t) − (x1 − x0)‖²` over samples and elements.
pub fn cfm_loss(field: &dyn VelocityField, samples: &[FlowSample], conds: &[Mat]) -> Result<f64> {
    ensure!(!samples.is_empty(), "empty flow batch");
    ensure!(samples.len() == conds.len(), "one condition per sample required");
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (s, c)) in samples.iter().zip(conds).enumerate() {
        let v = field.velocity(&s.xt, c, s.t)?;
        let err = v.sub(&velocity_target(&s.x0, &s.x1)?)?.sum_sq();
        if !err.is_finite() {
            return Err(Error::Numeric { batch: i });
        }
        total += err;
        count += v.len();
    }
    Ok(total / count as f64)
}

/// Euler integration from `x0`: `x ← x + v(x, c, k/N)/N` for `k = 0..N`.
pub fn euler_integrate(field: &dyn VelocityField, cond: &Mat, x0: Mat, steps: usize) -> Result<Mat> {
    ensure!(steps >= 1, "need at least one Euler step");
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let v = field.velocity(&x, cond, k as f64 / steps as f64)?;
        x.scaled_add_assign(dt, &v);
    }
    Ok(x)
}

/// Draw `x0 ~ N(0, σ²I)` of shape `rows × cols` and integrate.
pub fn euler_sample(field: &dyn VelocityField, cond: &Mat, rows: usize, cols: usize, steps: usize, sigma: f64, seed: u64) -> Result<Mat> {
    ensure!(sigma > 0.0, "sigma must be positive");
    let x0 = Mat::randn(rows, cols, sigma, &mut seeded(seed));
    euler_integrate(field, cond, x0, steps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VnetConfig {
    pub x_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    /// Residual blocks after the input layer.
    pub depth: usize,
    /// Sinusoidal time features (even).
    pub time_features: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for VnetConfig {
    fn default() -> Self {
        Self { x_dim: 2, cond_dim: 2, hidden: 64, depth: 2, time_features: 16, activation: Activation::Silu, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VnetIds {
    w_in: ParamId,
    b_in: ParamId,
    w_cond: ParamId,
    w_time: ParamId,
    blocks: Vec<[ParamId; 4]>,
    w_out: ParamId,
    b_out: ParamId,
}

/// Residual perceptron with sinusoidal time embedding and additive
/// condition injection.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    pub cfg: VnetConfig,
    pub params: ParamStore,
    ids: VnetIds,
}

/// `[sin(t·ω_j), cos(t·ω_j)]` with geometric frequencies `ω_j = 2^j·π/2`.
pub fn time_features(ts: &[f64], width: usize) -> Mat {
    let mut m = Mat::zeros(ts.len(), width);
    for (r, &t) in ts.iter().enumerate() {
        for j in 0..width / 2 {
            let w = std::f64::consts::FRAC_PI_2 * 2f64.powi(j as i32);
            m[(r, 2 * j)] = (t * w).sin();
            m[(r, 2 * j + 1)] = (t * w).cos();
        }
    }
    m
}

impl VelocityNet {
    pub fn new(cfg: VnetConfig) -> Result<Self> {
        ensure!(cfg.x_dim >= 1 && cfg.hidden >= 1, "vnet needs positive widths");
        ensure!(cfg.time_features % 2 == 0, "time feature width must be even");
        let mut rng = derived(cfg.seed, 0xCF3);
        let h = cfg.hidden;
        let mut s = ParamStore::new();
        let std = |fan: usize| 1.0 / (fan.max(1) as f64).sqrt();
        let w_in = s.add("w_in", Mat::randn(cfg.x_dim, h, std(cfg.x_dim), &mut rng));
        let b_in = s.add("b_in", Mat::zeros(1, h));
        let w_cond = s.add("w_cond", Mat::randn(cfg.cond_dim, h, std(cfg.cond_dim), &mut rng));
        let w_time = s.add("w_time", Mat::randn(cfg.time_features, h, std(cfg.time_features), &mut rng));
        let blocks = (0..cfg.depth)
            .map(|l| {
                [
                    s.add(format!("res{l}.w_a"), Mat::randn(h, h, std(h), &mut rng)),
                    s.add(format!("res{l}.b_a"), Mat::zeros(1, h)),
                    s.add(format!("res{l}.w_b"), Mat::randn(h, h, 0.5 * std(h), &mut rng)),
                    s.add(format!("res{l}.b_b"), Mat::zeros(1, h)),
                ]
            })
            .collect();
        let w_out = s.add("w_out", Mat::randn(h, cfg.x_dim, std(h), &mut rng));
        let b_out = s.add("b_out", Mat::zeros(1, cfg.x_dim));
        Ok(Self { cfg, params: s, ids: VnetIds { w_in, b_in, w_cond, w_time, blocks, w_out, b_out } })
    }

    pub fn with_params(cfg: VnetConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        ensure!(m.params.names() == params.names(), "parameter layout does not match config");
        ensure!(m.params.values().iter().zip(params.values()).all(|(a, b)| a.shape() == b.shape()), "parameter shape mismatch");
        m.params = params;
        Ok(m)
    }

    fn on_tape(&self, tape: &mut Tape, p: &Bound, x: &Mat, cond: &Mat, ts: &[f64]) -> Var {
        let act = self.cfg.activation;
        let xv = tape.leaf(x.clone());
        let cv = tape.leaf(cond.clone());
        let tv = tape.leaf(time_features(ts, self.cfg.time_features));
        let a = tape.affine(xv, p[self.ids.w_in], p[self.ids.b_in]);
        let c = tape.matmul(cv, p[self.ids.w_cond]);
        let t = tape.matmul(tv, p[self.ids.w_time]);
        let h = tape.add(a, c);
        let h = tape.add(h, t);
        let mut h = tape.act(h, act);
        for [wa, ba, wb, bb] in &self.ids.blocks {
            let u = tape.affine(h, p[*wa], p[*ba]);
            let u = tape.act(u, act);
            let u = tape.affine(u, p[*wb], p[*bb]);
            h = tape.add(h, u);
        }
        tape.affine(h, p[self.ids.w_out], p[self.ids.b_out])
    }

    fn check(&self, x: &Mat, cond: &Mat) -> Result<()> {
        ensure!(x.cols() == self.cfg.x_dim, "x width {} != {}", x.cols(), self.cfg.x_dim);
        ensure!(cond.cols() == self.cfg.cond_dim, "condition width {} != {}", cond.cols(), self.cfg.cond_dim);
        ensure!(cond.rows() == x.rows(), "condition rows differ from x rows");
        Ok(())
    }

    /// Row-wise velocity with per-row times.
    pub fn velocity_rows(&self, x: &Mat, cond: &Mat, ts: &[f64]) -> Result<Mat> {
        self.check(x, cond)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let out = self.on_tape(&mut tape, &p, x, cond, ts);
        Ok(tape.value(out).clone())
    }

    /// Loss of [`cfm_loss`] on a stacked batch, evaluated at `store`.
    pub fn batch_loss_with(&self, store: &ParamStore, batch: &FlowBatch) -> f64 {
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let v = self.on_tape(&mut tape, &p, &batch.xt, &batch.cond, &batch.t_rows);
        let loss = tape.mse(v, &batch.target);
        tape.scalar(loss)
    }

    pub fn batch_loss_grads(&self, batch: &FlowBatch) -> Result<(f64, Vec<Mat>)> {
        self.check(&batch.xt, &batch.cond)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params);
        let v = self.on_tape(&mut tape, &p, &batch.xt, &batch.cond, &batch.t_rows);
        let loss = tape.mse(v, &batch.target);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric { batch: first_bad_sample(&tape.value(v).clone(), batch) });
        }
        Ok((value, tape.backward(loss).for_params(p.vars(), &self.params)))
    }
}

fn first_bad_sample(v: &Mat, batch: &FlowBatch) -> usize {
    let bad_row = (0..v.rows()).find(|&r| v.row(r).iter().any(|x| !x.is_finite())).unwrap_or(0);
    batch.row_owner.get(bad_row).copied().unwrap_or(0)
}

impl VelocityField for VelocityNet {
    fn velocity(&self, x: &Mat, cond: &Mat, t: f64) -> Result<Mat> {
        self.velocity_rows(x, cond, &vec![t; x.rows()])
    }
}

/// Samples stacked by rows for one tape pass.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub xt: Mat,
    pub target: Mat,
    pub cond: Mat,
    pub t_rows: Vec<f64>,
    /// Sample index of every row.
    pub row_owner: Vec<usize>,
}

impl FlowBatch {
    pub fn from_samples(samples: &[FlowSample], conds: &[Mat]) -> Result<Self> {
        ensure!(!samples.is_empty() && samples.len() == conds.len(), "need one condition per sample");
        let cols = samples[0].x1.cols();
        let cc = conds[0].cols();
        let mut xt = Vec::new();
        let mut target = Vec::new();
        let mut cond = Vec::new();
        let mut t_rows = Vec::new();
        let mut row_owner = Vec::new();
        for (i, (s, c)) in samples.iter().zip(conds).enumerate() {
            ensure!(s.x1.cols() == cols && c.cols() == cc, "ragged flow batch");
            ensure!(c.rows() == s.x1.rows(), "condition rows differ from sample rows");
            xt.extend_from_slice(s.xt.as_slice());
            target.extend_from_slice(velocity_target(&s.x0, &s.x1)?.as_slice());
            cond.extend_from_slice(c.as_slice());
            t_rows.extend(std::iter::repeat_n(s.t, s.x1.rows()));
            row_owner.extend(std::iter::repeat_n(i, s.x1.rows()));
        }
        let rows = t_rows.len();
        Ok(Self {
            xt: Mat::from_vec(rows, cols, xt)?,
            target: Mat::from_vec(rows, cols, target)?,
            cond: Mat::from_vec(rows, cc, cond)?,
            t_rows,
            row_owner,
        })
    }
}

/// Finite-difference check of the stacked-batch loss gradient.
pub fn gradcheck(net: &VelocityNet, batch: &FlowBatch, coords: usize, step: f64, seed: u64) -> Result<GradCheck> {
    let (_, grads) = net.batch_loss_grads(batch)?;
    Ok(finite_difference_check(&net.params, &grads, &|s| net.batch_loss_with(s, batch), coords, step, seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 256, learning_rate: 3e-3, sigma: DEFAULT_SIGMA, seed: 0 }
    }
}

/// Train `net` on pairs `(x1, cond)` produced by `draw`.
pub fn train_flow(net: &mut VelocityNet, cfg: &FlowTrainConfig, draw: &dyn Fn(&mut Rng) -> (Mat, Mat)) -> Result<Vec<f64>> {
    let mut rng = derived(cfg.seed, 0xF10);
    let mut opt = Adam::new(&net.params, AdamConfig { lr: cfg.learning_rate, ..Default::default() });
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut samples = Vec::with_capacity(cfg.batch_size);
        let mut conds = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (x1, c) = draw(&mut rng);
            samples.push(FlowSample::draw(x1, cfg.sigma, &mut rng)?);
            conds.push(c);
        }
        let batch = FlowBatch::from_samples(&samples, &conds)?;
        let (loss, grads) = net.batch_loss_grads(&batch).map_err(|e| match e {
            Error::Numeric { .. } => Error::TrainingFailure { epoch: step, reason: e.to_string() },
            other => other,
        })?;
        opt.step(&mut net.params, &grads);
        losses.push(loss);
    }
    Ok(losses)
}

/// Isotropic 2-D Gaussian mixture whose component is selected by a one-hot condition.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<[f64; 2]>,
    pub std: f64,
}

impl Default for GaussianMixture {
    fn default() -> Self {
        Self { means: vec![[2.0, 1.0], [-2.0, -1.0]], std: 0.5 }
    }
}

impl GaussianMixture {
    pub fn one_hot(&self, k: usize) -> Mat {
        let mut c = Mat::zeros(1, self.means.len());
        c[(0, k)] = 1.0;
        c
    }

    pub fn draw(&self, rng: &mut Rng) -> (Mat, Mat) {
        let k = rng.random_range(0..self.means.len());
        let noise = Mat::randn(1, 2, self.std, rng);
        let x = Mat::row_vector(&[self.means[k][0] + noise[(0, 0)], self.means[k][1] + noise[(0, 1)]]);
        (x, self.one_hot(k))
    }

    fn nearest(&self, p: &[f64]) -> usize {
        let d = |m: &[f64; 2]| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
        (0..self.means.len()).min_by(|&a, &b| d(&self.means[a]).total_cmp(&d(&self.means[b]))).unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: usize,
    pub purity: f64,
    pub mean: [f64; 2],
    pub mean_error: f64,
}

/// Sample `n` points per component with the sampler and score them.
pub fn evaluate_mixture(field: &dyn VelocityField, gmm: &GaussianMixture, n: usize, steps: usize, sigma: f64, seed: u64) -> Result<Vec<ComponentReport>> {
    (0..gmm.means.len())
        .map(|k| {
            let c = gmm.one_hot(k);
            let cond = Mat::from_vec(n, c.cols(), c.as_slice().repeat(n))?;
            let x = euler_sample(field, &cond, n, 2, steps, sigma, crate::rng::derive_seed(seed, k as u64))?;
            let hits = (0..n).filter(|&r| gmm.nearest(x.row(r)) == k).count();
            let m = x.col_means();
            let mean = [m[0], m[1]];
            let mean_error = ((mean[0] - gmm.means[k][0]).powi(2) + (mean[1] - gmm.means[k][1]).powi(2)).sqrt();
            Ok(ComponentReport { component: k, purity: hits as f64 / n as f64, mean, mean_error })
        })
        .collect()
}
