//! Named parameter storage, the Adam optimizer, versioned binary
//! checkpoints and the finite-difference gradient harness.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::seeded;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Flat coordinate `c` as `(param index, offset)`.
    pub fn locate(&self, mut c: usize) -> (usize, usize) {
        for (i, v) in self.values.iter().enumerate() {
            if c < v.len() {
                return (i, c);
            }
            c -= v.len();
        }
        panic!("coordinate out of range");
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Mat::all_finite)
    }

    /// Serialize as `RSPA` magic, format version, then each named tensor.
    pub fn write_blob<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&BLOB_VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for (name, m) in self.names.iter().zip(&self.values) {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for x in m.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        ensure!(&magic == BLOB_MAGIC, "not a parameter blob");
        let version = read_u32(&mut r)?;
        ensure!(version == BLOB_VERSION, "unsupported blob version {version}");
        let count = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u64(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::invalid("non-utf8 tensor name"))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.add(name, Mat::from_vec(rows, cols, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_blob(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_blob(bytes.as_slice())
    }
}

const BLOB_MAGIC: &[u8; 4] = b"RSPA";
pub const BLOB_VERSION: u32 = 1;

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::invalid("truncated parameter blob"))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Sum per-sample gradient lists in order.
pub fn sum_grads(parts: Vec<Vec<Mat>>) -> Option<Vec<Mat>> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next()?;
    for g in iter {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    Some(acc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: store.zeros_like(), v: store.zeros_like() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.step += 1;
        let c = &self.cfg;
        let mut clip = 1.0;
        if let Some(max) = c.clip_norm {
            let norm = grads.iter().map(Mat::sum_sq).sum::<f64>().sqrt();
            if norm > max {
                clip = max / norm;
            }
        }
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for ((p, g), (m, v)) in store.values_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] -= c.lr * (update + c.weight_decay * p[i]);
            }
        }
    }
}

/// Result of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GradCheck {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compare `analytic` (one matrix per parameter) against central
/// differences of `loss` over `coords` randomly chosen scalars.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`, the floor keeping
/// vanishing gradients from dominating.
pub fn finite_difference_check(
    store: &ParamStore,
    analytic: &[Mat],
    loss: &dyn Fn(&ParamStore) -> f64,
    coords: usize,
    step: f64,
    seed: u64,
) -> GradCheck {
    const FLOOR: f64 = 1e-6;
    let total = store.num_scalars();
    let picks = sample(&mut seeded(seed), total, coords.min(total)).into_vec();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut probe = store.clone();
    for &c in &picks {
        let (pi, off) = store.locate(c);
        let orig = store.values()[pi].as_slice()[off];
        probe.values_mut()[pi].as_mut_slice()[off] = orig + step;
        let up = loss(&probe);
        probe.values_mut()[pi].as_mut_slice()[off] = orig - step;
        let down = loss(&probe);
        probe.values_mut()[pi].as_mut_slice()[off] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[pi].as_slice()[off];
        let abs = (a - numeric).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / a.abs().max(numeric.abs()).max(FLOOR));
    }
    GradCheck { coordinates: picks.len(), max_rel_error: max_rel, max_abs_error: max_abs }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_and_corruption() {
        let mut rng = seeded(2);
        let mut store = ParamStore::new();
        store.add("w", Mat::randn(3, 2, 1.0, &mut rng));
        store.add("b", Mat::randn(1, 2, 1.0, &mut rng));
        let mut buf = Vec::new();
        store.write_blob(&mut buf).unwrap();
        assert_eq!(ParamStore::read_blob(buf.as_slice()).unwrap(), store);
        assert!(ParamStore::read_blob(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(ParamStore::read_blob(buf.as_slice()).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::row_vector(&[3.0, -2.0]));
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.1, clip_norm: None, ..Default::default() });
        for _ in 0..500 {
            let g = store.get(id).scale(2.0);
            opt.step(&mut store, &[g]);
        }
        assert!(store.get(id).sum_sq() < 1e-4);
    }
}
