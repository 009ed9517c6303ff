//! Task-specific prompt pools: learnable keys, top-K retrieval by cosine
//! distance to the query feature, and assembly of the retrieved prefix
//! experts into a [`PrefixBundle`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, PrefixBundle, PrefixPair};
use crate::error::{Error, Result};
use crate::numkit::{bottomk, cosine_distance, cosine_distance_grad_wrt_b, norm, Mat, Rng};

/// Standard deviation of freshly initialized keys and prefix rows.
pub const INIT_STD: f64 = 0.02;

/// One key and the `L` prefix experts it retrieves at every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub key: Vec<f64>,
    /// Indexed by encoder layer; layers without prompts hold empty pairs.
    pub prefixes: Vec<PrefixPair>,
}

/// Pool shape shared by every task of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolShape {
    /// Entries per pool, `M`.
    pub size: usize,
    /// Entries retrieved per instance, `K`.
    pub top_k: usize,
    /// Prefix rows per entry, `L`.
    pub prompt_len: usize,
}

impl PoolShape {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.size {
            return Err(Error::Parameter(format!(
                "need 1 <= K <= M, got K={} M={}",
                self.top_k, self.size
            )));
        }
        if self.prompt_len == 0 {
            return Err(Error::Parameter("prompt length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    /// 1-based task index this pool was created for.
    pub task: usize,
    pub shape: PoolShape,
    pub entries: Vec<PromptEntry>,
}

fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z = rng.normal();
        if z.abs() <= 2.0 {
            return std * z;
        }
    }
}

/// Draws a fresh pool for task `task`.
pub fn init_pool(task: usize, shape: PoolShape, encoder: &EncoderConfig, rng: &mut Rng) -> Result<PromptPool> {
    shape.validate()?;
    let d = encoder.d_model;
    let entries = (0..shape.size)
        .map(|_| {
            let mut key: Vec<f64> = (0..d).map(|_| truncated_normal(rng, INIT_STD)).collect();
            if norm(&key) == 0.0 {
                key[0] = INIT_STD;
            }
            let prefixes = (0..encoder.layers)
                .map(|l| {
                    if encoder.injects(l) {
                        let mut draw = |_, _| truncated_normal(rng, INIT_STD);
                        let keys = Mat::from_fn(shape.prompt_len, d, &mut draw);
                        let values = Mat::from_fn(shape.prompt_len, d, &mut draw);
                        PrefixPair { keys, values }
                    } else {
                        PrefixPair::empty(d)
                    }
                })
                .collect();
            PromptEntry { key, prefixes }
        })
        .collect();
    Ok(PromptPool { task, shape, entries })
}

impl PromptPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cosine distance from `q` to every key (`M` evaluations).
    pub fn scores(&self, q: &[f64]) -> Result<Vec<f64>> {
        if norm(q) == 0.0 {
            return Err(Error::DegenerateInput("zero query feature".into()));
        }
        self.entries.iter().map(|e| cosine_distance(q, &e.key)).collect()
    }

    /// SHA-256 over keys and prefix rows.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.task as u64).to_le_bytes());
        for e in &self.entries {
            for v in &e.key {
                h.update(v.to_le_bytes());
            }
            for p in &e.prefixes {
                for v in p.keys.as_slice().iter().chain(p.values.as_slice()) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// The `K` entries closest to `q`, as ascending indices. Ties go to the
/// lower index.
pub fn select(pool: &PromptPool, q: &[f64]) -> Result<Vec<usize>> {
    let scores = pool.scores(q)?;
    let mut idx = bottomk(&scores, pool.shape.top_k)?;
    idx.sort_unstable();
    Ok(idx)
}

/// Stacks the prefix rows of `indices` (ascending) for every layer.
pub fn assemble_bundle(pool: &PromptPool, indices: &[usize]) -> Result<PrefixBundle> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Parameter(format!("duplicate prompt indices {indices:?}")));
    }
    if let Some(&bad) = sorted.iter().find(|&&i| i >= pool.len()) {
        return Err(Error::Parameter(format!("prompt index {bad} outside pool of {}", pool.len())));
    }
    let Some(first) = pool.entries.first() else {
        return Err(Error::State("empty pool".into()));
    };
    let n_layers = first.prefixes.len();
    let d = first.key.len();
    let layers = (0..n_layers)
        .map(|l| {
            let mut keys = Mat::zeros(0, d);
            let mut values = Mat::zeros(0, d);
            for &i in &sorted {
                let p = &pool.entries[i].prefixes[l];
                if p.is_empty() {
                    continue;
                }
                keys = Mat::vstack(&keys, &p.keys)?;
                values = Mat::vstack(&values, &p.values)?;
            }
            Ok(PrefixPair { keys, values })
        })
        .collect::<Result<_>>()?;
    Ok(PrefixBundle { layers })
}

/// Sum of cosine distances between `q` and the selected keys.
pub fn pool_loss(pool: &PromptPool, q: &[f64], indices: &[usize]) -> Result<f64> {
    indices
        .iter()
        .map(|&i| {
            let e = pool
                .entries
                .get(i)
                .ok_or_else(|| Error::Parameter(format!("prompt index {i} outside pool")))?;
            cosine_distance(q, &e.key)
        })
        .sum()
}

/// Gradients for every trainable value of a pool; same layout as the pool.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolGrad {
    pub keys: Vec<Vec<f64>>,
    pub prefixes: Vec<Vec<PrefixPair>>,
}

impl PoolGrad {
    pub fn zeros_like(pool: &PromptPool) -> Self {
        PoolGrad {
            keys: pool.entries.iter().map(|e| vec![0.0; e.key.len()]).collect(),
            prefixes: pool
                .entries
                .iter()
                .map(|e| {
                    e.prefixes
                        .iter()
                        .map(|p| PrefixPair {
                            keys: Mat::zeros(p.keys.rows(), p.keys.cols()),
                            values: Mat::zeros(p.values.rows(), p.values.cols()),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Adds `scale · ∂L_pp/∂k` for the selected keys.
    pub fn add_pool_loss(&mut self, pool: &PromptPool, q: &[f64], indices: &[usize], scale: f64) {
        for &i in indices {
            let g = cosine_distance_grad_wrt_b(q, &pool.entries[i].key);
            for (a, b) in self.keys[i].iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    /// Scatters bundle-row gradients back onto the entries they came from.
    pub fn add_bundle(&mut self, indices: &[usize], bundle_grad: &[PrefixPair], prompt_len: usize, scale: f64) {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        for (l, pair) in bundle_grad.iter().enumerate() {
            if pair.is_empty() {
                continue;
            }
            for (slot, &i) in sorted.iter().enumerate() {
                let dst = &mut self.prefixes[i][l];
                for r in 0..prompt_len {
                    let src_row = slot * prompt_len + r;
                    for (a, b) in dst.keys.row_mut(r).iter_mut().zip(pair.keys.row(src_row)) {
                        *a += scale * b;
                    }
                    for (a, b) in dst.values.row_mut(r).iter_mut().zip(pair.values.row(src_row)) {
                        *a += scale * b;
                    }
                }
            }
        }
    }

    /// Flattened in [`PromptPool`] parameter order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (k, ps) in self.keys.iter().zip(&self.prefixes) {
            out.extend_from_slice(k);
            for p in ps {
                out.extend_from_slice(p.keys.as_slice());
                out.extend_from_slice(p.values.as_slice());
            }
        }
        out
    }
}

impl PromptPool {
    /// Every trainable value: per entry the key, then per layer the prefix
    /// keys and values.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(&e.key);
            for p in &e.prefixes {
                out.extend_from_slice(p.keys.as_slice());
                out.extend_from_slice(p.values.as_slice());
            }
        }
        out
    }

    pub fn flat_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.extend((0..e.key.len()).map(|c| format!("pool{}.entry{i}.key[{c}]", self.task)));
            for (l, p) in e.prefixes.iter().enumerate() {
                out.extend((0..p.keys.as_slice().len()).map(|c| format!("pool{}.entry{i}.layer{l}.prefix_key[{c}]", self.task)));
                out.extend((0..p.values.as_slice().len()).map(|c| format!("pool{}.entry{i}.layer{l}.prefix_value[{c}]", self.task)));
            }
        }
        out
    }

    /// `self[i] += delta` for flat coordinate `i`.
    pub fn nudge(&mut self, i: usize, delta: f64) {
        let mut rest = i;
        for e in &mut self.entries {
            if rest < e.key.len() {
                e.key[rest] += delta;
                return;
            }
            rest -= e.key.len();
            for p in &mut e.prefixes {
                for m in [&mut p.keys, &mut p.values] {
                    let n = m.as_slice().len();
                    if rest < n {
                        m.as_mut_slice()[rest] += delta;
                        return;
                    }
                    rest -= n;
                }
            }
        }
        panic!("coordinate {i} outside pool");
    }

    /// Plain gradient step.
    pub fn sgd_step(&mut self, grad: &PoolGrad, lr: f64) {
        for ((e, gk), gp) in self.entries.iter_mut().zip(&grad.keys).zip(&grad.prefixes) {
            for (a, b) in e.key.iter_mut().zip(gk) {
                *a -= lr * b;
            }
            for (p, g) in e.prefixes.iter_mut().zip(gp) {
                for (a, b) in p.keys.as_mut_slice().iter_mut().zip(g.keys.as_slice()) {
                    *a -= lr * b;
                }
                for (a, b) in p.values.as_mut_slice().iter_mut().zip(g.values.as_slice()) {
                    *a -= lr * b;
                }
            }
        }
    }
}
