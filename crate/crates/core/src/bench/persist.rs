//! Binary weight file: magic, version, JSON header, little-endian `f64`
//! tensors in header order, SHA-256 trailer over everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{FrozenBackbone, LayerWeights, PrefixPair};
use crate::error::{Error, Result};
use crate::numkit::Mat;
use crate::objectives::Classifier;
use crate::promptpool::{PoolShape, PromptEntry, PromptPool};
use crate::replay::{GaussianStat, StatsStore};

use super::config::RunConfig;
use super::driver::TrainedModel;

pub const MAGIC: &[u8; 8] = b"PFXCLWTS";
pub const VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct PoolInfo {
    task: usize,
    shape: PoolShape,
}

#[derive(Serialize, Deserialize)]
struct StatInfo {
    pool: usize,
    task: usize,
    relations: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    relations: Vec<Vec<usize>>,
    pools: Vec<PoolInfo>,
    stats: Vec<StatInfo>,
    task_head: bool,
    tensors: Vec<TensorInfo>,
}

#[derive(Default)]
struct Tensors {
    list: Vec<(String, Mat)>,
}

impl Tensors {
    fn put(&mut self, name: impl Into<String>, m: &Mat) {
        self.list.push((name.into(), m.clone()));
    }

    fn put_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        self.list.push((name.into(), Mat::from_vec(1, v.len(), v.to_vec()).expect("row vector")));
    }
}

struct Loaded<'a> {
    path: &'a Path,
    map: BTreeMap<String, Mat>,
}

impl Loaded<'_> {
    fn take(&mut self, name: &str) -> Result<Mat> {
        self.map
            .remove(name)
            .ok_or_else(|| Error::format(self.path, format!("missing tensor `{name}`")))
    }

    fn take_vec(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self.take(name)?.into_vec())
    }
}

fn put_classifier(t: &mut Tensors, prefix: &str, c: &Classifier) {
    t.put(format!("{prefix}.w1"), &c.w1);
    t.put_vec(format!("{prefix}.b1"), &c.b1);
    t.put(format!("{prefix}.w2"), &c.w2);
    t.put_vec(format!("{prefix}.b2"), &c.b2);
}

fn take_classifier(l: &mut Loaded<'_>, prefix: &str) -> Result<Classifier> {
    Ok(Classifier {
        w1: l.take(&format!("{prefix}.w1"))?,
        b1: l.take_vec(&format!("{prefix}.b1"))?,
        w2: l.take(&format!("{prefix}.w2"))?,
        b2: l.take_vec(&format!("{prefix}.b2"))?,
    })
}

/// Serializes everything needed to evaluate without retraining.
pub fn save_model(path: &Path, model: &TrainedModel) -> Result<()> {
    let mut t = Tensors::default();
    let bb = &model.backbone;
    t.put("backbone.token_embedding", &bb.token_embedding);
    t.put("backbone.position_embedding", &bb.position_embedding);
    for (l, w) in bb.layers.iter().enumerate() {
        for (n, m) in [("wq", &w.wq), ("wk", &w.wk), ("wv", &w.wv), ("wo", &w.wo), ("w1", &w.w1), ("w2", &w.w2)] {
            t.put(format!("backbone.layer{l}.{n}"), m);
        }
    }
    for (j, p) in model.pools.iter().enumerate() {
        for (e, entry) in p.entries.iter().enumerate() {
            t.put_vec(format!("pool{j}.entry{e}.key"), &entry.key);
            for (l, pair) in entry.prefixes.iter().enumerate() {
                t.put(format!("pool{j}.entry{e}.layer{l}.keys"), &pair.keys);
                t.put(format!("pool{j}.entry{e}.layer{l}.values"), &pair.values);
            }
        }
    }
    put_classifier(&mut t, "classifier", &model.classifier);
    if let Some(h) = &model.task_head {
        put_classifier(&mut t, "task_head", h);
    }
    let mut stats = Vec::new();
    for s in model.stats.iter() {
        t.put(format!("stat.{}.{}.cov", s.pool(), s.task()), s.covariance());
        for (r, mu) in s.means() {
            t.put_vec(format!("stat.{}.{}.mean.{r}", s.pool(), s.task()), mu);
        }
        stats.push(StatInfo {
            pool: s.pool(),
            task: s.task(),
            relations: s.means().keys().copied().collect(),
        });
    }
    let header = Header {
        config: model.config.clone(),
        relations: model.relations.clone(),
        pools: model.pools.iter().map(|p| PoolInfo { task: p.task, shape: p.shape }).collect(),
        stats,
        task_head: model.task_head.is_some(),
        tensors: t
            .list
            .iter()
            .map(|(name, m)| TensorInfo {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, m) in &t.list {
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a file written by [`save_model`], verifying magic, version and checksum.
pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a weight file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])?;
    let mut data = &body[header_end..];
    let mut map = BTreeMap::new();
    for info in &header.tensors {
        let n = info.rows * info.cols;
        if data.len() < 8 * n {
            return Err(bad("truncated tensor data"));
        }
        let vals = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        map.insert(info.name.clone(), Mat::from_vec(info.rows, info.cols, vals)?);
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let mut l = Loaded { path, map };

    let cfg = header.config;
    let enc = cfg.encoder();
    let layers = (0..enc.layers)
        .map(|i| {
            Ok(LayerWeights {
                wq: l.take(&format!("backbone.layer{i}.wq"))?,
                wk: l.take(&format!("backbone.layer{i}.wk"))?,
                wv: l.take(&format!("backbone.layer{i}.wv"))?,
                wo: l.take(&format!("backbone.layer{i}.wo"))?,
                w1: l.take(&format!("backbone.layer{i}.w1"))?,
                w2: l.take(&format!("backbone.layer{i}.w2"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let token_embedding = l.take("backbone.token_embedding")?;
    let position_embedding = l.take("backbone.position_embedding")?;
    let backbone = FrozenBackbone::from_parts(enc.clone(), cfg.seed, token_embedding, position_embedding, layers)?;

    let mut pools = Vec::new();
    for (j, info) in header.pools.iter().enumerate() {
        let entries = (0..info.shape.size)
            .map(|e| {
                let key = l.take_vec(&format!("pool{j}.entry{e}.key"))?;
                let prefixes = (0..enc.layers)
                    .map(|li| {
                        Ok(PrefixPair {
                            keys: l.take(&format!("pool{j}.entry{e}.layer{li}.keys"))?,
                            values: l.take(&format!("pool{j}.entry{e}.layer{li}.values"))?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(PromptEntry { key, prefixes })
            })
            .collect::<Result<_>>()?;
        pools.push(PromptPool {
            task: info.task,
            shape: info.shape,
            entries,
        });
    }
    let classifier = take_classifier(&mut l, "classifier")?;
    let task_head = if header.task_head { Some(take_classifier(&mut l, "task_head")?) } else { None };
    let mut stats = StatsStore::new();
    for s in &header.stats {
        let cov = l.take(&format!("stat.{}.{}.cov", s.pool, s.task))?;
        let means = s
            .relations
            .iter()
            .map(|&r| Ok((r, l.take_vec(&format!("stat.{}.{}.mean.{r}", s.pool, s.task))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        stats.insert(GaussianStat::new(s.pool, s.task, means, cov)?)?;
    }
    if let Some(extra) = l.map.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor `{extra}`")));
    }
    Ok(TrainedModel {
        config: cfg,
        backbone,
        pools,
        classifier,
        task_head,
        stats,
        relations: header.relations,
    })
}
