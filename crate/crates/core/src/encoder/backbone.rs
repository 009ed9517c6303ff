use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::{Mat, Rng};

/// Shape of the frozen encoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding width `d`.
    pub d_model: usize,
    /// Attention heads `m`; per-head width is `d / m`.
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward hidden width.
    pub ffn_hidden: usize,
    /// Longest accepted sequence.
    pub max_seq: usize,
    /// Token ids are `0..vocab`; ids 0 and 1 are the entity markers.
    pub vocab: usize,
    /// Layers that receive prefix rows.
    pub prefix_layers: Vec<usize>,
}

/// Token id marking the head entity.
pub const E1_MARKER: u32 = 0;
/// Token id marking the tail entity.
pub const E2_MARKER: u32 = 1;
/// Number of reserved ids at the start of the vocabulary.
pub const RESERVED_TOKENS: usize = 2;

impl EncoderConfig {
    pub fn new(d_model: usize, heads: usize, layers: usize, max_seq: usize, vocab: usize) -> Self {
        EncoderConfig {
            d_model,
            heads,
            layers,
            ffn_hidden: 2 * d_model,
            max_seq,
            vocab,
            prefix_layers: (0..layers).collect(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if let Some(&l) = self.prefix_layers.iter().find(|&&l| l >= self.layers) {
            return Err(Error::Config(format!("prefix layer {l} outside 0..{}", self.layers)));
        }
        if self.vocab <= RESERVED_TOKENS || self.max_seq == 0 {
            return Err(Error::Config("vocabulary or sequence length too small".into()));
        }
        Ok(())
    }

    pub fn injects(&self, layer: usize) -> bool {
        self.prefix_layers.contains(&layer)
    }
}

/// Weights of one transformer block.
///
/// The per-head projections `W^Q_i, W^K_i, W^V_i` are the column blocks
/// `[i·d_k, (i+1)·d_k)` of the full `d × d` matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w1: Mat,
    pub w2: Mat,
}

/// Randomly initialized encoder that is never trained.
///
/// Each block is `Y = norm(R + FFN(R))` with `R = X + MSA(X)`: a single
/// parameter-free row normalization per block, GELU feed-forward, no biases.
#[derive(Debug, Serialize, Deserialize)]
pub struct FrozenBackbone {
    config: EncoderConfig,
    init_seed: u64,
    pub(crate) token_embedding: Mat,
    pub(crate) position_embedding: Mat,
    pub(crate) layers: Vec<LayerWeights>,
    #[serde(skip)]
    unprompted_passes: AtomicUsize,
    #[serde(skip)]
    prompted_passes: AtomicUsize,
}

impl Clone for FrozenBackbone {
    fn clone(&self) -> Self {
        FrozenBackbone {
            config: self.config.clone(),
            init_seed: self.init_seed,
            token_embedding: self.token_embedding.clone(),
            position_embedding: self.position_embedding.clone(),
            layers: self.layers.clone(),
            unprompted_passes: AtomicUsize::new(0),
            prompted_passes: AtomicUsize::new(0),
        }
    }
}

impl FrozenBackbone {
    pub fn new(config: EncoderConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.ffn_hidden;
        let mut rng = Rng::derive(init_seed, "backbone");
        let mut gauss = |rows: usize, cols: usize, std: f64| Mat::from_fn(rows, cols, |_, _| std * rng.normal());
        let token_embedding = gauss(config.vocab, d, 1.0);
        let position_embedding = gauss(config.max_seq, d, 0.5);
        let sd = 1.0 / (d as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                wq: gauss(d, d, sd),
                wk: gauss(d, d, sd),
                wv: gauss(d, d, sd),
                wo: gauss(d, d, sd),
                w1: gauss(d, h, sd),
                w2: gauss(h, d, 1.0 / (h as f64).sqrt()),
            })
            .collect();
        Ok(FrozenBackbone {
            config,
            init_seed,
            token_embedding,
            position_embedding,
            layers,
            unprompted_passes: AtomicUsize::new(0),
            prompted_passes: AtomicUsize::new(0),
        })
    }

    /// Rebuilds a backbone from stored weights.
    pub fn from_parts(
        config: EncoderConfig,
        init_seed: u64,
        token_embedding: Mat,
        position_embedding: Mat,
        layers: Vec<LayerWeights>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ok = token_embedding.dims() == (config.vocab, d)
            && position_embedding.dims() == (config.max_seq, d)
            && layers.len() == config.layers
            && layers.iter().all(|l| {
                l.wq.dims() == (d, d)
                    && l.wk.dims() == (d, d)
                    && l.wv.dims() == (d, d)
                    && l.wo.dims() == (d, d)
                    && l.w1.dims() == (d, config.ffn_hidden)
                    && l.w2.dims() == (config.ffn_hidden, d)
            });
        if !ok {
            return Err(Error::dim("stored weights do not match the encoder config"));
        }
        Ok(FrozenBackbone {
            config,
            init_seed,
            token_embedding,
            position_embedding,
            layers,
            unprompted_passes: AtomicUsize::new(0),
            prompted_passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn layer(&self, l: usize) -> Result<&LayerWeights> {
        self.layers
            .get(l)
            .ok_or_else(|| Error::Parameter(format!("layer {l} of {}", self.layers.len())))
    }

    /// Column block of `W^Q`, `W^K` or `W^V` belonging to one head.
    pub fn head_block(full: &Mat, head: usize, head_dim: usize) -> Mat {
        Mat::from_fn(full.rows(), head_dim, |i, j| full[(i, head * head_dim + j)])
    }

    /// SHA-256 over every weight, in a fixed order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |m: &Mat| {
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        };
        feed(&self.token_embedding);
        feed(&self.position_embedding);
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                feed(m);
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn count_pass(&self, prompted: bool) {
        let c = if prompted { &self.prompted_passes } else { &self.unprompted_passes };
        c.fetch_add(1, Ordering::Relaxed);
    }

    /// Number of encoder passes without prompts since construction.
    pub fn unprompted_passes(&self) -> usize {
        self.unprompted_passes.load(Ordering::Relaxed)
    }

    pub fn prompted_passes(&self) -> usize {
        self.prompted_passes.load(Ordering::Relaxed)
    }
}
