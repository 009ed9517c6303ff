use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::objectives::{LossWeights, TrainConfig};
use crate::promptpool::PoolShape;
use crate::replay::ReplayConfig;

/// Shape and difficulty of a synthetic relation stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Number of tasks `T`.
    pub tasks: usize,
    pub relations_per_task: usize,
    pub train_per_relation: usize,
    pub test_per_relation: usize,
    /// Description sequences per relation, `D`.
    pub descriptions_per_relation: usize,
    /// Sequence length `N`, markers included.
    pub seq_len: usize,
    pub vocab: usize,
    /// Size of each task's private topic vocabulary.
    pub topic_tokens: usize,
    /// Distinct signature tokens per relation template.
    pub signature_tokens: usize,
    /// Templates per relation; more than one spreads a relation over
    /// separate regions of the input space.
    pub subclusters: usize,
    /// Probability that a free position carries a signature token.
    pub signature_rate: f64,
    /// Probability that a filler token comes from the task topic rather
    /// than the shared vocabulary. Higher means better separated tasks.
    pub topic_rate: f64,
    /// Probability that any non-marker token is replaced uniformly at random.
    pub noise: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            tasks: 5,
            relations_per_task: 4,
            train_per_relation: 40,
            test_per_relation: 20,
            descriptions_per_relation: 1,
            seq_len: 16,
            vocab: 256,
            topic_tokens: 24,
            signature_tokens: 3,
            subclusters: 1,
            signature_rate: 0.7,
            topic_rate: 0.8,
            noise: 0.05,
        }
    }
}

impl StreamConfig {
    /// Several templates per relation and a weaker signal per instance.
    pub fn heterogeneous() -> Self {
        StreamConfig {
            topic_tokens: 40,
            subclusters: 3,
            signature_rate: 0.5,
            ..Self::default()
        }
    }

    /// Distinct signature templates per task.
    pub fn signature_blocks(&self) -> usize {
        self.relations_per_task * self.subclusters
    }

    pub fn total_relations(&self) -> usize {
        self.tasks * self.relations_per_task
    }

    /// Ids not reserved and not owned by any task topic.
    pub fn shared_tokens(&self) -> usize {
        self.vocab.saturating_sub(RESERVED_TOKENS + self.tasks * self.topic_tokens)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.relations_per_task == 0 || self.train_per_relation == 0 {
            return Err(Error::Config("stream needs tasks, relations and training instances".into()));
        }
        if self.seq_len < 3 {
            return Err(Error::Config("sequences need two markers and at least one token".into()));
        }
        if self.subclusters == 0 || self.signature_tokens == 0 {
            return Err(Error::Config("relations need at least one template token".into()));
        }
        let needed = self.signature_blocks() * self.signature_tokens;
        if needed > self.topic_tokens {
            return Err(Error::Config(format!(
                "{needed} signature tokens do not fit in a topic of {}",
                self.topic_tokens
            )));
        }
        if RESERVED_TOKENS + self.tasks * self.topic_tokens >= self.vocab {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold {} topics of {} tokens",
                self.vocab, self.tasks, self.topic_tokens
            )));
        }
        for (name, p) in [("signature_rate", self.signature_rate), ("topic_rate", self.topic_rate), ("noise", self.noise)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// How the task of a test instance is decided.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskHead {
    /// Mahalanobis cascade over pools.
    #[default]
    Cascade,
    /// Relation classifier on unprompted features, trained on pool-0 replay;
    /// the task is the owner of the predicted relation.
    Mlp,
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// `false` replaces the pool with one always-selected prompt holding the
    /// same number of prefix rows as a full selection.
    pub pool: bool,
    pub descriptions: bool,
    /// One pool trained across all tasks; task identity from the unprompted
    /// voter alone.
    pub shared_pool: bool,
    pub task_head: TaskHead,
    /// Route every test instance through its true task.
    pub oracle_tii: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            pool: true,
            descriptions: true,
            shared_pool: false,
            task_head: TaskHead::Cascade,
            oracle_tii: false,
        }
    }
}

/// Trainable model and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub pool: PoolShape,
    pub classifier_hidden: usize,
    pub train: TrainConfig,
    pub replay: ReplayConfig,
    /// Cap on the pools tallied by the cascade; `None` means all.
    pub max_experts: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 4,
            layers: 2,
            pool: PoolShape {
                size: 8,
                top_k: 2,
                prompt_len: 1,
            },
            classifier_hidden: 64,
            train: TrainConfig::default(),
            replay: ReplayConfig::default(),
            max_experts: None,
        }
    }
}

/// Everything a run depends on besides the code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub flags: Flags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            flags: Flags::default(),
        }
    }
}

impl RunConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig::new(self.model.d_model, self.model.heads, self.model.layers, self.stream.seq_len, self.stream.vocab)
    }

    /// Pool shape actually trained: with the pool switched off, a single
    /// entry holding `K·L` rows.
    pub fn effective_pool(&self) -> PoolShape {
        let p = self.model.pool;
        if self.flags.pool {
            p
        } else {
            PoolShape {
                size: 1,
                top_k: 1,
                prompt_len: p.top_k * p.prompt_len,
            }
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        let w = self.model.train.weights;
        if self.flags.descriptions && self.stream.descriptions_per_relation > 0 {
            w
        } else {
            LossWeights { beta: 0.0, ..w }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.encoder().validate()?;
        self.model.pool.validate()?;
        self.model.train.weights.validate()?;
        if self.model.train.batch_size == 0 || self.model.replay.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.model.max_experts == Some(0) {
            return Err(Error::Config("maximum experts must be positive".into()));
        }
        if self.flags.shared_pool && self.flags.task_head == TaskHead::Mlp {
            return Err(Error::Config("shared-pool mode has its own task head".into()));
        }
        if self.flags.descriptions && self.stream.descriptions_per_relation == 0 {
            return Err(Error::Config("descriptions enabled but D = 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
