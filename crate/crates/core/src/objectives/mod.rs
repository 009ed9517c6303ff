//! Training objective for the current task: cross-entropy on the relation
//! classifier, the prompt-pool key loss, and the label-description
//! contrastive loss, with hand-derived gradients for the current pool and
//! the classifier.

mod classifier;
mod descriptions;

pub use classifier::{Classifier, ClassifierCache, ClassifierGrad, NEW_ROW_STD};
pub use descriptions::DescriptionSet;

use serde::{Deserialize, Serialize};

use crate::encoder::{backward, encode_cached, relation_feature, FrozenBackbone};
use crate::error::{Error, Result};
use crate::numkit::{dot, log_sum_exp, softmax, Mat};
use crate::promptpool::{assemble_bundle, pool_loss, select, PoolGrad, PromptPool};

/// Weights of the auxiliary terms in the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Prompt-pool key loss weight.
    pub alpha: f64,
    /// Description contrastive loss weight.
    pub beta: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer and schedule for prompt training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Step size for the classifier.
    pub lr: f64,
    /// Step size for keys and prefix rows.
    pub prompt_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights { alpha: 0.1, beta: 0.1 },
            lr: 0.05,
            prompt_lr: 5.0,
            epochs: 4,
            batch_size: 8,
        }
    }
}

/// `−log softmax(logits)[y]`.
pub fn classification_loss(logits: &[f64], y: usize) -> Result<f64> {
    Ok(classification_loss_grad(logits, y)?.0)
}

/// Loss and `∂/∂logits`.
pub fn classification_loss_grad(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= logits.len() {
        return Err(Error::Input(format!("label {y} outside {} logits", logits.len())));
    }
    let loss = log_sum_exp(logits) - logits[y];
    let mut g = softmax(logits)?;
    g[y] -= 1.0;
    Ok((loss, g))
}

/// `−log( Σ_{d∈Des_y} e^{f·d} / Σ_{r∈seen} Σ_{d∈Des_r} e^{f·d} )`.
pub fn contrastive_loss(feat: &[f64], y: usize, descs: &DescriptionSet, seen: &[usize]) -> Result<f64> {
    Ok(contrastive_loss_grad(feat, y, descs, seen)?.0)
}

/// Loss and `∂/∂feat`.
pub fn contrastive_loss_grad(feat: &[f64], y: usize, descs: &DescriptionSet, seen: &[usize]) -> Result<(f64, Vec<f64>)> {
    if !seen.contains(&y) {
        return Err(Error::Input(format!("label {y} not among seen relations")));
    }
    if feat.len() != descs.dim() {
        return Err(Error::dim(format!("feature {} vs descriptions {}", feat.len(), descs.dim())));
    }
    let mut all = Vec::new();
    let mut owner = Vec::new();
    for &r in seen {
        let ds = descs
            .get(r)
            .ok_or_else(|| Error::Config(format!("no descriptions for relation {r}")))?;
        for d in ds {
            all.push(d.as_slice());
            owner.push(r);
        }
    }
    let scores: Vec<f64> = all.iter().map(|d| dot(feat, d)).collect();
    let pos: Vec<f64> = scores
        .iter()
        .zip(&owner)
        .filter(|(_, &r)| r == y)
        .map(|(s, _)| *s)
        .collect();
    let lse_all = log_sum_exp(&scores);
    let lse_pos = log_sum_exp(&pos);
    let loss = (lse_all - lse_pos).max(0.0);

    let mut grad = vec![0.0; feat.len()];
    for ((d, &s), &r) in all.iter().zip(&scores).zip(&owner) {
        let mut w = (s - lse_all).exp();
        if r == y {
            w -= (s - lse_pos).exp();
        }
        for (g, x) in grad.iter_mut().zip(d.iter()) {
            *g += w * x;
        }
    }
    Ok((loss, grad))
}

/// `params −= lr · grads`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// One labeled training instance with its cached query feature.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub tokens: &'a [u32],
    pub e1_pos: usize,
    pub e2_pos: usize,
    /// Global relation id, also the classifier row.
    pub label: usize,
    pub query: &'a [f64],
}

/// The three terms of the objective and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub classification: f64,
    pub pool: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Gradients for the trainable state only: the current pool and the
/// classifier. The backbone and earlier pools have no slot here.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub pool: PoolGrad,
    pub classifier: ClassifierGrad,
}

impl GradientSet {
    pub fn zeros_like(pool: &PromptPool, classifier: &Classifier) -> Self {
        GradientSet {
            pool: PoolGrad::zeros_like(pool),
            classifier: ClassifierGrad::zeros_like(classifier),
        }
    }

    /// Pool coordinates first, then classifier coordinates.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.pool.flat();
        v.extend(self.classifier.flat());
        v
    }
}

/// What the combined objective sees besides the example itself.
pub struct Objective<'a> {
    pub backbone: &'a FrozenBackbone,
    pub descriptions: Option<&'a DescriptionSet>,
    /// Relations known so far, current task included.
    pub seen: &'a [usize],
    pub weights: LossWeights,
}

impl Objective<'_> {
    /// Loss of one example, accumulating `scale ·` its gradient into `grads`.
    pub fn accumulate(&self, ex: &Example<'_>, pool: &PromptPool, classifier: &Classifier, grads: &mut GradientSet, scale: f64) -> Result<LossParts> {
        let indices = select(pool, ex.query)?;
        let bundle = assemble_bundle(pool, &indices)?;
        let (hidden, cache) = encode_cached(ex.tokens, Some(&bundle), self.backbone)?;
        let feat = relation_feature(&hidden, ex.e1_pos, ex.e2_pos)?;

        let (logits, ccache) = classifier.forward(&feat)?;
        let (ce, mut dlogits) = classification_loss_grad(&logits, ex.label)?;
        dlogits.iter_mut().for_each(|g| *g *= scale);
        let mut dfeat = classifier.backward(&feat, &ccache, &dlogits, &mut grads.classifier);

        let pp = pool_loss(pool, ex.query, &indices)?;
        grads.pool.add_pool_loss(pool, ex.query, &indices, scale * self.weights.alpha);

        let mut cl = 0.0;
        if let Some(descs) = self.descriptions {
            let (l, g) = contrastive_loss_grad(&feat, ex.label, descs, self.seen)?;
            cl = l;
            for (a, b) in dfeat.iter_mut().zip(g) {
                *a += scale * self.weights.beta * b;
            }
        }

        let d = hidden.cols();
        let mut d_hidden = Mat::zeros(hidden.rows(), d);
        for (c, g) in dfeat[..d].iter().enumerate() {
            d_hidden[(ex.e1_pos, c)] += g;
        }
        for (c, g) in dfeat[d..].iter().enumerate() {
            d_hidden[(ex.e2_pos, c)] += g;
        }
        let pg = backward(self.backbone, &cache, &d_hidden);
        grads.pool.add_bundle(&indices, &pg.layers, pool.shape.prompt_len, 1.0);

        Ok(LossParts {
            classification: ce,
            pool: pp,
            contrastive: cl,
            total: ce + self.weights.alpha * pp + self.weights.beta * cl,
        })
    }

    /// Loss and full gradient of a single example.
    pub fn total_loss(&self, ex: &Example<'_>, pool: &PromptPool, classifier: &Classifier) -> Result<(LossParts, GradientSet)> {
        let mut g = GradientSet::zeros_like(pool, classifier);
        let parts = self.accumulate(ex, pool, classifier, &mut g, 1.0)?;
        Ok((parts, g))
    }

    /// Mean loss and mean gradient over a batch.
    pub fn batch_loss(&self, batch: &[Example<'_>], pool: &PromptPool, classifier: &Classifier) -> Result<(LossParts, GradientSet)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut g = GradientSet::zeros_like(pool, classifier);
        let mut mean = LossParts::default();
        for ex in batch {
            let p = self.accumulate(ex, pool, classifier, &mut g, scale)?;
            mean.classification += scale * p.classification;
            mean.pool += scale * p.pool;
            mean.contrastive += scale * p.contrastive;
            mean.total += scale * p.total;
        }
        Ok((mean, g))
    }

    /// Scalar loss only, for finite-difference checks.
    pub fn loss_value(&self, ex: &Example<'_>, pool: &PromptPool, classifier: &Classifier) -> Result<f64> {
        Ok(self.total_loss(ex, pool, classifier)?.0.total)
    }
}

/// Applies one SGD step to the current pool and classifier.
pub fn apply_step(pool: &mut PromptPool, classifier: &mut Classifier, grads: &GradientSet, cfg: &TrainConfig) {
    pool.sgd_step(&grads.pool, cfg.prompt_lr);
    classifier.sgd_step(&grads.classifier, cfg.lr);
}
