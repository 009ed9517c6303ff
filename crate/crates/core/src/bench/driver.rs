use std::collections::BTreeMap;
use std::time::Instant;

use crate::encoder::{relation_feature, encode, FrozenBackbone, UnpromptedView};
use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::objectives::{apply_step, Classifier, DescriptionSet, Example, Objective};
use crate::promptpool::{init_pool, PromptPool};
use crate::replay::{fit_gaussians, train_classifier_replay, GaussianStat, StatsStore};
use crate::voting::prompted_feature;

use super::config::{RunConfig, TaskHead};
use super::evaluate::{evaluate, TraceRow};
use super::guard::RehearsalGuard;
use super::records::{Contracts, RunRecord, Timing};
use super::stream::{TaskData, TaskStream};

/// Everything learned so far, enough to evaluate without training data.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub backbone: FrozenBackbone,
    /// `pools[t - 1]` serves task `t`; a single entry in shared-pool mode.
    pub pools: Vec<PromptPool>,
    pub classifier: Classifier,
    /// Relation classifier on unprompted features, used as task head.
    pub task_head: Option<Classifier>,
    pub stats: StatsStore,
    /// Relation ids of each learned task.
    pub relations: Vec<Vec<usize>>,
}

impl TrainedModel {
    /// Tasks learned so far.
    pub fn tasks(&self) -> usize {
        self.relations.len()
    }

    pub fn shared(&self) -> bool {
        self.config.flags.shared_pool
    }

    /// Pool used to encode instances of `task`.
    pub fn pool_for(&self, task: usize) -> Result<&PromptPool> {
        let i = if self.shared() { 0 } else { task.wrapping_sub(1) };
        self.pools.get(i).ok_or_else(|| Error::State(format!("no pool for task {task}")))
    }

    /// Index under which statistics of pool `pool_for(task)` are stored.
    pub fn stat_pool(&self, task: usize) -> usize {
        if self.shared() {
            1
        } else {
            task
        }
    }

    pub fn task_of(&self, relation: usize) -> Option<usize> {
        self.relations.iter().position(|rs| rs.contains(&relation)).map(|i| i + 1)
    }

    pub fn seen_relations(&self) -> Vec<usize> {
        self.relations.iter().flatten().copied().collect()
    }
}

/// Result of a full continual run.
pub struct RunOutput {
    pub record: RunRecord,
    pub model: TrainedModel,
    pub traces: Vec<TraceRow>,
    pub timing: Timing,
}

fn at_stage<T>(stage: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}

fn group_by_label(labels: impl Iterator<Item = usize>, feats: Vec<Vec<f64>>) -> BTreeMap<usize, Vec<Vec<f64>>> {
    let mut g: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (y, z) in labels.zip(feats) {
        g.entry(y).or_default().push(z);
    }
    g
}

/// Learns the tasks of `stream` in order, evaluating after each one.
pub fn run_continual(stream: &TaskStream, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if stream.len() != cfg.stream.tasks {
        return Err(Error::Config(format!("stream has {} tasks, config expects {}", stream.len(), cfg.stream.tasks)));
    }
    let backbone = FrozenBackbone::new(cfg.encoder(), cfg.seed)?;
    let initial_backbone = backbone.checksum();
    let d = cfg.model.d_model;
    let mut class_rng = Rng::derive(cfg.seed, "classifier");
    let mut model = TrainedModel {
        config: cfg.clone(),
        backbone,
        pools: Vec::new(),
        classifier: Classifier::new(2 * d, cfg.model.classifier_hidden, &mut class_rng),
        task_head: (cfg.flags.task_head == TaskHead::Mlp).then(|| Classifier::new(2 * d, cfg.model.classifier_hidden, &mut Rng::derive(cfg.seed, "task-head"))),
        stats: StatsStore::new(),
        relations: Vec::new(),
    };
    let mut guard = RehearsalGuard::new(stream.tasks.iter().map(|t| t.train.clone()).collect());
    let mut descriptions = DescriptionSet::new(2 * d);
    let mut stages = Vec::new();
    let mut train_loss = Vec::new();
    let mut traces = Vec::new();
    let mut timing = Timing::default();
    let mut frozen_ok = true;

    for data in &stream.tasks {
        let t = data.task;
        let started = Instant::now();
        let frozen_before: Vec<String> = model.pools.iter().map(PromptPool::checksum).collect();
        let loss = at_stage(t, learn_task(&mut model, &guard, &mut descriptions, data, &mut class_rng))?;
        guard.close(t);
        at_stage(t, replay_task(&mut model))?;
        if !model.shared() {
            let after: Vec<String> = model.pools[..frozen_before.len()].iter().map(PromptPool::checksum).collect();
            frozen_ok &= after == frozen_before;
        }
        let tests: Vec<&TaskData> = stream.tasks[..t].iter().collect();
        let (row, rows) = at_stage(t, evaluate(t, &model, &tests))?;
        stages.push(row);
        train_loss.push(loss);
        traces.extend(rows);
        timing.stage_seconds.push(started.elapsed().as_secs_f64());
    }

    let backbone_checksum = model.backbone.checksum();
    let record = RunRecord {
        config_hash: cfg.hash(),
        stages,
        train_loss,
        contracts: Contracts {
            refused_reads: guard.refused_reads(),
            backbone_unchanged: backbone_checksum == initial_backbone,
            backbone_checksum,
            frozen_pools_unchanged: frozen_ok,
            prompted_stats: model.stats.prompted_len(),
            total_stats: model.stats.len(),
        },
    };
    Ok(RunOutput {
        record,
        model,
        traces,
        timing,
    })
}

/// Prompt training and statistics fitting for one task. Returns the mean
/// objective over the last epoch.
fn learn_task(model: &mut TrainedModel, guard: &RehearsalGuard, descriptions: &mut DescriptionSet, data: &TaskData, class_rng: &mut Rng) -> Result<f64> {
    let cfg = model.config.clone();
    let t = data.task;
    if t != model.tasks() + 1 {
        return Err(Error::State(format!("task {t} arrived after {} tasks", model.tasks())));
    }
    let train = guard.read(t)?;
    if data.relations.first() != Some(&model.classifier.classes()) {
        return Err(Error::State(format!("relations of task {t} are not the next contiguous ids")));
    }
    model.relations.push(data.relations.clone());
    model.classifier.grow(data.relations.len(), class_rng);

    let weights = cfg.loss_weights();
    if weights.beta > 0.0 {
        for &r in &data.relations {
            let vs = data
                .descriptions
                .iter()
                .filter(|x| x.label == r)
                .map(|x| relation_feature(&encode(&x.tokens, None, &model.backbone)?, x.e1_pos, x.e2_pos))
                .collect::<Result<Vec<_>>>()?;
            descriptions.insert(r, vs)?;
        }
    }

    let views = train
        .iter()
        .map(|x| UnpromptedView::compute(&x.tokens, x.e1_pos, x.e2_pos, &model.backbone))
        .collect::<Result<Vec<_>>>()?;

    if !model.shared() || model.pools.is_empty() {
        let mut rng = Rng::derive(cfg.seed, &format!("pool{t}"));
        let task_id = if model.shared() { 1 } else { t };
        model.pools.push(init_pool(task_id, cfg.effective_pool(), model.backbone.config(), &mut rng)?);
    }

    let seen = model.seen_relations();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = Rng::derive(cfg.seed, &format!("train{t}"));
    let tc = cfg.model.train;
    let mut last = 0.0;
    {
        let pool = model.pools.last_mut().expect("pool exists");
        let obj = Objective {
            backbone: &model.backbone,
            descriptions: (weights.beta > 0.0).then_some(&*descriptions),
            seen: &seen,
            weights,
        };
        for _ in 0..tc.epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for chunk in order.chunks(tc.batch_size) {
                let batch: Vec<Example<'_>> = chunk
                    .iter()
                    .map(|&i| Example {
                        tokens: &train[i].tokens,
                        e1_pos: train[i].e1_pos,
                        e2_pos: train[i].e2_pos,
                        label: train[i].label,
                        query: &views[i].query,
                    })
                    .collect();
                let (parts, g) = obj.batch_loss(&batch, pool, &model.classifier)?;
                apply_step(pool, &mut model.classifier, &g, &tc);
                total += parts.total * chunk.len() as f64;
            }
            last = total / train.len().max(1) as f64;
        }
    }

    // statistics under the unprompted encoder and every pool that may vote for t
    let labels = || train.iter().map(|x| x.label);
    let unprompted: Vec<Vec<f64>> = views.iter().map(|v| v.feature.clone()).collect();
    model.stats.insert(fit_gaussians(&group_by_label(labels(), unprompted), 0, t)?)?;
    let pools: Vec<usize> = if model.shared() { vec![1] } else { (1..=t).collect() };
    for i in pools {
        let pool = &model.pools[if model.shared() { 0 } else { i - 1 }];
        let feats = train
            .iter()
            .zip(&views)
            .map(|(x, v)| prompted_feature(&x.tokens, x.e1_pos, x.e2_pos, &v.query, pool, &model.backbone))
            .collect::<Result<Vec<_>>>()?;
        model.stats.insert(fit_gaussians(&group_by_label(labels(), feats), i, t)?)?;
    }
    Ok(last)
}

/// Retrains the classifier (and task head, if any) on samples from the
/// stored statistics of every task so far.
fn replay_task(model: &mut TrainedModel) -> Result<()> {
    let t = model.tasks();
    let cfg = &model.config;
    let seen = model.seen_relations();
    let pools: Vec<usize> = (1..=t).map(|s| model.stat_pool(s)).collect();
    let own: Vec<&GaussianStat> = (1..=t)
        .zip(pools)
        .map(|(s, i)| {
            model
                .stats
                .get(i, s)
                .ok_or_else(|| Error::State(format!("missing statistic for task {s}")))
        })
        .collect::<Result<_>>()?;
    let mut rng = Rng::derive(cfg.seed, &format!("replay{t}"));
    train_classifier_replay(&mut model.classifier, &own, &seen, &cfg.model.replay, &mut rng)?;
    if let Some(head) = model.task_head.as_mut() {
        let unprompted: Vec<&GaussianStat> = (1..=t)
            .map(|s| model.stats.get(0, s).ok_or_else(|| Error::State(format!("missing unprompted statistic for task {s}"))))
            .collect::<Result<_>>()?;
        let mut rng = Rng::derive(cfg.seed, &format!("head{t}"));
        head.grow(seen.len() - head.classes(), &mut rng);
        train_classifier_replay(head, &unprompted, &seen, &cfg.model.replay, &mut rng)?;
    }
    Ok(())
}
