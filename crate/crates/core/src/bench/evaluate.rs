use serde::{Deserialize, Serialize};

use crate::encoder::UnpromptedView;
use crate::error::{Error, Result};
use crate::voting::{cascade_vote, pool_vote, prompted_feature, VoteContext, VoteTrace};

use super::config::TaskHead;
use super::driver::TrainedModel;
use super::records::StageRow;
use super::stream::{TaskData, TaskInstance};

/// Per-instance outcome at one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: usize,
    pub gold_task: usize,
    /// Position within the task's test split.
    pub index: usize,
    pub gold_relation: usize,
    /// Task chosen by the task head.
    pub routed_task: usize,
    /// Prediction reported for the run (oracle route when that flag is set).
    pub predicted_relation: usize,
    /// Prediction under the true task's pool.
    pub oracle_relation: usize,
    pub fast_path: bool,
    /// `pool:vote` pairs of every consulted pool, `;`-separated.
    pub votes: String,
}

/// Decision of the task head for one instance.
pub struct Route {
    pub task: usize,
    pub trace: Option<VoteTrace>,
}

/// Caches the relation feature of an instance under each task's pool.
struct Features<'a> {
    model: &'a TrainedModel,
    x: &'a TaskInstance,
    view: UnpromptedView,
    cache: Vec<Option<Vec<f64>>>,
}

impl<'a> Features<'a> {
    fn new(model: &'a TrainedModel, x: &'a TaskInstance) -> Result<Self> {
        let view = UnpromptedView::compute(&x.tokens, x.e1_pos, x.e2_pos, &model.backbone)?;
        Ok(Features {
            model,
            x,
            view,
            cache: vec![None; model.tasks() + 1],
        })
    }

    /// Feature under pool `i`; pool 0 is the unprompted encoder.
    fn get(&mut self, i: usize) -> Result<Vec<f64>> {
        if i == 0 {
            return Ok(self.view.feature.clone());
        }
        if let Some(z) = self.cache.get(i).and_then(Clone::clone) {
            return Ok(z);
        }
        let pool = self.model.pool_for(i)?;
        let z = prompted_feature(&self.x.tokens, self.x.e1_pos, self.x.e2_pos, &self.view.query, pool, &self.model.backbone)?;
        // every task shares one encoding in shared-pool mode
        let slots: Vec<usize> = if self.model.shared() { (1..self.cache.len()).collect() } else { vec![i] };
        for s in slots {
            self.cache[s] = Some(z.clone());
        }
        Ok(z)
    }
}

fn route(model: &TrainedModel, feats: &mut Features<'_>) -> Result<Route> {
    let k = model.tasks();
    if model.shared() {
        let ctx = VoteContext { k, m: k, stats: &model.stats };
        let z = feats.get(0)?;
        return Ok(Route {
            task: pool_vote(&ctx, 0, &z)?,
            trace: None,
        });
    }
    match model.config.flags.task_head {
        TaskHead::Mlp => {
            let head = model.task_head.as_ref().ok_or_else(|| Error::State("task head was not trained".into()))?;
            let r = head.predict(&feats.get(0)?)?;
            let task = model.task_of(r).ok_or_else(|| Error::State(format!("relation {r} belongs to no task")))?;
            Ok(Route { task, trace: None })
        }
        TaskHead::Cascade => {
            let ctx = VoteContext::new(k, model.config.model.max_experts.map(|m| m.min(k)), &model.stats)?;
            let (task, trace) = cascade_vote(&ctx, |i| feats.get(i))?;
            Ok(Route { task, trace: Some(trace) })
        }
    }
}

/// Routes and classifies one instance.
pub fn predict(model: &TrainedModel, x: &TaskInstance, gold_task: usize) -> Result<(Route, usize, usize)> {
    let mut feats = Features::new(model, x)?;
    let r = route(model, &mut feats)?;
    let routed = model.classifier.predict(&feats.get(r.task)?)?;
    let oracle = model.classifier.predict(&feats.get(gold_task)?)?;
    Ok((r, routed, oracle))
}

/// Metrics over the test splits of tasks `1..=stage`.
pub fn evaluate(stage: usize, model: &TrainedModel, tests: &[&TaskData]) -> Result<(StageRow, Vec<TraceRow>)> {
    if tests.len() != stage || model.tasks() < stage {
        return Err(Error::State(format!("stage {stage} evaluated with {} test sets", tests.len())));
    }
    let mut rows = Vec::new();
    for data in tests {
        for (index, x) in data.test.iter().enumerate() {
            let (r, routed, oracle) = predict(model, x, data.task)?;
            let votes = r
                .trace
                .as_ref()
                .map(|t| t.consulted.iter().map(|v| format!("{}:{}", v.pool, v.vote)).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            rows.push(TraceRow {
                stage,
                gold_task: data.task,
                index,
                gold_relation: x.label,
                routed_task: r.task,
                predicted_relation: if model.config.flags.oracle_tii { oracle } else { routed },
                oracle_relation: oracle,
                fast_path: r.trace.as_ref().is_some_and(|t| t.fast_path),
                votes,
            });
        }
    }
    Ok((StageRow::from_traces(stage, &rows), rows))
}
