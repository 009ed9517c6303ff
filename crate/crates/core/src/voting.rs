//! Task-identity inference: Mahalanobis scores per pool, one vote per pool,
//! and the cascade that consults extra pools only when the unprompted voter
//! and the first pool disagree.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode, relation_feature, FrozenBackbone, UnpromptedView};
use crate::error::{Error, Result};
use crate::objectives::Classifier;
use crate::promptpool::{assemble_bundle, select, PromptPool};
use crate::replay::StatsStore;

/// Everything the voters need after `k` tasks.
#[derive(Clone, Copy, Debug)]
pub struct VoteContext<'a> {
    pub k: usize,
    /// Largest pool index the tally may reach.
    pub m: usize,
    pub stats: &'a StatsStore,
}

impl<'a> VoteContext<'a> {
    /// `m = None` means no cap (`m = k`). Checks that every `(i, t)` with
    /// `0 <= i <= t <= k`, `t >= 1`, is present.
    pub fn new(k: usize, m: Option<usize>, stats: &'a StatsStore) -> Result<Self> {
        if k == 0 {
            return Err(Error::State("no task has been learned".into()));
        }
        let m = m.unwrap_or(k);
        if m == 0 {
            return Err(Error::Config("maximum experts must be positive".into()));
        }
        for t in 1..=k {
            for i in 0..=t {
                if stats.get(i, t).is_none() {
                    return Err(Error::State(format!("missing statistic for pool {i} task {t}")));
                }
            }
        }
        Ok(VoteContext { k, m, stats })
    }

    /// Candidate tasks for pool `i`.
    pub fn range(&self, i: usize) -> std::ops::RangeInclusive<usize> {
        i.max(1)..=self.k
    }
}

/// Distance of `z` (a pool-`i` feature) to the nearest relation of task `t`.
pub fn pool_score(ctx: &VoteContext<'_>, i: usize, t: usize, z: &[f64]) -> Result<f64> {
    if t < i.max(1) {
        return Err(Error::Domain(format!("pool {i} has no distribution for task {t}")));
    }
    if t > ctx.k || i > ctx.k {
        return Err(Error::Domain(format!("pool {i} task {t} beyond {} learned tasks", ctx.k)));
    }
    let stat = ctx
        .stats
        .get(i, t)
        .ok_or_else(|| Error::State(format!("missing statistic for pool {i} task {t}")))?;
    stat.min_distance(z)
}

/// Scores for every candidate task of pool `i`, in task order.
pub fn pool_scores(ctx: &VoteContext<'_>, i: usize, z: &[f64]) -> Result<Vec<f64>> {
    ctx.range(i).map(|t| pool_score(ctx, i, t, z)).collect()
}

/// Lowest-scoring task; ties go to the lower task.
pub fn pool_vote(ctx: &VoteContext<'_>, i: usize, z: &[f64]) -> Result<usize> {
    Ok(vote_from_scores(i.max(1), &pool_scores(ctx, i, z)?))
}

fn vote_from_scores(first_task: usize, scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = j;
        }
    }
    first_task + best
}

/// One consulted pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolVote {
    pub pool: usize,
    pub vote: usize,
    /// Scores for tasks `max(pool, 1)..=k`.
    pub scores: Vec<f64>,
}

/// How the cascade reached its decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteTrace {
    pub consulted: Vec<PoolVote>,
    pub fast_path: bool,
    /// Last pool tallied on the slow path.
    pub end: Option<usize>,
    /// Vote counts indexed by task (index 0 unused).
    pub tally: Vec<usize>,
    pub decision: usize,
}

impl VoteTrace {
    /// Recomputes the decision from the recorded votes.
    pub fn replay_decision(&self) -> usize {
        if self.fast_path {
            return self.consulted[0].vote;
        }
        argmax_lowest(&self.tally)
    }
}

fn argmax_lowest(tally: &[usize]) -> usize {
    let mut best = 1;
    for (t, &c) in tally.iter().enumerate().skip(1) {
        if c > tally[best] {
            best = t;
        }
    }
    best
}

/// The cascade over an arbitrary voter. `vote(i)` returns pool `i`'s vote
/// and score row; each call stands for one encode pass with pool `i`.
pub fn cascade<F>(k: usize, m: usize, mut vote: F) -> Result<(usize, VoteTrace)>
where
    F: FnMut(usize) -> Result<PoolVote>,
{
    if k == 0 || m == 0 {
        return Err(Error::State(format!("cascade needs k, m >= 1, got k={k} m={m}")));
    }
    let v0 = vote(0)?;
    let v1 = vote(1)?;
    let mut consulted = vec![v0, v1];
    let (a, b) = (consulted[0].vote, consulted[1].vote);
    if a == b {
        return Ok((
            a,
            VoteTrace {
                consulted,
                fast_path: true,
                end: None,
                tally: Vec::new(),
                decision: a,
            },
        ));
    }
    let end = a.min(b).min(m);
    for i in 2..=end {
        consulted.push(vote(i)?);
    }
    let mut tally = vec![0usize; k + 1];
    for v in &consulted {
        tally[v.vote] += 1;
    }
    let decision = argmax_lowest(&tally);
    Ok((
        decision,
        VoteTrace {
            consulted,
            fast_path: false,
            end: Some(end),
            tally,
            decision,
        },
    ))
}

/// Cascade voting where `feature(i)` yields the pool-`i` relation feature.
pub fn cascade_vote<F>(ctx: &VoteContext<'_>, mut feature: F) -> Result<(usize, VoteTrace)>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    cascade(ctx.k, ctx.m, |i| {
        let z = feature(i)?;
        let scores = pool_scores(ctx, i, &z)?;
        Ok(PoolVote {
            pool: i,
            vote: vote_from_scores(i.max(1), &scores),
            scores,
        })
    })
}

/// Relation feature of an instance encoded with prompts retrieved from `pool`.
pub fn prompted_feature(tokens: &[u32], e1_pos: usize, e2_pos: usize, query: &[f64], pool: &PromptPool, backbone: &FrozenBackbone) -> Result<Vec<f64>> {
    let idx = select(pool, query)?;
    let bundle = assemble_bundle(pool, &idx)?;
    relation_feature(&encode(tokens, Some(&bundle), backbone)?, e1_pos, e2_pos)
}

/// Trained state used at inference time. `pools[t - 1]` belongs to task `t`.
pub struct Predictor<'a> {
    pub backbone: &'a FrozenBackbone,
    pub pools: &'a [PromptPool],
    pub classifier: &'a Classifier,
    pub ctx: VoteContext<'a>,
}

/// A prediction and the task route behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub task: usize,
    pub relation: usize,
    pub trace: Option<VoteTrace>,
}

impl Predictor<'_> {
    fn pool(&self, t: usize) -> Result<&PromptPool> {
        self.pools
            .get(t.wrapping_sub(1))
            .ok_or_else(|| Error::State(format!("no pool for task {t}")))
    }

    /// Pool-`i` feature; pool 0 reuses the unprompted pass.
    pub fn feature(&self, i: usize, tokens: &[u32], e1_pos: usize, e2_pos: usize, view: &UnpromptedView) -> Result<Vec<f64>> {
        if i == 0 {
            return Ok(view.feature.clone());
        }
        prompted_feature(tokens, e1_pos, e2_pos, &view.query, self.pool(i)?, self.backbone)
    }

    /// Cascade-inferred task, then the global classifier under that task's pool.
    pub fn infer(&self, tokens: &[u32], e1_pos: usize, e2_pos: usize) -> Result<Inference> {
        let view = UnpromptedView::compute(tokens, e1_pos, e2_pos, self.backbone)?;
        let mut cache: Vec<Option<Vec<f64>>> = vec![None; self.ctx.k + 1];
        let (task, trace) = cascade_vote(&self.ctx, |i| {
            let z = self.feature(i, tokens, e1_pos, e2_pos, &view)?;
            cache[i] = Some(z.clone());
            Ok(z)
        })?;
        let z = match cache[task].take() {
            Some(z) => z,
            None => self.feature(task, tokens, e1_pos, e2_pos, &view)?,
        };
        Ok(Inference {
            task,
            relation: self.classifier.predict(&z)?,
            trace: Some(trace),
        })
    }

    /// Prediction with the task identity supplied instead of voted.
    pub fn infer_with_task(&self, tokens: &[u32], e1_pos: usize, e2_pos: usize, task: usize) -> Result<Inference> {
        let query = crate::encoder::query_feature(tokens, self.backbone)?;
        let z = prompted_feature(tokens, e1_pos, e2_pos, &query, self.pool(task)?, self.backbone)?;
        Ok(Inference {
            task,
            relation: self.classifier.predict(&z)?,
            trace: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::numkit::{Mat, Rng};
    use crate::replay::GaussianStat;

    fn stat(i: usize, t: usize, means: Vec<(usize, Vec<f64>)>) -> GaussianStat {
        let d = means[0].1.len();
        GaussianStat::new(i, t, means.into_iter().collect::<BTreeMap<_, _>>(), Mat::identity(d)).unwrap()
    }

    /// Full store for `k` tasks with random means, two relations per task.
    fn random_store(k: usize, rng: &mut Rng) -> StatsStore {
        let mut s = StatsStore::new();
        for t in 1..=k {
            for i in 0..=t {
                s.insert(stat(i, t, vec![(2 * t, rng.normal_vec(3, 2.0)), (2 * t + 1, rng.normal_vec(3, 2.0))])).unwrap();
            }
        }
        s
    }

    #[test]
    fn score_examples() {
        let mut s = StatsStore::new();
        s.insert(stat(0, 1, vec![(0, vec![0.0, 0.0]), (1, vec![0.0, 3.0])])).unwrap();
        s.insert(stat(1, 1, vec![(0, vec![1.0, 0.0]), (1, vec![-3.0, 0.0])])).unwrap();
        let ctx = VoteContext::new(1, None, &s).unwrap();
        assert_eq!(pool_score(&ctx, 1, 1, &[1.0, 0.0]).unwrap(), 0.0);
        assert!((pool_score(&ctx, 0, 1, &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pool_score(&ctx, 1, 1, &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pool_vote(&ctx, 0, &[5.0, 5.0]).unwrap(), 1);
        assert_eq!(pool_vote(&ctx, 1, &[5.0, 5.0]).unwrap(), 1);
    }

    #[test]
    fn score_below_pool_is_out_of_domain() {
        let s = random_store(3, &mut Rng::new(1));
        let ctx = VoteContext::new(3, None, &s).unwrap();
        assert!(matches!(pool_score(&ctx, 2, 1, &[0.0; 3]), Err(Error::Domain(_))));
        assert!(matches!(pool_score(&ctx, 0, 0, &[0.0; 3]), Err(Error::Domain(_))));
    }

    #[test]
    fn incomplete_store_is_rejected() {
        let mut s = StatsStore::new();
        s.insert(stat(1, 1, vec![(0, vec![0.0])])).unwrap();
        assert!(matches!(VoteContext::new(1, None, &s), Err(Error::State(_))));
    }

    #[test]
    fn score_matches_enumeration() {
        let mut rng = Rng::new(2);
        let s = random_store(4, &mut rng);
        let ctx = VoteContext::new(4, None, &s).unwrap();
        for _ in 0..200 {
            let z = rng.normal_vec(3, 2.0);
            let i = rng.below(5);
            let scores = pool_scores(&ctx, i, &z).unwrap();
            for (j, t) in ctx.range(i).enumerate() {
                // identity covariance: plain squared Euclidean distances
                let brute = s
                    .get(i, t)
                    .unwrap()
                    .means()
                    .values()
                    .map(|mu| mu.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!((scores[j] - brute).abs() < 1e-9);
            }
            let v = pool_vote(&ctx, i, &z).unwrap();
            assert!(v >= i.max(1) && v <= 4);
            let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = ctx.range(i).zip(&scores).find(|(_, &sc)| sc == min).unwrap().0;
            assert_eq!(v, first);
        }
    }

    #[test]
    fn last_pool_votes_for_itself() {
        let s = random_store(3, &mut Rng::new(3));
        let ctx = VoteContext::new(3, None, &s).unwrap();
        assert_eq!(pool_vote(&ctx, 3, &[9.0, -9.0, 0.0]).unwrap(), 3);
    }

    fn table_voter(votes: &[usize]) -> impl FnMut(usize) -> Result<PoolVote> + '_ {
        move |i| {
            Ok(PoolVote {
                pool: i,
                vote: votes[i],
                scores: Vec::new(),
            })
        }
    }

    #[test]
    fn agreement_takes_fast_path() {
        let votes = [3, 3, 1, 2];
        let (d, trace) = cascade(3, 3, table_voter(&votes)).unwrap();
        assert_eq!(d, 3);
        assert!(trace.fast_path);
        assert_eq!(trace.consulted.len(), 2);
    }

    #[test]
    fn hand_traced_disagreement() {
        let votes = [2, 1, 3, 3];
        let (d, trace) = cascade(3, 10, table_voter(&votes)).unwrap();
        assert_eq!(trace.end, Some(1));
        assert_eq!(trace.consulted.iter().map(|v| v.pool).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(d, 1);
    }

    /// Line-by-line transcription of the cascade: votes V[0..=k].
    fn reference_cascade(v: &[usize], k: usize, m: usize) -> (usize, usize) {
        if v[0] == v[1] {
            return (v[0], 2);
        }
        let start = 0;
        let end = std::cmp::min(std::cmp::min(v[0], v[1]), m);
        let mut result = vec![0; k + 1];
        let mut i = start;
        while i <= end {
            result[v[i]] += 1;
            i += 1;
        }
        let mut c = 1;
        for t in 2..=k {
            if result[t] > result[c] {
                c = t;
            }
        }
        (c, end + 1)
    }

    #[test]
    fn cascade_matches_reference_on_random_tables() {
        let mut rng = Rng::new(9);
        for _ in 0..10_000 {
            let k = 1 + rng.below(8);
            let m = 1 + rng.below(k + 2);
            let votes: Vec<usize> = (0..=k).map(|i| i.max(1) + rng.below(k - i.max(1) + 1)).collect();
            let mut calls = 0;
            let (d, trace) = cascade(k, m, |i| {
                calls += 1;
                table_voter(&votes)(i)
            })
            .unwrap();
            let (expected, pools) = reference_cascade(&votes, k, m);
            assert_eq!(d, expected, "votes {votes:?} k={k} m={m}");
            assert_eq!(calls, pools.max(2));
            assert!(calls <= votes[0].min(votes[1]).min(m) + 2);
            assert_eq!(trace.replay_decision(), d);
        }
    }

    #[test]
    fn forced_tally_agrees_with_fast_path_when_unanimous() {
        let mut rng = Rng::new(10);
        for _ in 0..500 {
            let k = 1 + rng.below(6);
            let t = 1 + rng.below(k);
            let votes: Vec<usize> = (0..=k).map(|i| if i <= t { t } else { i }).collect();
            let (fast, _) = cascade(k, k, table_voter(&votes)).unwrap();
            let mut tally = vec![0; k + 1];
            for &v in &votes[..=t.min(k)] {
                tally[v] += 1;
            }
            assert_eq!(fast, argmax_lowest(&tally));
        }
    }

    #[test]
    fn single_task_always_votes_one() {
        let s = random_store(1, &mut Rng::new(4));
        let ctx = VoteContext::new(1, None, &s).unwrap();
        let (d, trace) = cascade_vote(&ctx, |_| Ok(vec![7.0, 7.0, 7.0])).unwrap();
        assert_eq!(d, 1);
        assert!(trace.fast_path);
    }
}
