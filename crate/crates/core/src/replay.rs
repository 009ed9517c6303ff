//! Gaussian latent replay: per-(pool, task) relation means with one shared
//! covariance, sampling of synthetic features, and classifier retraining on
//! those samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{gaussian_sample, mahalanobis_sq, matmul_tn_acc, spd_factorize, Mat, Rng, SpdFactor};
use crate::objectives::{classification_loss_grad, Classifier, ClassifierGrad};

/// Relation means of task `task` as seen through pool `pool`, and the
/// covariance they share.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStat {
    pool: usize,
    task: usize,
    means: BTreeMap<usize, Vec<f64>>,
    cov: Mat,
    factor: SpdFactor,
}

impl GaussianStat {
    /// Validates and factorizes. Pool `i` only models tasks `t >= i`.
    pub fn new(pool: usize, task: usize, means: BTreeMap<usize, Vec<f64>>, cov: Mat) -> Result<Self> {
        if task == 0 || task < pool {
            return Err(Error::Domain(format!("no distribution for pool {pool} on task {task}")));
        }
        if means.is_empty() {
            return Err(Error::Input("statistic without relations".into()));
        }
        let d = cov.rows();
        if cov.cols() != d || means.values().any(|m| m.len() != d) {
            return Err(Error::dim(format!("means and {}x{} covariance disagree", cov.rows(), cov.cols())));
        }
        let factor = spd_factorize(&cov)?;
        Ok(GaussianStat {
            pool,
            task,
            means,
            cov,
            factor,
        })
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn dim(&self) -> usize {
        self.cov.rows()
    }

    pub fn means(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.means
    }

    pub fn mean(&self, relation: usize) -> Option<&[f64]> {
        self.means.get(&relation).map(Vec::as_slice)
    }

    pub fn covariance(&self) -> &Mat {
        &self.cov
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    /// Smallest squared Mahalanobis distance from `z` to any relation mean.
    pub fn min_distance(&self, z: &[f64]) -> Result<f64> {
        let mut best = f64::INFINITY;
        for mu in self.means.values() {
            best = best.min(mahalanobis_sq(z, mu, &self.factor)?);
        }
        Ok(best)
    }

    pub fn sample(&self, relation: usize, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let mu = self
            .mean(relation)
            .ok_or_else(|| Error::State(format!("relation {relation} not in task {}", self.task)))?;
        gaussian_sample(mu, &self.factor, n, rng)
    }
}

/// Per-relation means and the covariance pooled over the whole task,
/// `Σ = (1/|D_t|) Σ_r Σ_z (z − μ_r)(z − μ_r)ᵀ`.
pub fn fit_gaussians(groups: &BTreeMap<usize, Vec<Vec<f64>>>, pool: usize, task: usize) -> Result<GaussianStat> {
    let d = groups
        .values()
        .flat_map(|g| g.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::Input("no features to fit".into()))?;
    let mut means = BTreeMap::new();
    let mut cov = Mat::zeros(d, d);
    let mut total = 0usize;
    for (&r, feats) in groups {
        if feats.is_empty() {
            return Err(Error::Input(format!("relation {r} has no features")));
        }
        if feats.iter().any(|z| z.len() != d) {
            return Err(Error::dim(format!("relation {r} features are not all width {d}")));
        }
        let n = feats.len() as f64;
        let mut mu = vec![0.0; d];
        for z in feats {
            for (m, v) in mu.iter_mut().zip(z) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n);
        let centered = Mat::from_fn(feats.len(), d, |i, j| feats[i][j] - mu[j]);
        matmul_tn_acc(&centered, &centered, &mut cov);
        total += feats.len();
        means.insert(r, mu);
    }
    cov.as_mut_slice().iter_mut().for_each(|v| *v /= total as f64);
    GaussianStat::new(pool, task, means, cov)
}

/// Append-only store of fitted statistics keyed by `(pool, task)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsStore {
    stats: BTreeMap<(usize, usize), GaussianStat>,
}

impl StatsStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Refuses to overwrite: earlier statistics are never revised.
    pub fn insert(&mut self, stat: GaussianStat) -> Result<()> {
        let key = (stat.pool, stat.task);
        if self.stats.contains_key(&key) {
            return Err(Error::State(format!("statistic for pool {} task {} already stored", key.0, key.1)));
        }
        self.stats.insert(key, stat);
        Ok(())
    }

    pub fn get(&self, pool: usize, task: usize) -> Option<&GaussianStat> {
        self.stats.get(&(pool, task))
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// Statistics under trained pools (`pool >= 1`).
    pub fn prompted_len(&self) -> usize {
        self.stats.keys().filter(|(p, _)| *p >= 1).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &GaussianStat> {
        self.stats.values()
    }

    /// The statistic of each task under its own pool, `(t, t)`.
    pub fn own_pool(&self, tasks: usize) -> Result<Vec<&GaussianStat>> {
        (1..=tasks)
            .map(|t| self.get(t, t).ok_or_else(|| Error::State(format!("missing statistic for task {t} under its own pool"))))
            .collect()
    }
}

/// `n` samples per relation, in the order of `relations`, each labeled
/// with its relation id.
pub fn replay_batch(sources: &[&GaussianStat], relations: &[usize], n: usize, rng: &mut Rng) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::with_capacity(relations.len() * n);
    for &r in relations {
        let stat = sources
            .iter()
            .find(|s| s.means.contains_key(&r))
            .ok_or_else(|| Error::State(format!("no statistic covers relation {r}")))?;
        out.extend(stat.sample(r, n, rng)?.into_iter().map(|z| (r, z)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    /// Samples per relation and epoch.
    pub samples_per_relation: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            samples_per_relation: 64,
            epochs: 30,
            lr: 0.1,
            batch_size: 16,
        }
    }
}

/// Held-out replay loss before and after classifier training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplayReport {
    pub loss_before: f64,
    pub loss_after: f64,
    pub accuracy_after: f64,
}

/// Mean cross-entropy and accuracy of `classifier` on labeled features.
pub fn replay_metrics(classifier: &Classifier, batch: &[(usize, Vec<f64>)]) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (y, z) in batch {
        let logits = classifier.logits(z)?;
        loss += classification_loss_grad(&logits, *y)?.0;
        if classifier.predict(z)? == *y {
            hits += 1;
        }
    }
    let n = batch.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Retrains every classifier parameter on fresh replay samples each epoch.
pub fn train_classifier_replay(
    classifier: &mut Classifier,
    sources: &[&GaussianStat],
    relations: &[usize],
    cfg: &ReplayConfig,
    rng: &mut Rng,
) -> Result<ReplayReport> {
    if let Some(&r) = relations.iter().find(|&&r| r >= classifier.classes()) {
        return Err(Error::dim(format!("relation {r} has no logit among {}", classifier.classes())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("replay batch size must be positive".into()));
    }
    let mut held_rng = rng.fork("held-out");
    let held = replay_batch(sources, relations, cfg.samples_per_relation.max(1), &mut held_rng)?;
    let (loss_before, _) = replay_metrics(classifier, &held)?;

    for _ in 0..cfg.epochs {
        let mut batch = replay_batch(sources, relations, cfg.samples_per_relation, rng)?;
        rng.shuffle(&mut batch);
        for chunk in batch.chunks(cfg.batch_size) {
            let mut grad = ClassifierGrad::zeros_like(classifier);
            let scale = 1.0 / chunk.len() as f64;
            for (y, z) in chunk {
                let (logits, cache) = classifier.forward(z)?;
                let (_, mut g) = classification_loss_grad(&logits, *y)?;
                g.iter_mut().for_each(|v| *v *= scale);
                classifier.backward(z, &cache, &g, &mut grad);
            }
            classifier.sgd_step(&grad, cfg.lr);
        }
    }

    let (loss_after, accuracy_after) = replay_metrics(classifier, &held)?;
    Ok(ReplayReport {
        loss_before,
        loss_after,
        accuracy_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(items: Vec<(usize, Vec<Vec<f64>>)>) -> BTreeMap<usize, Vec<Vec<f64>>> {
        items.into_iter().collect()
    }

    #[test]
    fn single_points_give_zero_covariance() {
        let s = fit_gaussians(&groups(vec![(0, vec![vec![1.0, 2.0]]), (1, vec![vec![-3.0, 0.5]])]), 1, 1).unwrap();
        assert_eq!(s.mean(0).unwrap(), &[1.0, 2.0]);
        assert_eq!(s.mean(1).unwrap(), &[-3.0, 0.5]);
        assert!(s.covariance().as_slice().iter().all(|&v| v == 0.0));
        assert!(s.factor().ridge() > 0.0);
    }

    #[test]
    fn two_point_example() {
        let s = fit_gaussians(&groups(vec![(4, vec![vec![0.0, 0.0], vec![2.0, 2.0]])]), 0, 1).unwrap();
        assert_eq!(s.mean(4).unwrap(), &[1.0, 1.0]);
        assert_eq!(s.covariance().as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalizes_by_task_size_not_group_size() {
        // group a: 1 point; group b: 3 points with scatter 2 on axis 0
        let g = groups(vec![(0, vec![vec![5.0, 5.0]]), (1, vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]])]);
        let s = fit_gaussians(&g, 1, 1).unwrap();
        // scatter 2 over |D_t| = 4
        assert!((s.covariance()[(0, 0)] - 0.5).abs() < 1e-12);
        // per-group averaging would give (0 + 2/3) / 2
        assert!((s.covariance()[(0, 0)] - (2.0 / 3.0) / 2.0).abs() > 0.1);
        assert_eq!(s.covariance()[(1, 1)], 0.0);
    }

    #[test]
    fn closed_form_agreement() {
        let mut rng = Rng::new(3);
        let pts: Vec<Vec<f64>> = (0..7).map(|_| rng.normal_vec(3, 1.0)).collect();
        let more: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(3, 2.0)).collect();
        let s = fit_gaussians(&groups(vec![(0, pts.clone()), (1, more.clone())]), 2, 2).unwrap();
        let mean = |g: &[Vec<f64>]| (0..3).map(|c| g.iter().map(|p| p[c]).sum::<f64>() / g.len() as f64).collect::<Vec<_>>();
        let (m0, m1) = (mean(&pts), mean(&more));
        for i in 0..3 {
            for j in 0..3 {
                let scatter: f64 = pts.iter().map(|p| (p[i] - m0[i]) * (p[j] - m0[j])).sum::<f64>()
                    + more.iter().map(|p| (p[i] - m1[i]) * (p[j] - m1[j])).sum::<f64>();
                assert!((s.covariance()[(i, j)] - scatter / 11.0).abs() < 1e-12);
            }
        }
        assert!(s.mean(0).unwrap().iter().zip(&m0).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn recovers_known_gaussian() {
        let cov = Mat::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.5]]).unwrap();
        let truth = GaussianStat::new(1, 1, [(0, vec![2.0, -1.0])].into_iter().collect(), cov.clone()).unwrap();
        let pts = truth.sample(0, 10_000, &mut Rng::new(11)).unwrap();
        let fit = fit_gaussians(&groups(vec![(0, pts)]), 1, 1).unwrap();
        assert!((fit.mean(0).unwrap()[0] - 2.0).abs() < 0.05);
        assert!((fit.mean(0).unwrap()[1] + 1.0).abs() < 0.05);
        assert!(fit.covariance().max_abs_diff(&cov) < 0.05);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(fit_gaussians(&groups(vec![(0, vec![vec![1.0]]), (1, vec![])]), 1, 1), Err(Error::Input(_))));
        assert!(matches!(fit_gaussians(&BTreeMap::new(), 1, 1), Err(Error::Input(_))));
        assert!(matches!(fit_gaussians(&groups(vec![(0, vec![vec![1.0]])]), 2, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn store_counts_and_refuses_revision() {
        let mut store = StatsStore::new();
        let tasks = 4;
        for t in 1..=tasks {
            for i in 0..=t {
                let s = fit_gaussians(&groups(vec![(t, vec![vec![t as f64]])]), i, t).unwrap();
                store.insert(s).unwrap();
            }
        }
        assert_eq!(store.prompted_len(), tasks * (tasks + 1) / 2);
        assert_eq!(store.len(), tasks * (tasks + 1) / 2 + tasks);
        let dup = fit_gaussians(&groups(vec![(1, vec![vec![9.0]])]), 1, 1).unwrap();
        assert!(matches!(store.insert(dup), Err(Error::State(_))));
        assert_eq!(store.own_pool(tasks).unwrap().len(), tasks);
    }

    fn separable(task: usize, rels: [usize; 2], centers: [f64; 2]) -> GaussianStat {
        let means = rels
            .iter()
            .zip(centers)
            .map(|(&r, c)| (r, vec![c, -c, 0.5 * c]))
            .collect();
        GaussianStat::new(task, task, means, Mat::diag(&[0.05; 3])).unwrap()
    }

    #[test]
    fn replay_batch_shape() {
        let s = separable(1, [0, 1], [2.0, -2.0]);
        let mut rng = Rng::new(1);
        assert!(replay_batch(&[&s], &[0, 1], 0, &mut rng).unwrap().is_empty());
        let b = replay_batch(&[&s], &[1, 0], 5, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|(y, _)| *y == 0).count(), 5);
        assert_eq!(b.iter().filter(|(y, _)| *y == 1).count(), 5);
        assert!(matches!(replay_batch(&[&s], &[2], 1, &mut rng), Err(Error::State(_))));
        let again = replay_batch(&[&s], &[1, 0], 5, &mut Rng::new(1)).unwrap();
        let first = replay_batch(&[&s], &[1, 0], 5, &mut Rng::new(1)).unwrap();
        assert_eq!(again, first);
    }

    #[test]
    fn zero_covariance_replays_the_mean() {
        let s = fit_gaussians(&groups(vec![(3, vec![vec![0.5, -0.5]])]), 1, 1).unwrap();
        for (_, z) in replay_batch(&[&s], &[3], 20, &mut Rng::new(2)).unwrap() {
            assert!((z[0] - 0.5).abs() < 1e-4 && (z[1] + 0.5).abs() < 1e-4);
        }
    }

    #[test]
    fn separable_replay_is_learned() {
        let s = separable(1, [0, 1], [1.5, -1.5]);
        let mut rng = Rng::new(4);
        let mut c = Classifier::new(3, 8, &mut rng);
        c.grow(2, &mut rng);
        let rep = train_classifier_replay(&mut c, &[&s], &[0, 1], &ReplayConfig::default(), &mut rng).unwrap();
        assert!(rep.loss_after < rep.loss_before);
        assert!(rep.accuracy_after >= 0.99);
    }

    #[test]
    fn identical_means_stay_at_chance() {
        let means = [(0, vec![0.0; 3]), (1, vec![0.0; 3])].into_iter().collect();
        let s = GaussianStat::new(1, 1, means, Mat::identity(3)).unwrap();
        let mut rng = Rng::new(5);
        let mut c = Classifier::new(3, 8, &mut rng);
        c.grow(2, &mut rng);
        train_classifier_replay(&mut c, &[&s], &[0, 1], &ReplayConfig::default(), &mut rng).unwrap();
        let test = replay_batch(&[&s], &[0, 1], 2000, &mut Rng::new(6)).unwrap();
        let (_, acc) = replay_metrics(&c, &test).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "accuracy {acc}");
    }

    #[test]
    fn old_relations_survive_new_task() {
        let t1 = separable(1, [0, 1], [1.5, -1.5]);
        let t2 = GaussianStat::new(
            2,
            2,
            [(2, vec![1.5, 1.5, -1.0]), (3, vec![-1.5, -1.5, 1.0])].into_iter().collect(),
            Mat::diag(&[0.05; 3]),
        )
        .unwrap();
        let mut rng = Rng::new(7);
        let mut c = Classifier::new(3, 8, &mut rng);
        c.grow(2, &mut rng);
        let cfg = ReplayConfig::default();
        train_classifier_replay(&mut c, &[&t1], &[0, 1], &cfg, &mut rng).unwrap();
        c.grow(2, &mut rng);
        train_classifier_replay(&mut c, &[&t1, &t2], &[0, 1, 2, 3], &cfg, &mut rng).unwrap();
        let old = replay_batch(&[&t1], &[0, 1], 500, &mut Rng::new(8)).unwrap();
        let (_, acc) = replay_metrics(&c, &old).unwrap();
        assert!(acc >= 0.95, "task-1 replay accuracy {acc}");
    }

    #[test]
    fn classifier_too_small_is_rejected() {
        let s = separable(1, [0, 1], [1.0, -1.0]);
        let mut rng = Rng::new(1);
        let mut c = Classifier::new(3, 4, &mut rng);
        c.grow(1, &mut rng);
        let r = train_classifier_replay(&mut c, &[&s], &[0, 1], &ReplayConfig::default(), &mut rng);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }
}
