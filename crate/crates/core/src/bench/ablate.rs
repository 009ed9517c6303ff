//! Seeded grids over ablation switches and pool shapes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promptpool::PoolShape;

use super::config::{RunConfig, StreamConfig, TaskHead};
use super::driver::run_continual;
use super::stream::generate_stream;

/// Which switch a grid varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    /// Prompt pool against a single prompt with the same prefix rows,
    /// on the heterogeneous stream.
    Pool,
    Descriptions,
    /// Cascade vote against the MLP task head.
    TaskHead,
    /// `(prompt_len, top_k)` in `(8,1), (4,2), (2,4), (1,8)` with 16 entries.
    Lk,
    /// Description sequences per relation.
    D,
}

impl Grid {
    pub const ALL: [Grid; 5] = [Grid::Pool, Grid::Descriptions, Grid::TaskHead, Grid::Lk, Grid::D];

    pub fn name(self) -> &'static str {
        match self {
            Grid::Pool => "pool",
            Grid::Descriptions => "descriptions",
            Grid::TaskHead => "task-head",
            Grid::Lk => "lk",
            Grid::D => "d",
        }
    }

    /// Labelled configurations derived from `base`, treatment first for
    /// the two-arm grids.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (label.to_string(), c)
        };
        match self {
            Grid::Pool => {
                let hetero = |c: &mut RunConfig| c.stream = StreamConfig::heterogeneous();
                vec![
                    with("pool-on", &|c| hetero(c)),
                    with("pool-off", &|c| {
                        hetero(c);
                        c.flags.pool = false;
                    }),
                ]
            }
            Grid::Descriptions => vec![
                with("descriptions-on", &|c| c.flags.descriptions = true),
                with("descriptions-off", &|c| c.flags.descriptions = false),
            ],
            Grid::TaskHead => vec![
                with("cascade", &|c| c.flags.task_head = TaskHead::Cascade),
                with("mlp", &|c| c.flags.task_head = TaskHead::Mlp),
            ],
            Grid::Lk => LK_GRID
                .iter()
                .map(|&(l, k)| {
                    with(&format!("L={l},K={k}"), &move |c| {
                        c.model.pool = PoolShape {
                            size: 16,
                            top_k: k,
                            prompt_len: l,
                        }
                    })
                })
                .collect(),
            Grid::D => D_GRID
                .iter()
                .map(|&d| {
                    with(&format!("D={d}"), &move |c| {
                        c.stream.descriptions_per_relation = d;
                        c.flags.descriptions = true;
                    })
                })
                .collect(),
        }
    }
}

/// `(prompt_len, top_k)` pairs with eight prefix rows each.
pub const LK_GRID: [(usize, usize); 4] = [(8, 1), (4, 2), (2, 4), (1, 8)];
pub const D_GRID: [usize; 3] = [1, 3, 5];

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Grid::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown grid `{s}`; expected one of pool, descriptions, task-head, lk, d")))
    }
}

/// Final-stage metrics of one variant under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: String,
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub tii_accuracy: f64,
    pub oracle_accuracy: f64,
    pub config_hash: String,
}

/// Runs every variant of `grid` under every seed; each seed has its own stream.
pub fn run_grid(grid: Grid, base: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (variant, cfg) in grid.variants(base) {
        for &seed in seeds {
            let cfg = cfg.clone().with_seed(seed);
            let stream = generate_stream(&cfg.stream, seed)?;
            let out = run_continual(&stream, &cfg)?;
            let last = out.record.final_stage().ok_or_else(|| Error::State("run produced no stages".into()))?;
            rows.push(AblationRow {
                grid: grid.name().to_string(),
                variant: variant.clone(),
                seed,
                accuracy: last.accuracy,
                tii_accuracy: last.tii_accuracy,
                oracle_accuracy: last.oracle_accuracy,
                config_hash: cfg.hash(),
            });
        }
    }
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Values of `metric` for `variant`, in seed order.
pub fn column(rows: &[AblationRow], variant: &str, metric: fn(&AblationRow) -> f64) -> Vec<f64> {
    let mut v: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == variant).collect();
    v.sort_by_key(|r| r.seed);
    v.into_iter().map(metric).collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation; 0 below two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, 1/2)`.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

/// Paired comparison of a treatment against a control across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedComparison {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub mean_treatment: f64,
    pub mean_control: f64,
    /// One-sided sign-test p-value for "control beats treatment".
    pub p_worse: f64,
}

impl PairedComparison {
    pub fn new(treatment: &[f64], control: &[f64]) -> Self {
        let (mut wins, mut losses, mut ties) = (0, 0, 0);
        for (a, b) in treatment.iter().zip(control) {
            match a.partial_cmp(b) {
                Some(std::cmp::Ordering::Greater) => wins += 1,
                Some(std::cmp::Ordering::Less) => losses += 1,
                _ => ties += 1,
            }
        }
        PairedComparison {
            wins,
            losses,
            ties,
            mean_treatment: mean(treatment),
            mean_control: mean(control),
            p_worse: sign_test_p(losses, wins),
        }
    }

    /// Treatment is not worse: the sign test does not reject at `alpha`
    /// and its mean is at least the control's.
    pub fn holds(&self, alpha: f64) -> bool {
        self.p_worse >= alpha && self.mean_treatment >= self.mean_control
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: u64, k: u64) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn sign_test_matches_binomial_tail() {
        for n in 0..12u64 {
            for w in 0..=n {
                let want: f64 = (w..=n).map(|k| binom(n, k)).sum::<f64>() / 2f64.powi(n as i32);
                let got = sign_test_p(w as usize, (n - w) as usize);
                assert!((got - want).abs() < 1e-12, "n={n} w={w}");
            }
        }
        assert!((sign_test_p(5, 0) - 1.0 / 32.0).abs() < 1e-15);
        assert_eq!(sign_test_p(0, 0), 1.0);
    }

    #[test]
    fn comparison_counts() {
        let c = PairedComparison::new(&[0.9, 0.8, 0.7, 0.6], &[0.8, 0.8, 0.9, 0.5]);
        assert_eq!((c.wins, c.losses, c.ties), (2, 1, 1));
        assert!(c.holds(0.05));
        let c = PairedComparison::new(&[0.1; 5], &[0.2; 5]);
        assert!((c.p_worse - 1.0 / 32.0).abs() < 1e-15);
        assert!(!c.holds(0.05));
    }

    #[test]
    fn lk_grid_keeps_prefix_rows() {
        let v = Grid::Lk.variants(&RunConfig::default());
        assert_eq!(v.len(), 4);
        for (_, c) in &v {
            assert_eq!(c.model.pool.top_k * c.model.pool.prompt_len, 8);
            assert_eq!(c.model.pool.size, 16);
            c.validate().unwrap();
        }
    }

    #[test]
    fn grid_names_parse() {
        for g in Grid::ALL {
            assert_eq!(g.name().parse::<Grid>().unwrap(), g);
        }
        assert!("nope".parse::<Grid>().is_err());
    }

    #[test]
    fn std_dev_small_cases() {
        assert_eq!(std_dev(&[1.0]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
    }
}
