use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::evaluate::TraceRow;

/// Metrics after learning `stage` tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: usize,
    /// Exact-match relation accuracy over every test instance of tasks `1..=stage`.
    pub accuracy: f64,
    /// Fraction routed to their true task.
    pub tii_accuracy: f64,
    /// Accuracy with the true task supplied.
    pub oracle_accuracy: f64,
    /// Accuracy on each task's test split, in task order.
    pub per_task: Vec<f64>,
}

fn frac(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

impl StageRow {
    /// Aggregates per-instance rows of one stage.
    pub fn from_traces(stage: usize, rows: &[TraceRow]) -> Self {
        let rows: Vec<&TraceRow> = rows.iter().filter(|r| r.stage == stage).collect();
        let n = rows.len();
        let count = |f: &dyn Fn(&TraceRow) -> bool| rows.iter().filter(|r| f(r)).count();
        let per_task = (1..=stage)
            .map(|t| {
                let of_t: Vec<_> = rows.iter().filter(|r| r.gold_task == t).collect();
                frac(of_t.iter().filter(|r| r.predicted_relation == r.gold_relation).count(), of_t.len())
            })
            .collect();
        StageRow {
            stage,
            accuracy: frac(count(&|r| r.predicted_relation == r.gold_relation), n),
            tii_accuracy: frac(count(&|r| r.routed_task == r.gold_task), n),
            oracle_accuracy: frac(count(&|r| r.oracle_relation == r.gold_relation), n),
            per_task,
        }
    }
}

/// Checks that held across the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contracts {
    /// Reads of closed training data that were refused.
    pub refused_reads: usize,
    pub backbone_checksum: String,
    pub backbone_unchanged: bool,
    /// Pools of finished tasks were bit-identical after every later task.
    pub frozen_pools_unchanged: bool,
    /// Statistics under trained pools.
    pub prompted_stats: usize,
    pub total_stats: usize,
}

/// Deterministic outcome of a run. Wall-clock lives in [`Timing`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub stages: Vec<StageRow>,
    /// Mean training objective over the last epoch of each task.
    pub train_loss: Vec<f64>,
    pub contracts: Contracts,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage_seconds: Vec<f64>,
}

pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACES_FILE: &str = "traces.csv";
pub const TIMING_FILE: &str = "timing.json";

impl RunRecord {
    pub fn final_stage(&self) -> Option<&StageRow> {
        self.stages.last()
    }

    /// `(stage, metric, value)` rows.
    pub fn rows(&self) -> Vec<(usize, String, f64)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((s.stage, "accuracy".to_string(), s.accuracy));
            out.push((s.stage, "tii_accuracy".to_string(), s.tii_accuracy));
            out.push((s.stage, "oracle_accuracy".to_string(), s.oracle_accuracy));
            for (t, a) in s.per_task.iter().enumerate() {
                out.push((s.stage, format!("task{}_accuracy", t + 1), *a));
            }
            if let Some(l) = self.train_loss.get(i) {
                out.push((s.stage, "train_loss".to_string(), *l));
            }
        }
        out
    }

    /// Writes the records table and the summary document into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(RECORDS_FILE))?;
        w.write_record(["stage", "metric", "value"])?;
        for (stage, metric, value) in self.rows() {
            w.write_record([stage.to_string(), metric, value.to_string()])?;
        }
        w.flush()?;
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_summary(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?)
    }
}

impl Timing {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(TIMING_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn write_traces(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
