//! On-disk layout of a finished run.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::config::RunConfig;
use super::driver::{RunOutput, TrainedModel};
use super::evaluate::{evaluate, TraceRow};
use super::persist::{load_model, save_model, WEIGHTS_FILE};
use super::records::{write_traces, StageRow, TRACES_FILE};
use super::stream::{TaskData, TaskStream};

pub const CONFIG_FILE: &str = "config.json";
pub const STREAM_DIR: &str = "stream";
/// Overrides the default artifact root `./artifacts`.
pub const ARTIFACTS_ENV: &str = "PREFIXCL_ARTIFACTS";

pub fn artifacts_root() -> PathBuf {
    env::var_os(ARTIFACTS_ENV).map_or_else(|| PathBuf::from("artifacts"), PathBuf::from)
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes config, stream, weights, records, summary, traces and timing.
pub fn save_run(dir: &Path, cfg: &RunConfig, stream: &TaskStream, out: &RunOutput) -> Result<()> {
    write_config(dir, cfg)?;
    stream.write_dir(&dir.join(STREAM_DIR))?;
    save_model(&dir.join(WEIGHTS_FILE), &out.model)?;
    out.record.write(dir)?;
    write_traces(&dir.join(TRACES_FILE), &out.traces)?;
    out.timing.write(dir)?;
    Ok(())
}

/// A run reloaded from disk.
pub struct StoredRun {
    pub config: RunConfig,
    pub stream: TaskStream,
    pub model: TrainedModel,
}

pub fn load_run(dir: &Path) -> Result<StoredRun> {
    let config = read_config(&dir.join(CONFIG_FILE))?;
    let stream = TaskStream::read_dir(&dir.join(STREAM_DIR))?;
    let model = load_model(&dir.join(WEIGHTS_FILE))?;
    if model.config != config {
        return Err(Error::format(dir.join(WEIGHTS_FILE), "weights were trained under a different config"));
    }
    Ok(StoredRun { config, stream, model })
}

impl StoredRun {
    /// Recomputes the metrics of the last learned stage from stored weights.
    pub fn evaluate_final(&self) -> Result<(StageRow, Vec<TraceRow>)> {
        let stage = self.model.tasks();
        if self.stream.len() < stage {
            return Err(Error::State(format!("stream holds {} tasks, model learned {stage}", self.stream.len())));
        }
        let tests: Vec<&TaskData> = self.stream.tasks[..stage].iter().collect();
        evaluate(stage, &self.model, &tests)
    }
}
