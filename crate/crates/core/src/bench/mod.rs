//! Synthetic continual relation-classification benchmark: stream
//! generation, the task-by-task training driver, stage-wise evaluation,
//! run artifacts and ablation grids.

mod ablate;
mod artifacts;
mod config;
mod driver;
mod evaluate;
mod guard;
mod persist;
mod records;
mod stream;

pub use ablate::{column, mean, run_grid, sign_test_p, std_dev, write_rows, AblationRow, Grid, PairedComparison, D_GRID, LK_GRID};
pub use artifacts::{artifacts_root, load_run, read_config, save_run, write_config, StoredRun, ARTIFACTS_ENV, CONFIG_FILE, STREAM_DIR};
pub use config::{Flags, ModelConfig, RunConfig, StreamConfig, TaskHead};
pub use driver::{run_continual, RunOutput, TrainedModel};
pub use evaluate::{evaluate, predict, Route, TraceRow};
pub use guard::RehearsalGuard;
pub use persist::{load_model, save_model, WEIGHTS_FILE};
pub use records::{read_traces, write_traces, Contracts, RunRecord, StageRow, Timing, RECORDS_FILE, SUMMARY_FILE, TIMING_FILE, TRACES_FILE};
pub use stream::{generate_stream, Split, TaskData, TaskInstance, TaskStream};
