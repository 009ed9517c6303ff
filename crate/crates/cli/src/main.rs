use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use prefixcl::bench::{
    artifacts_root, column, generate_stream, load_run, read_config, read_traces, run_continual, run_grid, save_run, std_dev, write_config,
    write_rows, Grid, PairedComparison, RunConfig, RunRecord, StageRow, StreamConfig, TaskHead, STREAM_DIR, TRACES_FILE,
};
use prefixcl::Error;

#[derive(Parser)]
#[command(name = "prefixcl", version, about = "Continual relation classification with per-task prefix pools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic task stream and its config.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Learn every task in order and persist the run.
    Train {
        /// Run directory; defaults to `$PREFIXCL_ARTIFACTS/run-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Reload a run and re-evaluate its final stage.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run an ablation grid over several seeds.
    Ablate {
        #[arg(long, value_parser = parse_grid)]
        grid: Grid,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// CSV with one row per variant and seed.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print per-instance vote traces of a run.
    Trace {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        stage: Option<usize>,
        /// Only instances routed to the wrong task.
        #[arg(long)]
        errors: bool,
    },
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Cascade,
    Mlp,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Base config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pools tallied by the cascade vote.
    #[arg(long = "m")]
    max_experts: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Description sequences per relation.
    #[arg(long = "D")]
    descriptions_per_relation: Option<usize>,
    /// Pool size.
    #[arg(long = "M")]
    pool_size: Option<usize>,
    /// Entries selected per instance.
    #[arg(long = "K")]
    top_k: Option<usize>,
    /// Prefix rows per entry.
    #[arg(long = "L")]
    prompt_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    relations_per_task: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    prompt_lr: Option<f64>,
    /// Several templates per relation.
    #[arg(long)]
    heterogeneous: bool,
    #[arg(long)]
    no_pool: bool,
    #[arg(long)]
    no_descriptions: bool,
    #[arg(long)]
    shared_pool: bool,
    #[arg(long, value_enum)]
    task_head: Option<HeadArg>,
    #[arg(long)]
    oracle_tii: bool,
}

impl ConfigArgs {
    fn build(&self) -> prefixcl::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => read_config(p)?,
            None => RunConfig::default(),
        };
        if self.heterogeneous {
            c.stream = StreamConfig {
                tasks: c.stream.tasks,
                ..StreamConfig::heterogeneous()
            };
        }
        set(&mut c.seed, self.seed);
        if self.max_experts.is_some() {
            c.model.max_experts = self.max_experts;
        }
        set(&mut c.model.train.weights.alpha, self.alpha);
        set(&mut c.model.train.weights.beta, self.beta);
        set(&mut c.stream.descriptions_per_relation, self.descriptions_per_relation);
        set(&mut c.model.pool.size, self.pool_size);
        set(&mut c.model.pool.top_k, self.top_k);
        set(&mut c.model.pool.prompt_len, self.prompt_len);
        set(&mut c.model.d_model, self.d_model);
        set(&mut c.model.heads, self.heads);
        set(&mut c.model.layers, self.layers);
        set(&mut c.stream.seq_len, self.seq_len);
        set(&mut c.stream.tasks, self.tasks);
        set(&mut c.stream.relations_per_task, self.relations_per_task);
        set(&mut c.model.train.epochs, self.epochs);
        set(&mut c.model.train.lr, self.lr);
        set(&mut c.model.train.prompt_lr, self.prompt_lr);
        if self.no_pool {
            c.flags.pool = false;
        }
        if self.no_descriptions || c.stream.descriptions_per_relation == 0 {
            c.flags.descriptions = false;
        }
        if self.shared_pool {
            c.flags.shared_pool = true;
        }
        if let Some(h) = self.task_head {
            c.flags.task_head = match h {
                HeadArg::Cascade => TaskHead::Cascade,
                HeadArg::Mlp => TaskHead::Mlp,
            };
        }
        if self.oracle_tii {
            c.flags.oracle_tii = true;
        }
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn print_stages(stages: &[StageRow]) {
    println!("stage  accuracy  tii     oracle  per-task");
    for s in stages {
        let per: Vec<String> = s.per_task.iter().map(|a| format!("{a:.3}")).collect();
        println!("{:>5}  {:.4}    {:.4}  {:.4}  {}", s.stage, s.accuracy, s.tii_accuracy, s.oracle_accuracy, per.join(" "));
    }
}

fn generate(out: &Path, cfg: &RunConfig) -> prefixcl::Result<()> {
    let stream = generate_stream(&cfg.stream, cfg.seed)?;
    let files = stream.write_dir(&out.join(STREAM_DIR))?;
    write_config(out, cfg)?;
    println!("wrote {} task files under {}", files.len(), out.join(STREAM_DIR).display());
    Ok(())
}

fn train(out: Option<PathBuf>, cfg: &RunConfig) -> prefixcl::Result<()> {
    let dir = out.unwrap_or_else(|| artifacts_root().join(format!("run-seed{}", cfg.seed)));
    let stream = generate_stream(&cfg.stream, cfg.seed)?;
    let run = run_continual(&stream, cfg)?;
    save_run(&dir, cfg, &stream, &run)?;
    print_stages(&run.record.stages);
    let total: f64 = run.timing.stage_seconds.iter().sum();
    println!("run saved to {} ({total:.1} s)", dir.display());
    Ok(())
}

fn eval(dir: &Path) -> prefixcl::Result<bool> {
    let run = load_run(dir)?;
    let (row, _) = run.evaluate_final()?;
    print_stages(std::slice::from_ref(&row));
    let recorded = RunRecord::read_summary(dir)?;
    let same = recorded.final_stage() == Some(&row);
    println!("matches recorded final stage: {}", if same { "yes" } else { "no" });
    Ok(same)
}

fn ablate(grid: Grid, seeds: &[u64], out: Option<PathBuf>, base: &RunConfig) -> prefixcl::Result<()> {
    let rows = run_grid(grid, base, seeds)?;
    let out = out.unwrap_or_else(|| artifacts_root().join(format!("ablate-{grid}.csv")));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    write_rows(&out, &rows)?;
    println!("variant            accuracy        tii");
    let variants: Vec<String> = grid.variants(base).into_iter().map(|(v, _)| v).collect();
    for v in &variants {
        let acc = column(&rows, v, |r| r.accuracy);
        let tii = column(&rows, v, |r| r.tii_accuracy);
        println!(
            "{v:<18} {:.4} ± {:.4} {:.4} ± {:.4}",
            prefixcl::bench::mean(&acc),
            std_dev(&acc),
            prefixcl::bench::mean(&tii),
            std_dev(&tii)
        );
    }
    if let [on, off] = variants.as_slice() {
        let metric: fn(&prefixcl::bench::AblationRow) -> f64 = if grid == Grid::TaskHead { |r| r.tii_accuracy } else { |r| r.accuracy };
        let c = PairedComparison::new(&column(&rows, on, metric), &column(&rows, off, metric));
        println!(
            "{on} vs {off}: {} wins, {} losses, {} ties, sign-test p(worse) = {:.4}",
            c.wins, c.losses, c.ties, c.p_worse
        );
    }
    println!("rows written to {}", out.display());
    Ok(())
}

fn trace(dir: &Path, stage: Option<usize>, errors: bool) -> prefixcl::Result<()> {
    let rows = read_traces(&dir.join(TRACES_FILE))?;
    let stage = stage.or_else(|| rows.iter().map(|r| r.stage).max());
    println!("stage,gold_task,index,gold_relation,routed_task,predicted_relation,oracle_relation,fast_path,votes");
    for r in rows.iter().filter(|r| Some(r.stage) == stage && (!errors || r.routed_task != r.gold_task)) {
        println!(
            "{},{},{},{},{},{},{},{},{}",
            r.stage, r.gold_task, r.index, r.gold_relation, r.routed_task, r.predicted_relation, r.oracle_relation, r.fast_path, r.votes
        );
    }
    Ok(())
}

fn usage_error(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { out, config } => match config.build() {
            Ok(c) => generate(&out, &c),
            Err(e) => return usage_error(e),
        },
        Command::Train { out, config } => match config.build() {
            Ok(c) => train(out, &c),
            Err(e) => return usage_error(e),
        },
        Command::Eval { run } => match eval(&run) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::Ablate { grid, seeds, out, config } => match config.build() {
            Ok(c) => ablate(grid, &seeds, out, &c),
            Err(e) => return usage_error(e),
        },
        Command::Trace { run, stage, errors } => trace(&run, stage, errors),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => usage_error(e),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
