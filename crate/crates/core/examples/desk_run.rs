//! Runs a stream once and prints the stage table.
//!
//! Usage: `desk_run [seed] [config.json]`

use prefixcl::bench::{generate_stream, run_continual, RunConfig};

fn main() -> prefixcl::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg: RunConfig = match args.next() {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.with_seed(seed);
    let stream = generate_stream(&cfg.stream, cfg.seed)?;
    let out = run_continual(&stream, &cfg)?;
    println!("stage  acc    tii    oracle  loss     seconds");
    for ((s, l), secs) in out.record.stages.iter().zip(&out.record.train_loss).zip(&out.timing.stage_seconds) {
        println!("{:>5}  {:.3}  {:.3}  {:.3}   {:.4}  {:.2}", s.stage, s.accuracy, s.tii_accuracy, s.oracle_accuracy, l, secs);
    }
    Ok(())
}
