//! Runs a JSON sweep through the library API and prints the report.
//!
//! ```bash
//! cargo run --release -p fedskew --example paradox_sweep
//! cargo run --release -p fedskew --example paradox_sweep -- crates/core/configs/desk_fedavgw.json /tmp/fedavgw
//! ```

use std::path::PathBuf;

use fedskew::fedcli::{run_experiments, ExperimentConfig, RunOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/desk_paradox.json"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fedskew-paradox"));
    let cfg = ExperimentConfig::load(&config)?;
    let summaries = run_experiments(
        &cfg,
        &RunOptions {
            out_dir: out.clone(),
            jobs: 1,
            verbose: true,
        },
    )?;
    for s in summaries.iter().filter(|s| !s.completed()) {
        eprintln!("run {} failed: {}", s.run_id, s.error.as_deref().unwrap_or("?"));
    }
    print!("{}", std::fs::read_to_string(out.join("report.md"))?);
    Ok(())
}
