//! The command-line pipeline driven from code: synth, train, eval and
//! route-stats into one run directory.
//!
//!     cargo run --release --example run_directory -- /tmp/transllm-run

use std::path::PathBuf;
use transllm::cli::{run, Command, RunConfig, RunDir};

fn main() -> transllm::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("transllm-run"));
    let cfg = RunConfig::from_json(&format!(
        r#"{{
            "out_dir": {out:?},
            "seed": 11,
            "n_patches": 4,
            "synth": {{"n_nodes": 6, "length": 288, "steps_per_day": 96, "interval_minutes": 15}},
            "graph": {{"semantic_degree": 2}},
            "split": {{"stride": 6}},
            "model": {{
                "encoder": {{"d": 8, "gat_heads": 2}},
                "lm": {{"d_model": 8, "mlp_hidden": 16}},
                "head_hidden": 32
            }},
            "train": {{"lr": 0.3, "epochs_stage_a": 4, "batch_size": 4}}
        }}"#
    ))?;
    for command in [Command::Synth, Command::BuildGraph, Command::Train, Command::Eval, Command::RouteStats] {
        let res = run(command, cfg.clone())?;
        println!("{:<12} {}", res.command, res.summary);
    }
    let dir = RunDir::new(&out);
    println!("\nrun directory {}", dir.root.display());
    for p in [dir.config(), dir.checkpoint(), dir.metrics(), dir.routing_stats(), dir.manifest()] {
        println!("  {}", p.display());
    }
    Ok(())
}
