//! Generate a synthetic periodic series, score its periodicity and build
//! the spatial and semantic graphs the encoder runs on.
//!
//!     cargo run --release --example synth_and_graphs -- /tmp/synth

use std::path::PathBuf;
use transllm::data_io::{load_series, periodicity_score, synth_generate, write_series, SynthConfig};
use transllm::graph::{build_grid_adjacency, build_semantic, GraphFile};

fn main() -> transllm::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out).map_err(|e| transllm::Error::io(&out, e))?;

    let cfg = SynthConfig {
        n_nodes: 12,
        length: 96 * 4,
        steps_per_day: 96,
        interval_minutes: 15,
        ..Default::default()
    };
    let ds = synth_generate(&cfg, 1)?;
    let csv = out.join("series.csv");
    write_series(&ds, &csv)?;
    let ds = load_series(&csv)?;
    println!("{} steps x {} nodes -> {}", ds.len(), ds.num_nodes(), csv.display());

    for n in 0..3 {
        println!("node {n}: periodicity {:.2}", periodicity_score(&ds.node_series(n, 0)));
    }

    let a_sp = build_grid_adjacency(3, 4);
    let a_se = build_semantic(&ds, 3)?;
    GraphFile::from_matrix(&a_sp).write(out.join("spatial.json"))?;
    GraphFile::from_matrix(&a_se).write(out.join("semantic.json"))?;
    let neighbours: Vec<usize> = (0..ds.num_nodes()).filter(|&j| a_se[[0, j]] > 0.0).collect();
    println!("node 0 semantic neighbours: {neighbours:?}");
    Ok(())
}
