//! Run the dual-branch encoder on one window and inspect what comes out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transllm::data_io::{make_windows, synth_generate, zscore_apply, zscore_fit, SynthConfig};
use transllm::graph::{build_grid_adjacency, build_semantic, AdjacencyPair};
use transllm::params::ParamStore;
use transllm::st_encoder::{build_input, EncoderConfig, StEncoder};

fn main() -> transllm::Result<()> {
    let ds = synth_generate(&SynthConfig { n_nodes: 6, length: 200, ..Default::default() }, 3)?;
    let stats = zscore_fit(&ds, 0..140)?;
    let windows = make_windows(&ds, 12, 12, 12)?;
    let pair = AdjacencyPair::new(build_grid_adjacency(2, 3), build_semantic(&ds, 2)?)?;

    let cfg = EncoderConfig { d: 16, ..Default::default() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = StEncoder::init(&mut store, &cfg, 1 + 8, 6, 12, 12, &mut rng)?;
    println!("{} encoder parameters", store.num_scalars());

    let w = &windows[0];
    let history = zscore_apply(&w.history, &stats);
    let out = enc.encode(&store, &build_input(&history, &w.clock), &pair)?;
    println!("spatial branch  {:?}", out.h_sp.dim());
    println!("semantic branch {:?}", out.h_se.dim());
    println!("fused H_f       {:?}", out.h_f.dim());
    println!("history states  {:?}", out.h_hist.dim());
    Ok(())
}
