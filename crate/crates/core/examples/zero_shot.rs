//! Train on one synthetic city, then forecast a second one with more
//! sensors and different daily phases without touching the weights.

use transllm::data_io::{synth_generate, SynthConfig};
use transllm::graph::{build_grid_adjacency, build_semantic, AdjacencyPair};
use transllm::llm_bridge::LmConfig;
use transllm::prompt_router::{PromptPool, TaskKind};
use transllm::st_encoder::EncoderConfig;
use transllm::training::{
    evaluate_forecast, persistence_metrics, prepare_forecast, prepare_forecast_eval, run_schedule, Model, ModelConfig,
    SplitConfig, TaskData, TrainConfig,
};

fn city(nodes: usize, phase_shift: f64, seed: u64) -> transllm::Result<transllm::data_io::SeriesDataset> {
    synth_generate(
        &SynthConfig {
            n_nodes: nodes,
            length: 96 * 4,
            steps_per_day: 96,
            interval_minutes: 15,
            phases: Some((0..nodes).map(|n| phase_shift + 0.7 * n as f64).collect()),
            ..Default::default()
        },
        seed,
    )
}

fn main() -> transllm::Result<()> {
    let a = city(6, 0.0, 1)?;
    let pair_a = AdjacencyPair::new(build_grid_adjacency(2, 3), build_semantic(&a, 2)?)?;
    let splits = prepare_forecast(&a, &pair_a, 12, 12, &SplitConfig { stride: 6, ..Default::default() })?;
    let cfg = ModelConfig {
        nodes: 6,
        encoder: EncoderConfig { d: 8, gat_heads: 2, ..Default::default() },
        lm: LmConfig { d_model: 8, layers: 2, mlp_hidden: 16 },
        head_hidden: 32,
        ..Default::default()
    };
    let mut model = Model::new(cfg, PromptPool::default_for(TaskKind::Forecast), 0)?;
    let tc = TrainConfig { lr: 0.3, epochs_stage_a: 10, batch_size: 4, ..Default::default() };
    run_schedule(&mut model, &TaskData::Forecast(splits.train), &tc)?;
    let before = model.store.hash_all();

    let b = city(9, 2.0, 2)?;
    let pair_b = AdjacencyPair::new(build_grid_adjacency(3, 3), build_semantic(&b, 2)?)?;
    let data_b = prepare_forecast_eval(&b, &pair_b, 12, 12, 6)?;
    println!("domain B: {} nodes, {} windows", data_b.nodes(), data_b.windows.len());
    println!("last value repeated: MAE {:.3}", persistence_metrics(&data_b)?.mae);
    for n_p in [1, 3, 6, 12] {
        let (m, _) = evaluate_forecast(&model, &data_b, n_p)?;
        println!("N_p {n_p:>2}: MAE {:.3} RMSE {:.3}", m.mae, m.rmse);
    }
    assert_eq!(model.store.hash_all(), before, "weights must not move");
    Ok(())
}
