//! Two-stage training on a small synthetic traffic series, compared with
//! repeating the last observation. Pass a path to keep the checkpoint.
//!
//!     cargo run --release --example train_forecast -- /tmp/forecast.ckpt

use std::time::Instant;
use transllm::data_io::{synth_generate, SynthConfig};
use transllm::graph::{build_grid_adjacency, build_semantic, AdjacencyPair};
use transllm::llm_bridge::LmConfig;
use transllm::prompt_router::{PromptPool, TaskKind};
use transllm::st_encoder::EncoderConfig;
use transllm::training::{
    evaluate_forecast, load_checkpoint, persistence_metrics, prepare_forecast, run_schedule, save_checkpoint, Model,
    ModelConfig, SplitConfig, TaskData, TrainConfig,
};

fn main() -> transllm::Result<()> {
    env_logger::init();
    let ds = synth_generate(
        &SynthConfig {
            n_nodes: 8,
            length: 96 * 6,
            steps_per_day: 96,
            interval_minutes: 15,
            ..Default::default()
        },
        0,
    )?;
    let pair = AdjacencyPair::new(build_grid_adjacency(2, 4), build_semantic(&ds.slice_steps(0, 400), 3)?)?;
    let splits = prepare_forecast(&ds, &pair, 12, 12, &SplitConfig { stride: 4, ..Default::default() })?;

    let cfg = ModelConfig {
        nodes: 8,
        encoder: EncoderConfig { d: 8, gat_heads: 2, ..Default::default() },
        lm: LmConfig { d_model: 8, layers: 2, mlp_hidden: 16 },
        head_hidden: 64,
        ..Default::default()
    };
    let mut model = Model::new(cfg, PromptPool::default_for(TaskKind::Forecast), 0)?;
    let train = TrainConfig {
        lr: 0.3,
        epochs_stage_a: 20,
        batch_size: 4,
        nodes_per_window: Some(4),
        ..Default::default()
    };
    let t0 = Instant::now();
    let log = run_schedule(&mut model, &TaskData::Forecast(splits.train.clone()), &train)?;
    println!("trained {:?} in {:.0?}", log.stages, t0.elapsed());
    for e in log.epochs.iter().step_by(5) {
        println!("  {:?} epoch {:>2}: loss {:.4} (task {:.4})", e.stage, e.epoch, e.loss, e.task_loss);
    }

    let (m, _) = evaluate_forecast(&model, &splits.test, 12)?;
    let base = persistence_metrics(&splits.test)?;
    println!("test MAE {:.3} RMSE {:.3}", m.mae, m.rmse);
    println!("last value repeated: MAE {:.3} RMSE {:.3}", base.mae, base.rmse);

    if let Some(path) = std::env::args().nth(1) {
        save_checkpoint(&model, &path, serde_json::json!({"example": "train_forecast"}))?;
        let (back, _) = load_checkpoint(&path)?;
        assert_eq!(back.store.hash_all(), model.store.hash_all());
        println!("checkpoint written to {path}");
    }
    Ok(())
}
