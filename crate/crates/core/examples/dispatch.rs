//! Taxi repositioning on the 3×3 block: baselines against a trained policy.

use transllm::dispatch_sim::{baseline_policy, evaluate_policy, synth_scenarios, BaselineKind, Concentration, ScenarioConfig};
use transllm::llm_bridge::LmConfig;
use transllm::prompt_router::{PromptPool, TaskKind};
use transllm::st_encoder::EncoderConfig;
use transllm::training::{evaluate_dispatch, prepare_dispatch, run_schedule, Model, ModelConfig, TaskData, TrainConfig};

fn main() -> transllm::Result<()> {
    env_logger::init();
    let sc = ScenarioConfig {
        count: 400,
        concentration: Concentration::Cell(2),
        ..Default::default()
    };
    let train = prepare_dispatch(synth_scenarios(&sc, 1)?, None, None, sc.interval_minutes)?;
    let test = prepare_dispatch(
        synth_scenarios(&sc, 2)?,
        Some(train.stats.clone()),
        Some(train.pair.clone()),
        sc.interval_minutes,
    )?;

    for kind in [BaselineKind::StayPut, BaselineKind::Uniform, BaselineKind::GreedyDemand] {
        let m = evaluate_policy(|s| baseline_policy(kind, s), &test.scenarios)?;
        println!("{kind:?}: MMR {:.3} MDD {:.2} km W-Dist {:.3}", m.mmr, m.mdd, m.w_dist);
    }

    let cfg = ModelConfig {
        task: TaskKind::Dispatch,
        nodes: 9,
        in_features: 2,
        history_len: sc.history_len,
        horizon: 1,
        n_patches: 3,
        encoder: EncoderConfig { d: 8, gat_heads: 2, ..Default::default() },
        lm: LmConfig { d_model: 8, layers: 2, mlp_hidden: 16 },
        head_hidden: 64,
        router_hidden: 64,
    };
    let mut model = Model::new(cfg, PromptPool::default_for(TaskKind::Dispatch), 0)?;
    let tc = TrainConfig {
        task: TaskKind::Dispatch,
        lr: 0.1,
        epochs_stage_a: 3,
        batch_size: 16,
        router_lr: 0.01,
        ..Default::default()
    };
    run_schedule(&mut model, &TaskData::Dispatch(train), &tc)?;
    let (m, _) = evaluate_dispatch(&model, &test, 3)?;
    println!("trained: MMR {:.3} MDD {:.2} km W-Dist {:.3}", m.mmr, m.mdd, m.w_dist);

    let (pi, d) = model.dispatch_policy(&test, &test.scenarios[0], 3)?;
    println!("first scenario, prompt {:?}:", d.actions);
    for row in pi.chunks(3) {
        println!("  {:.2?}", row);
    }
    Ok(())
}
