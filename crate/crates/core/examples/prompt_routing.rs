//! Compose prompts from a candidate pool and train the router on a toy
//! bandit where one candidate per slot pays off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use transllm::params::ParamStore;
use transllm::prompt_router::{compose_prompt, routing_stats, PromptPool, RouteMode, Router, TaskKind};

fn main() -> transllm::Result<()> {
    let pool = PromptPool::default_for(TaskKind::Forecast);
    println!("{} slots, {} combinations", pool.slots.len(), pool.num_combinations());

    let fields = BTreeMap::from([
        ("HIST".to_string(), "21.0, 22.5, 24.1".to_string()),
        ("TIME_RANGE".to_string(), "2021-11-01 08:00 to 2021-11-01 11:00".to_string()),
    ]);
    let program = compose_prompt(&pool, &[0, 1, 2, 3], &fields)?;
    println!("\n{}\n", program.render_display(3));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let router = Router::init(&mut store, 8, &pool.slot_sizes(), 64, &mut rng);
    let target = [2usize, 0, 3, 1];
    for step in 0..1500 {
        let batch: Vec<_> = (0..8)
            .map(|_| {
                let ctx: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d = router.route(&store, &ctx, RouteMode::Sample, &mut rng).unwrap();
                let hits = d.actions.iter().zip(&target).filter(|(a, t)| a == t).count();
                (d, hits as f64 / 4.0)
            })
            .collect();
        let upd = router.update(&mut store, &batch, 0.05)?;
        if step % 500 == 0 {
            println!("step {step}: {upd:?}");
        }
    }

    let decisions: Vec<_> = (0..100)
        .map(|_| {
            let ctx: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            router.route(&store, &ctx, RouteMode::Greedy, &mut rng).unwrap()
        })
        .collect();
    let stats = routing_stats(&pool, &decisions);
    for (name, freq) in stats.slot_names.iter().zip(stats.frequencies()) {
        println!("{name:>12}: {freq:?}");
    }
    println!("rewarded candidates: {target:?}");
    Ok(())
}
