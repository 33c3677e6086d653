//! Lay out a prompt with injected spatiotemporal spans, run the surrogate
//! language model and pull out the state at `<st_start>`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transllm::llm_bridge::{
    extract_pre_state, patch_pool_matrix, surrogate_exchange, wire_request, LmConfig, PromptProgram, SequenceLayout,
    SurrogateLm,
};
use transllm::params::ParamStore;

fn main() -> transllm::Result<()> {
    let program = PromptProgram::parse("Recent flow <HIS_EMB> and the next hour <PRE_EMB> looks like");
    let n_p = 4;
    let layout = SequenceLayout::build(&program, n_p, "the flow will rise")?;
    println!("{}", program.render_display(n_p));
    println!("{} positions, target starts at {}", layout.len(), layout.target_start);

    // Twelve projected steps averaged into four patches.
    let steps = Array2::from_shape_fn((12, 8), |(t, c)| (t as f64 * 0.1 + c as f64).sin());
    let pre = patch_pool_matrix(12, n_p)?.dot(&steps);
    let his = pre.mapv(|v| v * 0.5);

    let mut store = ParamStore::new();
    let lm = SurrogateLm::init(&mut store, &LmConfig { d_model: 8, layers: 2, mlp_hidden: 16 }, &mut ChaCha8Rng::seed_from_u64(1));
    let ex = surrogate_exchange(&lm, &store, &layout, Some(&his), Some(&pre))?;
    println!("hidden states {:?}", ex.output_hidden.dim());
    let h = extract_pre_state(&ex)?;
    println!("state at <st_start> (index {:?}): {:.3?}", ex.st_start_index, h);

    let req = wire_request(&layout, Some(&his), Some(&pre))?;
    println!("wire request: {} tokens, {} injections", req.tokens.len(), req.injections.len());
    Ok(())
}
