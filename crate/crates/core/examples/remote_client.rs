//! Talk to a served language model over the `/v1/forward` protocol.
//!
//!     TRANSLLM_LM_URL=http://127.0.0.1:8080 cargo run --example remote_client -- 4096
//!
//! The argument is the server's hidden width. Without the variable the
//! request body is printed instead.

use ndarray::Array2;
use transllm::llm_bridge::{wire_request, PromptProgram, RemoteLm, SequenceLayout, LM_URL_ENV};

fn main() -> transllm::Result<()> {
    let d: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let program = PromptProgram::parse("Traffic so far <HIS_EMB> and the forecast span <PRE_EMB>");
    let layout = SequenceLayout::build(&program, 3, "")?;
    let his = Array2::from_elem((3, d), 0.1);
    let pre = Array2::from_elem((3, d), -0.1);

    let Some(client) = RemoteLm::from_env(d) else {
        let req = wire_request(&layout, Some(&his), Some(&pre))?;
        println!("{LM_URL_ENV} is not set; this is what would be sent:");
        println!("{}", serde_json::to_string_pretty(&req)?);
        return Ok(());
    };
    match client.pre_state(&layout, Some(&his), Some(&pre)) {
        Ok(h) => println!("state at <st_start>: {} values, first {:?}", h.len(), &h[..h.len().min(4)]),
        Err(e) => println!("remote call failed ({}): {e}", e.kind()),
    }
    Ok(())
}
