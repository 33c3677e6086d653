//! Minimal HTTP/1.1 stub of the `/v1/forward` endpoint, shared by the
//! integration tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;
use transllm::llm_bridge::{WireRequest, WireResponse, ST_START};

pub enum Reply {
    Json(u16, String),
    /// Sleep, then answer.
    Delay(Duration, String),
}

pub struct Stub {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

impl Stub {
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn read_request(stream: &mut TcpStream) -> Option<String> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).ok()?;
    String::from_utf8(body).ok()
}

fn write_response(stream: &mut TcpStream, status: u16, body: &str) {
    let text = format!(
        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(text.as_bytes());
    let _ = stream.flush();
}

/// Serves requests on a background thread. `handler` gets the 0-based
/// request number and the body.
pub fn spawn<F>(handler: F) -> Stub
where
    F: Fn(usize, &str) -> Reply + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let handler = Arc::new(handler);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (counter, handler) = (counter.clone(), handler.clone());
            // One thread per connection so a slow reply does not hold up retries.
            thread::spawn(move || {
                let Some(body) = read_request(&mut stream) else { return };
                let n = counter.fetch_add(1, Ordering::SeqCst);
                match handler(n, &body) {
                    Reply::Json(status, text) => write_response(&mut stream, status, &text),
                    Reply::Delay(d, text) => {
                        thread::sleep(d);
                        write_response(&mut stream, 200, &text);
                    }
                }
            });
        }
    });
    Stub { url, hits }
}

/// Expands tokens and injections into one row per position. Token rows
/// carry `[index, token length, 0, ...]`; injected rows are echoed.
pub fn echo_forward(req: &WireRequest, d_model: usize) -> WireResponse {
    let mut hidden = Vec::new();
    let mut st_indices = Vec::new();
    for (i, tok) in req.tokens.iter().enumerate() {
        if tok == ST_START {
            st_indices.push(hidden.len());
        }
        let mut row = vec![0.0; d_model];
        row[0] = hidden.len() as f64;
        if d_model > 1 {
            row[1] = tok.len() as f64;
        }
        hidden.push(row);
        for inj in req.injections.iter().filter(|j| j.after_token_index == i) {
            hidden.extend(inj.vectors.iter().cloned());
        }
    }
    WireResponse { hidden, st_indices }
}

pub fn echo_handler(d_model: usize) -> impl Fn(usize, &str) -> Reply + Send + Sync + 'static {
    move |_, body| match serde_json::from_str::<WireRequest>(body) {
        Ok(req) => Reply::Json(200, serde_json::to_string(&echo_forward(&req, d_model)).unwrap()),
        Err(e) => Reply::Json(400, serde_json::json!({"error": e.to_string()}).to_string()),
    }
}
