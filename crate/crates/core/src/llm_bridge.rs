//! Prompt tokenisation, embedding injection and language-model backends.
//!
//! A [`PromptProgram`] is text interleaved with injection markers. Each
//! marker expands to `<st_start>`, `N_p` patch positions carrying projected
//! spatiotemporal embeddings, and `<st_end>`. The hidden state at the
//! `<st_start>` of the prediction span is what the task heads consume.
//!
//! Two backends exist: a small causal transformer living on the autodiff
//! tape, and an inference-only HTTP client (see [`RemoteLm`]).

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Duration;

pub const VOCAB_SIZE: usize = 4096;
pub const ST_START: &str = "<st_start>";
pub const ST_PATCH: &str = "<st_patch>";
pub const ST_END: &str = "<st_end>";
pub const HIS_MARKER: &str = "<HIS_EMB>";
pub const PRE_MARKER: &str = "<PRE_EMB>";
pub const LM_URL_ENV: &str = "TRANSLLM_LM_URL";

/// Response text used as the language-modelling target during training.
pub const RESPONSE_TEMPLATE: &str = include_str!("../data/response_template.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpanKind {
    His,
    Pre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    Inject(SpanKind),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptProgram {
    pub segments: Vec<Segment>,
    /// Candidate index chosen for each slot.
    pub choices: Vec<usize>,
}

impl PromptProgram {
    /// Splits `text` on the injection markers.
    pub fn parse(text: &str) -> Self {
        let mut segments = Vec::new();
        let mut rest = text;
        loop {
            let next = [(HIS_MARKER, SpanKind::His), (PRE_MARKER, SpanKind::Pre)]
                .into_iter()
                .filter_map(|(m, k)| rest.find(m).map(|i| (i, m.len(), k)))
                .min_by_key(|&(i, _, _)| i);
            match next {
                Some((i, len, kind)) => {
                    if i > 0 {
                        segments.push(Segment::Text(rest[..i].to_string()));
                    }
                    segments.push(Segment::Inject(kind));
                    rest = &rest[i + len..];
                }
                None => {
                    if !rest.is_empty() {
                        segments.push(Segment::Text(rest.to_string()));
                    }
                    break;
                }
            }
        }
        Self {
            segments,
            choices: Vec::new(),
        }
    }

    pub fn count(&self, kind: SpanKind) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::Inject(k) if *k == kind))
            .count()
    }

    /// Text with markers left in place.
    pub fn render_template(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.as_str(),
                Segment::Inject(SpanKind::His) => HIS_MARKER,
                Segment::Inject(SpanKind::Pre) => PRE_MARKER,
            })
            .collect()
    }

    /// Text with every injection span written out as placeholder tokens.
    pub fn render_display(&self, n_patches: usize) -> String {
        let span = format!("{ST_START}{}{ST_END}", ST_PATCH.repeat(n_patches));
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.clone(),
                Segment::Inject(_) => span.clone(),
            })
            .collect()
    }
}

/// Splits on whitespace; every other non-alphanumeric character is its own
/// token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// FNV-1a 64-bit hash folded into the vocabulary.
pub fn token_id(token: &str) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % VOCAB_SIZE as u64) as usize
}

pub fn token_ids(text: &str) -> Vec<usize> {
    tokenize(text).iter().map(|t| token_id(t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Token(usize),
    Start(SpanKind),
    Patch(SpanKind, usize),
    End(SpanKind),
}

/// Flattened position list of a program plus its training target.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub positions: Vec<Position>,
    /// Wire tokens: every non-patch position in order.
    pub wire_tokens: Vec<String>,
    pub n_patches: usize,
    pub his_start: Option<usize>,
    pub pre_start: Option<usize>,
    /// Index of the first target token (equals the prompt length).
    pub target_start: usize,
    pub target_ids: Vec<usize>,
}

impl SequenceLayout {
    pub fn build(program: &PromptProgram, n_patches: usize, target: &str) -> Result<Self> {
        if n_patches == 0 {
            return Err(Error::InvalidArgument("N_p must be >= 1".into()));
        }
        let mut positions = Vec::new();
        let mut wire_tokens = Vec::new();
        let (mut his_start, mut pre_start) = (None, None);
        for seg in &program.segments {
            match seg {
                Segment::Text(t) => {
                    for tok in tokenize(t) {
                        positions.push(Position::Token(token_id(&tok)));
                        wire_tokens.push(tok);
                    }
                }
                Segment::Inject(kind) => {
                    let slot = match kind {
                        SpanKind::His => &mut his_start,
                        SpanKind::Pre => &mut pre_start,
                    };
                    if slot.is_some() {
                        return Err(Error::InvalidData(format!("duplicate {kind:?} injection span")));
                    }
                    *slot = Some(positions.len());
                    positions.push(Position::Start(*kind));
                    wire_tokens.push(ST_START.into());
                    positions.extend((0..n_patches).map(|i| Position::Patch(*kind, i)));
                    positions.push(Position::End(*kind));
                    wire_tokens.push(ST_END.into());
                }
            }
        }
        let target_start = positions.len();
        let target_tokens = tokenize(target);
        let target_ids: Vec<usize> = target_tokens.iter().map(|t| token_id(t)).collect();
        positions.extend(target_ids.iter().map(|&id| Position::Token(id)));
        wire_tokens.extend(target_tokens);
        Ok(Self {
            positions,
            wire_tokens,
            n_patches,
            his_start,
            pre_start,
            target_start,
            target_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `<st_start>` of the prediction span, falling back to the history span.
    pub fn st_start_index(&self) -> Result<usize> {
        self.pre_start
            .or(self.his_start)
            .ok_or_else(|| Error::InvalidData("program has no injection span".into()))
    }
}

/// `E′ = E·w + b`, mapping encoder channels onto the LM width.
#[derive(Debug, Clone)]
pub struct Projection {
    pub w: ParamId,
    pub b: ParamId,
}

impl Projection {
    pub fn init<R: Rng>(store: &mut ParamStore, c_in: usize, d_l: usize, rng: &mut R) -> Self {
        Self {
            w: store.insert_uniform("proj.w", (c_in, d_l), c_in, rng),
            b: store.insert_zeros("proj.b", (1, d_l)),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, e: Var) -> Result<Var> {
        let (_, c) = tape.shape(e);
        let (c_in, _) = store.get(self.w).dim();
        if c != c_in {
            return Err(Error::Shape(format!("projection expects {c_in} channels, got {c}")));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(e, w);
        Ok(tape.add_row(y, b))
    }
}

/// `N_p×T` matrix averaging contiguous groups of time steps.
pub fn patch_pool_matrix(t: usize, n_patches: usize) -> Result<Array2<f64>> {
    if n_patches == 0 || n_patches > t {
        return Err(Error::InvalidArgument(format!("N_p must lie in 1..={t}, got {n_patches}")));
    }
    let mut p = Array2::zeros((n_patches, t));
    for i in 0..n_patches {
        let (lo, hi) = (i * t / n_patches, (i + 1) * t / n_patches);
        for j in lo..hi {
            p[[i, j]] = 1.0 / (hi - lo) as f64;
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            mlp_hidden: 128,
        }
    }
}

#[derive(Debug, Clone)]
struct LmLayer {
    ln1: (ParamId, ParamId),
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-norm causal transformer with single-head attention, sinusoidal
/// positions and output logits tied to the token table.
#[derive(Debug, Clone)]
pub struct SurrogateLm {
    pub cfg: LmConfig,
    pub tok_emb: ParamId,
    pub st_start: ParamId,
    pub st_end: ParamId,
    layers: Vec<LmLayer>,
    ln_f: (ParamId, ParamId),
}

fn insert_norm(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.insert(format!("{name}.g"), Array2::ones((1, d))),
        store.insert_zeros(format!("{name}.b"), (1, d)),
    )
}

pub fn sinusoidal_positions(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(p, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = p as f64 * rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

impl SurrogateLm {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &LmConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden;
        let tok_emb = store.insert_uniform("lm.tok_emb", (VOCAB_SIZE, d), d, rng);
        let st_start = store.insert_uniform("special.st_start", (1, d), d, rng);
        let st_end = store.insert_uniform("special.st_end", (1, d), d, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("lm.{l}");
                LmLayer {
                    ln1: insert_norm(store, &format!("{p}.ln1"), d),
                    q: store.insert_uniform(format!("{p}.attn.q"), (d, d), d, rng),
                    k: store.insert_uniform(format!("{p}.attn.k"), (d, d), d, rng),
                    v: store.insert_uniform(format!("{p}.attn.v"), (d, d), d, rng),
                    o: store.insert_uniform(format!("{p}.attn.o"), (d, d), d, rng),
                    ln2: insert_norm(store, &format!("{p}.ln2"), d),
                    w1: store.insert_uniform(format!("{p}.mlp.w1"), (d, h), d, rng),
                    b1: store.insert_zeros(format!("{p}.mlp.b1"), (1, h)),
                    w2: store.insert_uniform(format!("{p}.mlp.w2"), (h, d), h, rng),
                    b2: store.insert_zeros(format!("{p}.mlp.b2"), (1, d)),
                }
            })
            .collect();
        let ln_f = insert_norm(store, "lm.ln_f", d);
        Self {
            cfg: cfg.clone(),
            tok_emb,
            st_start,
            st_end,
            layers,
            ln_f,
        }
    }

    /// Builds the `len×d_L` input embedding for the first `len` positions of
    /// `layout`. Patch rows come from `e_his` / `e_pre` (each `N_p×d_L`).
    pub fn embed<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        layout: &SequenceLayout,
        e_his: Option<Var>,
        e_pre: Option<Var>,
        len: usize,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        for (kind, e, present) in [
            (SpanKind::His, e_his, layout.his_start.is_some()),
            (SpanKind::Pre, e_pre, layout.pre_start.is_some()),
        ] {
            if let (Some(e), true) = (e, present) {
                if tape.shape(e) != (layout.n_patches, d) {
                    return Err(Error::Shape(format!(
                        "{kind:?} embedding is {:?}, expected {}x{d}",
                        tape.shape(e),
                        layout.n_patches
                    )));
                }
            } else if present {
                return Err(Error::Shape(format!("{kind:?} span present but no embedding supplied")));
            }
        }
        let positions = &layout.positions[..len.min(layout.len())];
        let mut pieces = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        let mut i = 0;
        while i < positions.len() {
            match positions[i] {
                Position::Token(id) => {
                    run.push(id);
                    i += 1;
                    continue;
                }
                _ => {
                    if !run.is_empty() {
                        let emb = tape.param(store, self.tok_emb);
                        pieces.push(tape.gather_rows(emb, &run));
                        run.clear();
                    }
                }
            }
            match positions[i] {
                Position::Start(_) => {
                    pieces.push(tape.param(store, self.st_start));
                    i += 1;
                }
                Position::End(_) => {
                    pieces.push(tape.param(store, self.st_end));
                    i += 1;
                }
                Position::Patch(kind, first) => {
                    let mut count = 0;
                    while i + count < positions.len() && matches!(positions[i + count], Position::Patch(k, _) if k == kind) {
                        count += 1;
                    }
                    let e = match kind {
                        SpanKind::His => e_his,
                        SpanKind::Pre => e_pre,
                    }
                    .expect("checked above");
                    let rows = if first == 0 && count == layout.n_patches {
                        e
                    } else {
                        tape.slice_rows(e, first, count)
                    };
                    pieces.push(rows);
                    i += count;
                }
                Position::Token(_) => unreachable!(),
            }
        }
        if !run.is_empty() {
            let emb = tape.param(store, self.tok_emb);
            pieces.push(tape.gather_rows(emb, &run));
        }
        if pieces.is_empty() {
            return Err(Error::InvalidData("empty sequence".into()));
        }
        let x = if pieces.len() == 1 { pieces[0] } else { tape.concat_rows(&pieces) };
        let s = tape.shape(x).0;
        let pos = tape.constant(sinusoidal_positions(s, d));
        Ok(tape.add(x, pos))
    }

    fn norm<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, (g, b): (ParamId, ParamId)) -> Var {
        let y = tape.layer_norm(x, 1e-5);
        let g = tape.param(store, g);
        let b = tape.param(store, b);
        let y = tape.mul_row(y, g);
        tape.add_row(y, b)
    }

    /// Hidden states aligned 1:1 with the rows of `x`.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Var {
        let s = tape.shape(x).0;
        let d = self.cfg.d_model;
        let mask: Vec<bool> = (0..s * s).map(|idx| idx % s <= idx / s).collect();
        let mut h = x;
        for layer in &self.layers {
            let z = Self::norm(tape, store, h, layer.ln1);
            let (q, k, v) = (
                tape.param(store, layer.q),
                tape.param(store, layer.k),
                tape.param(store, layer.v),
            );
            let q = tape.matmul(z, q);
            let k = tape.matmul(z, k);
            let v = tape.matmul(z, v);
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
            let att = tape.masked_softmax(scores, &mask);
            let ctx = tape.matmul(att, v);
            let o = tape.param(store, layer.o);
            let o = tape.matmul(ctx, o);
            h = tape.add(h, o);
            let z = Self::norm(tape, store, h, layer.ln2);
            let (w1, b1, w2, b2) = (
                tape.param(store, layer.w1),
                tape.param(store, layer.b1),
                tape.param(store, layer.w2),
                tape.param(store, layer.b2),
            );
            let m = tape.matmul(z, w1);
            let m = tape.add_row(m, b1);
            let m = tape.relu(m);
            let m = tape.matmul(m, w2);
            let m = tape.add_row(m, b2);
            h = tape.add(h, m);
        }
        Self::norm(tape, store, h, self.ln_f)
    }

    /// Mean next-token cross-entropy over the layout's target positions.
    /// Returns `None` when there is no target.
    pub fn cross_entropy<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        hidden: Var,
        layout: &SequenceLayout,
    ) -> Result<Option<Var>> {
        let n = layout.target_ids.len();
        if n == 0 {
            log::warn!("empty language-model target, cross-entropy taken as 0");
            return Ok(None);
        }
        if layout.target_start == 0 {
            return Err(Error::InvalidData("target without a prompt to condition on".into()));
        }
        if tape.shape(hidden).0 < layout.target_start + n - 1 {
            return Err(Error::Shape("hidden states do not cover the target".into()));
        }
        let h = tape.slice_rows(hidden, layout.target_start - 1, n);
        let emb = tape.param(store, self.tok_emb);
        let logits = tape.matmul_nt(h, emb);
        let lp = tape.log_softmax(logits);
        let picked = tape.pick(lp, &layout.target_ids);
        let m = tape.mean(picked);
        Ok(Some(tape.scale(m, -1.0)))
    }
}

/// Materialised request/response of one LM pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExchange {
    pub input_embeddings: Array2<f64>,
    pub output_hidden: Array2<f64>,
    pub st_start_index: Option<usize>,
    pub token_ids: Vec<Option<usize>>,
    pub target_ids: Vec<usize>,
}

/// Row `st_start_index` of the hidden states.
pub fn extract_pre_state(ex: &LmExchange) -> Result<Vec<f64>> {
    let idx = ex
        .st_start_index
        .ok_or_else(|| Error::InvalidData("st_start index is unset".into()))?;
    if idx >= ex.output_hidden.nrows() {
        return Err(Error::Shape(format!("st_start index {idx} beyond {} hidden rows", ex.output_hidden.nrows())));
    }
    Ok(ex.output_hidden.row(idx).to_vec())
}

/// Runs the surrogate on materialised embeddings and packages the result.
pub fn surrogate_exchange(
    lm: &SurrogateLm,
    store: &ParamStore,
    layout: &SequenceLayout,
    e_his: Option<&Array2<f64>>,
    e_pre: Option<&Array2<f64>>,
) -> Result<LmExchange> {
    let mut tape = Tape::new();
    let his = e_his.map(|e| tape.constant(e.clone()));
    let pre = e_pre.map(|e| tape.constant(e.clone()));
    let x = lm.embed(&mut tape, store, layout, his, pre, layout.len())?;
    let h = lm.forward(&mut tape, store, x);
    Ok(LmExchange {
        input_embeddings: tape.value(x).clone(),
        output_hidden: tape.value(h).clone(),
        st_start_index: layout.st_start_index().ok(),
        token_ids: layout
            .positions
            .iter()
            .map(|p| match p {
                Position::Token(id) => Some(*id),
                _ => None,
            })
            .collect(),
        target_ids: layout.target_ids.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireInjection {
    pub after_token_index: usize,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireRequest {
    pub tokens: Vec<String>,
    pub injections: Vec<WireInjection>,
    #[serde(rename = "return")]
    pub return_kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireResponse {
    pub hidden: Vec<Vec<f64>>,
    pub st_indices: Vec<usize>,
}

/// Builds the wire request for `layout`, truncated before the target.
pub fn wire_request(
    layout: &SequenceLayout,
    e_his: Option<&Array2<f64>>,
    e_pre: Option<&Array2<f64>>,
) -> Result<WireRequest> {
    let mut tokens = Vec::new();
    let mut injections = Vec::new();
    for pos in &layout.positions[..layout.target_start] {
        match pos {
            Position::Token(_) | Position::End(_) => {
                tokens.push(layout.wire_tokens[tokens.len()].clone());
            }
            Position::Start(kind) => {
                let e = match kind {
                    SpanKind::His => e_his,
                    SpanKind::Pre => e_pre,
                }
                .ok_or_else(|| Error::Shape(format!("{kind:?} span present but no embedding supplied")))?;
                if e.nrows() != layout.n_patches {
                    return Err(Error::Shape(format!("{kind:?} embedding has {} rows, expected {}", e.nrows(), layout.n_patches)));
                }
                injections.push(WireInjection {
                    after_token_index: tokens.len(),
                    vectors: e.rows().into_iter().map(|r| r.to_vec()).collect(),
                });
                tokens.push(layout.wire_tokens[tokens.len()].clone());
            }
            Position::Patch(..) => {}
        }
    }
    Ok(WireRequest {
        tokens,
        injections,
        return_kind: "hidden_states".into(),
    })
}

/// Inference-only client for a remote model speaking the `/v1/forward`
/// protocol. Transport failures and timeouts are retried.
#[derive(Debug, Clone)]
pub struct RemoteLm {
    pub base_url: String,
    pub timeout: Duration,
    pub max_retries: usize,
    pub d_model: usize,
}

impl RemoteLm {
    pub fn new(base_url: impl Into<String>, d_model: usize) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            d_model,
        }
    }

    pub fn from_env(d_model: usize) -> Option<Self> {
        std::env::var(LM_URL_ENV)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .map(|u| Self::new(u, d_model))
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/forward", self.base_url.trim_end_matches('/'))
    }

    /// Sends one request. Returns the hidden states and the `<st_start>`
    /// indices reported by the server.
    pub fn forward(&self, req: &WireRequest) -> Result<WireResponse> {
        let expected_len = req.tokens.len() + req.injections.iter().map(|i| i.vectors.len()).sum::<usize>();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = serde_json::to_string(req)?;
        let mut attempt: usize = 0;
        loop {
            let outcome = agent
                .post(&self.endpoint())
                .header("content-type", "application/json")
                .send(body.as_str());
            let retryable = match outcome {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string();
                    match text {
                        Ok(text) if status == 200 => return self.parse_response(&text, expected_len),
                        Ok(text) => {
                            let msg = serde_json::from_str::<serde_json::Value>(&text)
                                .ok()
                                .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(String::from))
                                .unwrap_or(text);
                            let err = Error::RemoteStatus {
                                status,
                                retries: attempt,
                                msg,
                            };
                            if status < 500 {
                                return Err(err);
                            }
                            err
                        }
                        Err(e) => classify(e, attempt),
                    }
                }
                Err(e) => classify(e, attempt),
            };
            if attempt >= self.max_retries {
                return Err(retryable);
            }
            log::warn!("remote LM attempt {} failed: {retryable}", attempt + 1);
            attempt += 1;
        }
    }

    fn parse_response(&self, text: &str, expected_len: usize) -> Result<WireResponse> {
        let resp: WireResponse =
            serde_json::from_str(text).map_err(|e| Error::RemoteMalformed(format!("response body: {e}")))?;
        if resp.hidden.len() != expected_len {
            return Err(Error::RemoteMalformed(format!(
                "{} hidden rows for {expected_len} positions",
                resp.hidden.len()
            )));
        }
        if let Some(r) = resp.hidden.iter().find(|r| r.len() != self.d_model) {
            return Err(Error::RemoteMalformed(format!("hidden row of width {}, expected {}", r.len(), self.d_model)));
        }
        if resp.hidden.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::RemoteMalformed("non-finite hidden value".into()));
        }
        if resp.st_indices.iter().any(|&i| i >= expected_len) {
            return Err(Error::RemoteMalformed("st index out of range".into()));
        }
        Ok(resp)
    }

    /// Hidden state at the extraction `<st_start>` of `layout`.
    pub fn pre_state(
        &self,
        layout: &SequenceLayout,
        e_his: Option<&Array2<f64>>,
        e_pre: Option<&Array2<f64>>,
    ) -> Result<Vec<f64>> {
        let req = wire_request(layout, e_his, e_pre)?;
        let resp = self.forward(&req)?;
        let idx = layout.st_start_index()?;
        resp.hidden
            .get(idx)
            .cloned()
            .ok_or_else(|| Error::RemoteMalformed(format!("no hidden row at st_start index {idx}")))
    }
}

fn classify(e: ureq::Error, retries: usize) -> Error {
    match e {
        ureq::Error::Timeout(t) => Error::RemoteTimeout {
            retries,
            msg: t.to_string(),
        },
        other => Error::RemoteTransport {
            retries,
            msg: other.to_string(),
        },
    }
}

/// Which model answers LM calls.
#[derive(Debug, Clone)]
pub enum Backend {
    Surrogate,
    Remote(RemoteLm),
}

impl Backend {
    /// Remote when `TRANSLLM_LM_URL` is set, surrogate otherwise.
    pub fn from_env(d_model: usize) -> Self {
        RemoteLm::from_env(d_model).map_or(Backend::Surrogate, Backend::Remote)
    }
}
