//! Slotted prompt pool with one actor–critic pair per slot.
//!
//! Each slot's actor maps a pooled node representation to a softmax over
//! that slot's candidate sentences; the critic predicts the shared reward.
//! Updates use the detached advantage `R − V_k`.

use crate::error::{Error, Result};
use crate::llm_bridge::{PromptProgram, HIS_MARKER, PRE_MARKER};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::st_encoder::EncoderOutput;
use crate::tape::Tape;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const DEFAULT_FORECAST_POOL: &str = include_str!("../data/forecast_pool.json");
pub const DEFAULT_DISPATCH_POOL: &str = include_str!("../data/dispatch_pool.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Forecast,
    Dispatch,
}

impl TaskKind {
    /// Required `(HIS, PRE)` marker counts of a composed prompt.
    pub fn marker_counts(self) -> (usize, usize) {
        match self {
            TaskKind::Forecast => (1, 1),
            TaskKind::Dispatch => (1, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSlot {
    pub name: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPool {
    pub slots: Vec<PromptSlot>,
}

fn marker_counts(text: &str) -> (usize, usize) {
    (text.matches(HIS_MARKER).count(), text.matches(PRE_MARKER).count())
}

impl PromptPool {
    pub fn from_json(text: &str, task: TaskKind) -> Result<Self> {
        let pool: PromptPool = serde_json::from_str(text)?;
        pool.validate(task)?;
        Ok(pool)
    }

    pub fn load(path: impl AsRef<Path>, task: TaskKind) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, task)
    }

    pub fn default_for(task: TaskKind) -> Self {
        let text = match task {
            TaskKind::Forecast => DEFAULT_FORECAST_POOL,
            TaskKind::Dispatch => DEFAULT_DISPATCH_POOL,
        };
        Self::from_json(text, task).expect("bundled pool is valid")
    }

    /// Every slot is non-empty, candidates within a slot agree on their
    /// marker counts, and every composition carries exactly the markers the
    /// task requires.
    pub fn validate(&self, task: TaskKind) -> Result<()> {
        if self.slots.is_empty() {
            return Err(Error::InvalidData("prompt pool has no slots".into()));
        }
        let mut total = (0, 0);
        for slot in &self.slots {
            let first = slot
                .candidates
                .first()
                .ok_or_else(|| Error::InvalidData(format!("slot '{}' has no candidates", slot.name)))?;
            let counts = marker_counts(first);
            if let Some(c) = slot.candidates.iter().find(|c| marker_counts(c) != counts) {
                return Err(Error::InvalidData(format!(
                    "slot '{}' candidates disagree on injection markers: {c:?}",
                    slot.name
                )));
            }
            total = (total.0 + counts.0, total.1 + counts.1);
        }
        let want = task.marker_counts();
        if total != want {
            return Err(Error::InvalidData(format!(
                "composed prompts would carry {} HIS and {} PRE markers, {task:?} needs {} and {}",
                total.0, total.1, want.0, want.1
            )));
        }
        Ok(())
    }

    pub fn slot_sizes(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.candidates.len()).collect()
    }

    pub fn num_combinations(&self) -> usize {
        self.slot_sizes().iter().product()
    }

    /// Composition with candidate 0 in every slot, placeholders unfilled.
    pub fn base_template(&self) -> String {
        self.slots
            .iter()
            .map(|s| s.candidates[0].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn fill_placeholders(text: &str, slot: &str, fields: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::UnresolvedPlaceholder {
                slot: slot.into(),
                placeholder: rest[open..].into(),
            })?;
        let key = &rest[open + 1..close];
        let value = fields.get(key).ok_or_else(|| Error::UnresolvedPlaceholder {
            slot: slot.into(),
            placeholder: format!("{{{key}}}"),
        })?;
        out.push_str(&rest[..open]);
        out.push_str(value);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Joins the chosen candidate of each slot, substituting `{FIELD}`
/// placeholders; injection markers stay as spans of the program.
pub fn compose_prompt(pool: &PromptPool, actions: &[usize], fields: &BTreeMap<String, String>) -> Result<PromptProgram> {
    if actions.len() != pool.slots.len() {
        return Err(Error::InvalidArgument(format!(
            "{} actions for {} slots",
            actions.len(),
            pool.slots.len()
        )));
    }
    let mut parts = Vec::with_capacity(actions.len());
    for (slot, &a) in pool.slots.iter().zip(actions) {
        let text = slot.candidates.get(a).ok_or_else(|| {
            Error::InvalidArgument(format!("action {a} out of range for slot '{}'", slot.name))
        })?;
        parts.push(fill_placeholders(text, &slot.name, fields)?);
    }
    let mut program = PromptProgram::parse(&parts.join(" "));
    program.choices = actions.to_vec();
    Ok(program)
}

/// Mean over the time axis of one node's fused representation.
pub fn pool_router_input(out: &EncoderOutput, node: usize) -> Result<Vec<f64>> {
    let (t, n, _) = out.h_f.dim();
    if node >= n {
        return Err(Error::InvalidArgument(format!("node {node} out of range for {n} nodes")));
    }
    if t == 0 {
        return Err(Error::Shape("empty time axis".into()));
    }
    Ok(out
        .h_f
        .index_axis(Axis(1), node)
        .mean_axis(Axis(0))
        .expect("non-empty")
        .to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub actions: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub greedy: bool,
    /// Router input the decision was made on.
    pub ctx: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, hidden: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            w1: store.insert_uniform(format!("{name}.w1"), (c_in, hidden), c_in, rng),
            b1: store.insert_zeros(format!("{name}.b1"), (1, hidden)),
            w2: store.insert_uniform(format!("{name}.w2"), (hidden, c_out), hidden, rng),
            b2: store.insert_zeros(format!("{name}.b2"), (1, c_out)),
        }
    }

    fn eval(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let h = (x.dot(store.get(self.w1)) + store.get(self.b1)).mapv(|v| v.max(0.0));
        h.dot(store.get(self.w2)) + store.get(self.b2)
    }

    fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: crate::tape::Var) -> crate::tape::Var {
        let (w1, b1, w2, b2) = (
            tape.param(store, self.w1),
            tape.param(store, self.b1),
            tape.param(store, self.w2),
            tape.param(store, self.b2),
        );
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let y = tape.matmul(h, w2);
        tape.add_row(y, b2)
    }
}

#[derive(Debug, Clone)]
struct SlotNets {
    actor: Mlp,
    critic: Mlp,
}

/// Per-slot actor `2D→hidden→|candidates|` and critic `2D→hidden→1`,
/// registered under `router.<slot>.*`.
#[derive(Debug, Clone)]
pub struct Router {
    slots: Vec<SlotNets>,
    pub ctx_dim: usize,
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

impl Router {
    pub fn init<R: Rng>(store: &mut ParamStore, ctx_dim: usize, slot_sizes: &[usize], hidden: usize, rng: &mut R) -> Self {
        let slots = slot_sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| SlotNets {
                actor: Mlp::init(store, &format!("router.{k}.actor"), ctx_dim, hidden, n, rng),
                critic: Mlp::init(store, &format!("router.{k}.critic"), ctx_dim, hidden, 1, rng),
            })
            .collect();
        Self { slots, ctx_dim }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Ids of the final actor bias of each slot.
    pub fn actor_output_bias(&self, slot: usize) -> ParamId {
        self.slots[slot].actor.b2
    }

    /// Per-slot action probabilities.
    pub fn probabilities(&self, store: &ParamStore, ctx: &[f64]) -> Vec<Vec<f64>> {
        let x = Array2::from_shape_vec((1, ctx.len()), ctx.to_vec()).expect("row");
        self.slots
            .iter()
            .map(|s| {
                let logits = s.actor.eval(store, &x);
                log_softmax_row(logits.as_slice().expect("contiguous"))
                    .into_iter()
                    .map(f64::exp)
                    .collect()
            })
            .collect()
    }

    pub fn route<R: Rng>(&self, store: &ParamStore, ctx: &[f64], mode: RouteMode, rng: &mut R) -> Result<RouterDecision> {
        if ctx.len() != self.ctx_dim {
            return Err(Error::Shape(format!("router input of length {}, expected {}", ctx.len(), self.ctx_dim)));
        }
        let x = Array2::from_shape_vec((1, ctx.len()), ctx.to_vec()).expect("row");
        let mut d = RouterDecision {
            actions: Vec::with_capacity(self.slots.len()),
            logprobs: Vec::with_capacity(self.slots.len()),
            values: Vec::with_capacity(self.slots.len()),
            greedy: mode == RouteMode::Greedy,
            ctx: ctx.to_vec(),
        };
        for s in &self.slots {
            let logits = s.actor.eval(store, &x);
            let lp = log_softmax_row(logits.as_slice().expect("contiguous"));
            let a = match mode {
                RouteMode::Greedy => {
                    let mut best = 0;
                    for (i, &v) in lp.iter().enumerate() {
                        if v > lp[best] {
                            best = i;
                        }
                    }
                    best
                }
                RouteMode::Sample => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = lp.len() - 1;
                    for (i, &v) in lp.iter().enumerate() {
                        acc += v.exp();
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
            };
            d.actions.push(a);
            d.logprobs.push(lp[a]);
            d.values.push(s.critic.eval(store, &x)[[0, 0]]);
        }
        Ok(d)
    }

    /// One gradient-descent step on `Σ_k [mean L_a^(k) + mean L_c^(k)]`.
    /// Slots own disjoint parameters, so this is one step per slot.
    pub fn update(&self, store: &mut ParamStore, batch: &[(RouterDecision, f64)], lr: f64) -> Result<RouterUpdate> {
        let (grads, stats) = self.gradients(store, batch)?;
        store.descend(&grads, lr);
        Ok(stats)
    }

    pub fn gradients(&self, store: &ParamStore, batch: &[(RouterDecision, f64)]) -> Result<(GradStore, RouterUpdate)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty router batch".into()));
        }
        if let Some((d, _)) = batch.iter().find(|(d, _)| d.greedy) {
            return Err(Error::InvalidArgument(format!(
                "greedy decision {:?} has no sampling log-probabilities",
                d.actions
            )));
        }
        if let Some((_, r)) = batch.iter().find(|(_, r)| !r.is_finite()) {
            return Err(Error::NonFinite(format!("router reward {r}")));
        }
        let b = batch.len();
        let x = Array2::from_shape_fn((b, self.ctx_dim), |(i, j)| batch[i].0.ctx[j]);
        let rewards = Array2::from_shape_fn((b, 1), |(i, _)| batch[i].1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let rv = tape.constant(rewards.clone());
        let mut total = None;
        let mut stats = RouterUpdate::default();
        for (k, s) in self.slots.iter().enumerate() {
            let values = s.critic.eval(store, &x);
            let adv = &rewards - &values;
            let logits = s.actor.forward(&mut tape, store, xv);
            let lp = tape.log_softmax(logits);
            let actions: Vec<usize> = batch.iter().map(|(d, _)| d.actions[k]).collect();
            let picked = tape.pick(lp, &actions);
            let advv = tape.constant(adv);
            let la = tape.mul(picked, advv);
            let la = tape.mean(la);
            let la = tape.scale(la, -1.0);
            let v = s.critic.forward(&mut tape, store, xv);
            let diff = tape.sub(rv, v);
            let sq = tape.mul(diff, diff);
            let lc = tape.mean(sq);
            stats.actor_loss.push(tape.scalar(la));
            stats.critic_loss.push(tape.scalar(lc));
            let l = tape.add(la, lc);
            total = Some(match total {
                Some(t) => tape.add(t, l),
                None => l,
            });
        }
        let grads = tape.backward(total.expect("at least one slot")).into_params();
        if !grads.all_finite() {
            return Err(Error::NonFinite("router gradient".into()));
        }
        stats.grad_norm = grads.global_norm();
        Ok((grads, stats))
    }
}

/// Losses of one router update, per slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RouterUpdate {
    pub actor_loss: Vec<f64>,
    pub critic_loss: Vec<f64>,
    pub grad_norm: f64,
}

/// `(L_a, L_c)` per slot: `L_a = −log π_k(a_k)·(R − V_k)`, `L_c = (R − V_k)²`.
pub fn router_losses(decision: &RouterDecision, reward: f64) -> Result<Vec<(f64, f64)>> {
    if decision.greedy {
        return Err(Error::InvalidArgument("greedy decisions carry no sampling log-probabilities".into()));
    }
    if !reward.is_finite() {
        return Err(Error::NonFinite(format!("reward {reward}")));
    }
    Ok(decision
        .logprobs
        .iter()
        .zip(&decision.values)
        .map(|(&lp, &v)| {
            let adv = reward - v;
            (-lp * adv, adv * adv)
        })
        .collect())
}

/// Selection counts per `(slot, candidate)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingStats {
    pub slot_names: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub decisions: usize,
}

impl RoutingStats {
    pub fn is_empty(&self) -> bool {
        self.decisions == 0
    }

    /// Relative frequencies; empty when no decision was recorded.
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        if self.is_empty() {
            return Vec::new();
        }
        self.counts
            .iter()
            .map(|row| row.iter().map(|&c| c as f64 / self.decisions as f64).collect())
            .collect()
    }

    /// CSV `slot,candidate,frequency`. Without decisions only the header and
    /// a `none` marker row are written.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::InvalidData(format!("csv write: {e}"));
        wtr.write_record(["slot", "candidate", "frequency"]).map_err(csv_err)?;
        if self.is_empty() {
            wtr.write_record(["none", "none", "NA"]).map_err(csv_err)?;
        }
        for (k, row) in self.frequencies().iter().enumerate() {
            for (c, f) in row.iter().enumerate() {
                wtr.write_record([self.slot_names[k].clone(), c.to_string(), f.to_string()])
                    .map_err(csv_err)?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

pub fn routing_stats(pool: &PromptPool, decisions: &[RouterDecision]) -> RoutingStats {
    let mut counts: Vec<Vec<usize>> = pool.slot_sizes().iter().map(|&n| vec![0; n]).collect();
    for d in decisions {
        for (k, &a) in d.actions.iter().enumerate() {
            if let Some(c) = counts.get_mut(k).and_then(|row| row.get_mut(a)) {
                *c += 1;
            }
        }
    }
    RoutingStats {
        slot_names: pool.slots.iter().map(|s| s.name.clone()).collect(),
        counts,
        decisions: decisions.len(),
    }
}

/// Time-mean of node rows of a time-major `(T·N)×C` matrix.
pub fn pool_time_major(h: &Array2<f64>, nodes: usize, node: usize) -> Array1<f64> {
    let t = h.nrows() / nodes;
    let mut acc = Array1::zeros(h.ncols());
    for step in 0..t {
        acc += &h.row(step * nodes + node);
    }
    acc / t as f64
}
