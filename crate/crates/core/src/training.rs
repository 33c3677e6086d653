//! Two-stage alternating trainer, evaluation and checkpointing.
//!
//! Stage A trains everything except the router, which runs greedy with its
//! current parameters. Stage B trains only the router from sampled
//! decisions and per-instance rewards.

use crate::data_io::{make_windows, zscore_apply, zscore_fit, NormStats, SeriesDataset, WindowSample};
use crate::dispatch_sim::{neighborhood_adjacency, DispatchScenario};
use crate::error::{Error, Result};
use crate::graph::{build_semantic, semantic_from_distances, AdjacencyPair, DEFAULT_SEMANTIC_DEGREE};
use crate::heads::{DispatchHead, ForecastHead, CENTER_CELL, DEFAULT_HEAD_HIDDEN, GRID_CELLS};
use crate::llm_bridge::{patch_pool_matrix, Backend, LmConfig, PromptProgram, Projection, SequenceLayout, SurrogateLm, RESPONSE_TEMPLATE};
use crate::losses_metrics::{
    dispatch_loss_var, mae_var, metric_dispatch, metric_mae_rmse, DispatchMetrics, ForecastMetrics, LossWeights,
    RewardParams,
};
use crate::params::{GradStore, ParamStore};
use crate::prompt_router::{compose_prompt, pool_time_major, PromptPool, RouteMode, Router, RouterDecision, TaskKind};
use crate::st_encoder::{build_input, EncoderConfig, EncoderVars, StEncoder};
use crate::tape::{Tape, Var};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::{DateTime, Duration, Utc};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

/// Target text of the dispatch language-model loss.
pub const DISPATCH_RESPONSE: &str = "The share of idle taxis sent to each of the nine cells is";

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TLLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub task: TaskKind,
    pub nodes: usize,
    /// Observed features per node (`F`).
    pub in_features: usize,
    pub history_len: usize,
    pub horizon: usize,
    pub n_patches: usize,
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub head_hidden: usize,
    pub router_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Forecast,
            nodes: 20,
            in_features: 1,
            history_len: 12,
            horizon: 12,
            n_patches: 12,
            encoder: EncoderConfig::default(),
            lm: LmConfig::default(),
            head_hidden: DEFAULT_HEAD_HIDDEN,
            router_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.encoder.validate().into_iter().map(|e| format!("model.encoder.{e}")).collect();
        for (name, v) in [
            ("nodes", self.nodes),
            ("in_features", self.in_features),
            ("history_len", self.history_len),
            ("horizon", self.horizon),
            ("head_hidden", self.head_hidden),
            ("router_hidden", self.router_hidden),
            ("lm.d_model", self.lm.d_model),
            ("lm.mlp_hidden", self.lm.mlp_hidden),
        ] {
            if v == 0 {
                errs.push(format!("model.{name} must be >= 1"));
            }
        }
        let span_max = match self.task {
            TaskKind::Forecast => self.history_len.min(self.horizon),
            TaskKind::Dispatch => self.history_len,
        };
        if self.n_patches == 0 || self.n_patches > span_max {
            errs.push(format!("model.n_patches must lie in 1..={span_max}, got {}", self.n_patches));
        }
        if self.task == TaskKind::Dispatch && self.nodes != GRID_CELLS {
            errs.push(format!("model.nodes must be {GRID_CELLS} for dispatch"));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs_stage_a: usize,
    pub epochs_stage_b: usize,
    /// Windows (forecast) or scenarios (dispatch) per step.
    pub batch_size: usize,
    pub seed: u64,
    pub task: TaskKind,
    pub weights: LossWeights,
    pub rp: RewardParams,
    pub alternations: usize,
    pub router_lr: f64,
    /// Global gradient-norm clip of stage A.
    pub clip: f64,
    /// Nodes drawn per forecast window in training; all when absent.
    pub nodes_per_window: Option<usize>,
    /// Include the language-model cross-entropy in stage A.
    pub lm_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs_stage_a: 1,
            epochs_stage_b: 1,
            batch_size: 8,
            seed: 0,
            task: TaskKind::Forecast,
            weights: LossWeights::default(),
            rp: RewardParams::default(),
            alternations: 1,
            router_lr: 1e-3,
            clip: 5.0,
            nodes_per_window: None,
            lm_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        // lr = 0 is accepted here so a stage can be run as a dry pass; run
        // configs require lr > 0.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push("train.lr must be nonnegative".into());
        }
        if !(self.router_lr >= 0.0 && self.router_lr.is_finite()) {
            errs.push("train.router_lr must be nonnegative".into());
        }
        if self.epochs_stage_a == 0 {
            errs.push("train.epochs_stage_a must be >= 1".into());
        }
        if self.epochs_stage_b == 0 {
            errs.push("train.epochs_stage_b must be >= 1".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".into());
        }
        if self.alternations == 0 {
            errs.push("train.alternations must be >= 1".into());
        }
        if !(self.clip > 0.0) {
            errs.push("train.clip must be positive".into());
        }
        if self.nodes_per_window == Some(0) {
            errs.push("train.nodes_per_window must be >= 1".into());
        }
        errs.extend(self.weights.validate().into_iter().map(|e| format!("train.weights.{e}")));
        errs.extend(self.rp.validate().into_iter().map(|e| format!("train.rp.{e}")));
        errs
    }
}

/// Normalised forecasting windows plus what is needed to phrase prompts
/// and undo the normalisation.
#[derive(Debug, Clone)]
pub struct ForecastData {
    pub windows: Vec<WindowSample>,
    pub stats: NormStats,
    pub pair: AdjacencyPair,
    pub start: DateTime<Utc>,
    pub interval_minutes: u32,
}

impl ForecastData {
    pub fn nodes(&self) -> usize {
        self.pair.n
    }

    fn timestamp(&self, step: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(step as i64 * self.interval_minutes as i64)
    }
}

#[derive(Debug, Clone)]
pub struct ForecastSplits {
    pub train: ForecastData,
    pub val: ForecastData,
    pub test: ForecastData,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac: f64,
    pub stride: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.1,
            stride: 1,
        }
    }
}

/// Chronological train/val/test split; normalisation is fitted on the
/// training steps only. Windows never straddle two parts.
pub fn prepare_forecast(
    ds: &SeriesDataset,
    pair: &AdjacencyPair,
    k: usize,
    t: usize,
    split: &SplitConfig,
) -> Result<ForecastSplits> {
    if pair.n != ds.num_nodes() {
        return Err(Error::Shape(format!("graph has {} nodes, series {}", pair.n, ds.num_nodes())));
    }
    if !(split.train_frac > 0.0 && split.val_frac >= 0.0 && split.train_frac + split.val_frac < 1.0) {
        return Err(Error::InvalidArgument("split fractions must satisfy 0 < train, 0 <= val, train + val < 1".into()));
    }
    let len = ds.len();
    let a = (len as f64 * split.train_frac).round() as usize;
    let b = (len as f64 * (split.train_frac + split.val_frac)).round() as usize;
    let stats = zscore_fit(ds, 0..a)?;
    let mut normed = ds.clone();
    normed.values = zscore_apply(&ds.values, &stats);
    let part = |lo: usize, hi: usize| -> Result<ForecastData> {
        let piece = normed.slice_steps(lo, hi);
        let windows = if hi - lo >= k + t {
            make_windows(&piece, k, t, split.stride)?
        } else {
            Vec::new()
        };
        Ok(ForecastData {
            windows,
            stats: stats.clone(),
            pair: pair.clone(),
            start: piece.start_timestamp,
            interval_minutes: ds.interval_minutes,
        })
    };
    let out = ForecastSplits {
        train: part(0, a)?,
        val: part(a, b)?,
        test: part(b, len)?,
    };
    if out.train.windows.is_empty() || out.test.windows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "series of length {len} leaves no train or test window for K={k}, T={t}"
        )));
    }
    Ok(out)
}

/// Whole-series preparation for evaluation on an unseen domain: the
/// domain's own statistics, every window.
pub fn prepare_forecast_eval(ds: &SeriesDataset, pair: &AdjacencyPair, k: usize, t: usize, stride: usize) -> Result<ForecastData> {
    if pair.n != ds.num_nodes() {
        return Err(Error::Shape(format!("graph has {} nodes, series {}", pair.n, ds.num_nodes())));
    }
    let stats = zscore_fit(ds, 0..ds.len())?;
    let mut normed = ds.clone();
    normed.values = zscore_apply(&ds.values, &stats);
    Ok(ForecastData {
        windows: make_windows(&normed, k, t, stride)?,
        stats,
        pair: pair.clone(),
        start: ds.start_timestamp,
        interval_minutes: ds.interval_minutes,
    })
}

#[derive(Debug, Clone)]
pub struct DispatchData {
    pub scenarios: Vec<DispatchScenario>,
    pub stats: NormStats,
    pub pair: AdjacencyPair,
    pub interval_minutes: u32,
}

/// Demand/competitor statistics over the scenarios' history tensors.
pub fn dispatch_stats(scenarios: &[DispatchScenario]) -> Result<NormStats> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("no scenarios".into()));
    }
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    let mut count = 0usize;
    for sc in scenarios {
        let h = sc.history_tensor();
        for f in 0..2 {
            for v in h.index_axis(Axis(2), f).iter() {
                sum[f] += v;
                sq[f] += v * v;
            }
        }
        count += h.len() / 2;
    }
    let c = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
    let std = (0..2)
        .map(|f| (sq[f] / c - mean[f] * mean[f]).max(0.0).sqrt().max(crate::data_io::STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

/// 8-connected spatial graph plus a DTW semantic graph (`k = 2`) over each
/// cell's demand series across scenarios in time order.
pub fn dispatch_graph(scenarios: &[DispatchScenario]) -> Result<AdjacencyPair> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("no scenarios".into()));
    }
    let len = scenarios.len().min(crate::graph::DTW_MAX_POINTS);
    let mut values = Array3::zeros((len, GRID_CELLS, 1));
    for (t, sc) in scenarios.iter().take(len).enumerate() {
        for g in 0..GRID_CELLS {
            values[[t, g, 0]] = sc.demand_next[g];
        }
    }
    let ids = (0..GRID_CELLS).map(|g| format!("cell_{g}")).collect();
    let a_se = if len >= 2 {
        let ds = SeriesDataset::new(values, 5, scenarios[0].obs.timestamp, ids)?;
        build_semantic(&ds, 2)?
    } else {
        semantic_from_distances(&Array2::zeros((GRID_CELLS, GRID_CELLS)), 2)
    };
    AdjacencyPair::new(neighborhood_adjacency(), a_se)
}

pub fn prepare_dispatch(scenarios: Vec<DispatchScenario>, stats: Option<NormStats>, pair: Option<AdjacencyPair>, interval_minutes: u32) -> Result<DispatchData> {
    for (i, sc) in scenarios.iter().enumerate() {
        sc.validate().map_err(|e| Error::InvalidData(format!("scenario {i}: {e}")))?;
    }
    let stats = match stats {
        Some(s) => s,
        None => dispatch_stats(&scenarios)?,
    };
    let pair = match pair {
        Some(p) => p,
        None => dispatch_graph(&scenarios)?,
    };
    Ok(DispatchData {
        scenarios,
        stats,
        pair,
        interval_minutes,
    })
}

/// Default semantic degree for forecasting graphs; re-exported for callers
/// that build graphs next to training.
pub const SEMANTIC_DEGREE: usize = DEFAULT_SEMANTIC_DEGREE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
}

/// One epoch of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean stage-A objective, or mean stage-B reward.
    pub loss: f64,
    /// Mean task loss (MAE in normalised units, or `L_d`).
    pub task_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stages: Vec<Stage>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub pool: PromptPool,
    pub store: ParamStore,
    pub encoder: StEncoder,
    pub proj: Projection,
    pub lm: SurrogateLm,
    pub forecast_head: Option<ForecastHead>,
    pub dispatch_head: Option<DispatchHead>,
    pub router: Router,
    /// Drives shuffling, node subsampling and sampled routing.
    pub rng: ChaCha8Rng,
    /// Where inference-time LM calls go. Not stored in checkpoints.
    pub backend: Backend,
}

fn hist_text(values: impl Iterator<Item = f64>, decimals: usize) -> String {
    values.map(|v| format!("{v:.decimals$}")).collect::<Vec<_>>().join(", ")
}

fn time_text(ts: DateTime<Utc>) -> String {
    ts.format("%Y-%m-%d %H:%M").to_string()
}

/// Prompt fields of one forecasting instance: raw history and target span.
pub fn forecast_fields(data: &ForecastData, w: &WindowSample, node: usize) -> BTreeMap<String, String> {
    let k = w.history.dim().0;
    let t = w.target.nrows();
    let hist = hist_text((0..k).map(|s| data.stats.denormalize(0, w.history[[s, node, 0]])), 1);
    let from = data.timestamp(w.origin_index + k);
    let to = data.timestamp(w.origin_index + k + t - 1);
    BTreeMap::from([
        ("HIST".to_string(), hist),
        ("TIME_RANGE".to_string(), format!("{} to {}", time_text(from), time_text(to))),
    ])
}

/// Prompt fields of one dispatch instance: latest net demand per cell and
/// the decision time.
pub fn dispatch_fields(sc: &DispatchScenario) -> BTreeMap<String, String> {
    let last = sc.history_len() - 1;
    let net = (0..GRID_CELLS).map(|g| sc.obs.demand_hist[last][g] - sc.obs.competitor_hist[last][g]);
    BTreeMap::from([
        ("HIST".to_string(), hist_text(net, 0)),
        ("TIME_RANGE".to_string(), time_text(sc.obs.timestamp)),
    ])
}

fn node_rows(steps: usize, nodes: usize, node: usize) -> Vec<usize> {
    (0..steps).map(|s| s * nodes + node).collect()
}

fn greedy_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Per-instance tape outputs.
struct InstanceVars {
    /// Forecast `1×T` or dispatch `1×9` distribution.
    output: Var,
    ce: Option<Var>,
}

impl Model {
    pub fn new(cfg: ModelConfig, pool: PromptPool, seed: u64) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        pool.validate(cfg.task)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let in_channels = cfg.in_features + crate::data_io::CLOCK_CHANNELS;
        let encoder = StEncoder::init(&mut store, &cfg.encoder, in_channels, cfg.nodes, cfg.history_len, cfg.horizon, &mut rng)?;
        let two_d = 2 * cfg.encoder.d;
        let proj = Projection::init(&mut store, two_d, cfg.lm.d_model, &mut rng);
        let lm = SurrogateLm::init(&mut store, &cfg.lm, &mut rng);
        let (forecast_head, dispatch_head) = match cfg.task {
            TaskKind::Forecast => (
                Some(ForecastHead::init(&mut store, cfg.horizon * two_d, cfg.lm.d_model, cfg.head_hidden, cfg.horizon, &mut rng)),
                None,
            ),
            TaskKind::Dispatch => (None, Some(DispatchHead::init(&mut store, cfg.lm.d_model, &mut rng))),
        };
        let router = Router::init(&mut store, two_d, &pool.slot_sizes(), cfg.router_hidden, &mut rng);
        Ok(Self {
            cfg,
            seed,
            pool,
            store,
            encoder,
            proj,
            lm,
            forecast_head,
            dispatch_head,
            router,
            rng,
            backend: Backend::Surrogate,
        })
    }

    pub fn router_hash(&self) -> String {
        self.store.hash_where(|g| g == "router")
    }

    pub fn non_router_hash(&self) -> String {
        self.store.hash_where(|g| g != "router")
    }

    /// `H′` and the optional cross-entropy for one composed prompt. `his`
    /// is the node's `K×2D` history slice, `pre` its `T×2D` fused slice.
    fn lm_pass<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        program: &PromptProgram,
        his: Var,
        pre: Option<Var>,
        n_p: usize,
        target: Option<&str>,
    ) -> Result<(Var, Option<Var>)> {
        let store = &self.store;
        let layout = SequenceLayout::build(program, n_p, target.unwrap_or(""))?;
        let span = |tape: &mut Tape<'a>, e: Var| -> Result<Var> {
            let steps = tape.shape(e).0;
            let projected = self.proj.forward(tape, store, e)?;
            if steps == n_p {
                return Ok(projected);
            }
            let pool = tape.constant(patch_pool_matrix(steps, n_p)?);
            Ok(tape.matmul(pool, projected))
        };
        let e_his = match layout.his_start {
            Some(_) => Some(span(tape, his)?),
            None => None,
        };
        let e_pre = match (layout.pre_start, pre) {
            (Some(_), Some(p)) => Some(span(tape, p)?),
            (Some(_), None) => return Err(Error::Shape("prompt has a PRE span but no prediction embedding".into())),
            (None, _) => None,
        };
        let st = layout.st_start_index()?;
        if let Backend::Remote(remote) = &self.backend {
            if target.is_some() {
                return Err(Error::Unsupported("the remote backend is inference-only".into()));
            }
            let his = e_his.map(|v| tape.value(v).clone());
            let pre = e_pre.map(|v| tape.value(v).clone());
            let h = remote.pre_state(&layout, his.as_ref(), pre.as_ref())?;
            if h.len() != self.cfg.lm.d_model {
                return Err(Error::RemoteMalformed(format!("hidden width {}, model expects {}", h.len(), self.cfg.lm.d_model)));
            }
            let row = Array2::from_shape_vec((1, h.len()), h).expect("row");
            return Ok((tape.constant(row), None));
        }
        let len = if target.is_some() { layout.len() } else { st + 1 };
        let x = self.lm.embed(tape, store, &layout, e_his, e_pre, len)?;
        let h = self.lm.forward(tape, store, x);
        let h_prime = tape.slice_rows(h, st, 1);
        let ce = match target {
            Some(_) => self.lm.cross_entropy(tape, store, h, &layout)?,
            None => None,
        };
        Ok((h_prime, ce))
    }

    fn route(&self, ctx: &[f64], mode: RouteMode, rng: &mut ChaCha8Rng) -> Result<RouterDecision> {
        self.router.route(&self.store, ctx, mode, rng)
    }

    fn encode_window<'a>(&'a self, tape: &mut Tape<'a>, w: &WindowSample, pair: &AdjacencyPair) -> Result<EncoderVars> {
        let x = tape.constant(build_input(&w.history, &w.clock));
        self.encoder.forward(tape, &self.store, x, pair)
    }

    fn forecast_instance<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        enc: &EncoderVars,
        data: &ForecastData,
        w: &WindowSample,
        node: usize,
        actions: &[usize],
        n_p: usize,
        with_ce: bool,
    ) -> Result<InstanceVars> {
        let head = self
            .forecast_head
            .as_ref()
            .ok_or_else(|| Error::Unsupported("model has no forecast head".into()))?;
        let (k, t) = (self.cfg.history_len, self.cfg.horizon);
        let nodes = enc.nodes;
        let program = compose_prompt(&self.pool, actions, &forecast_fields(data, w, node))?;
        let his = tape.gather_rows(enc.h_hist, &node_rows(k, nodes, node));
        let pre = tape.gather_rows(enc.h_f, &node_rows(t, nodes, node));
        let target = with_ce.then_some(RESPONSE_TEMPLATE.trim());
        let (h_prime, ce) = self.lm_pass(tape, &program, his, Some(pre), n_p, target)?;
        let two_d = tape.shape(pre).1;
        let flat = tape.reshape(pre, 1, t * two_d);
        let output = head.forward(tape, &self.store, flat, h_prime)?;
        Ok(InstanceVars { output, ce })
    }

    fn dispatch_input(&self, sc: &DispatchScenario, stats: &NormStats, interval: u32) -> Array2<f64> {
        let mut h = sc.history_tensor();
        for (f, mut lane) in h.axis_iter_mut(Axis(2)).enumerate() {
            lane.mapv_inplace(|v| stats.normalize(f, v));
        }
        build_input(&h, &sc.clock(interval))
    }

    fn dispatch_instance<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        data: &DispatchData,
        sc: &DispatchScenario,
        mode: RouteMode,
        rng: &mut ChaCha8Rng,
        n_p: usize,
        with_ce: bool,
    ) -> Result<(InstanceVars, RouterDecision)> {
        let head = self
            .dispatch_head
            .as_ref()
            .ok_or_else(|| Error::Unsupported("model has no dispatch head".into()))?;
        if sc.history_len() != self.cfg.history_len {
            return Err(Error::Shape(format!(
                "scenario history of {} steps, model expects {}",
                sc.history_len(),
                self.cfg.history_len
            )));
        }
        let x = tape.constant(self.dispatch_input(sc, &data.stats, data.interval_minutes));
        let enc = self.encoder.forward(tape, &self.store, x, &data.pair)?;
        let ctx = pool_time_major(tape.value(enc.h_f), GRID_CELLS, CENTER_CELL).to_vec();
        let decision = self.route(&ctx, mode, rng)?;
        let program = compose_prompt(&self.pool, &decision.actions, &dispatch_fields(sc))?;
        let his = tape.gather_rows(enc.h_hist, &node_rows(self.cfg.history_len, GRID_CELLS, CENTER_CELL));
        let target = with_ce.then_some(DISPATCH_RESPONSE);
        let (h_prime, ce) = self.lm_pass(tape, &program, his, None, n_p, target)?;
        let output = head.forward(tape, &self.store, h_prime)?;
        Ok((InstanceVars { output, ce }, decision))
    }

    /// Normalised `T`-step forecasts of every node of one window, greedy
    /// routing. Returns `(predictions N×T, decisions)`.
    pub fn forecast_window(&self, data: &ForecastData, w: &WindowSample, n_p: usize) -> Result<(Array2<f64>, Vec<RouterDecision>)> {
        let mut tape = Tape::new();
        let enc = self.encode_window(&mut tape, w, &data.pair)?;
        let nodes = enc.nodes;
        let mut out = Array2::zeros((nodes, self.cfg.horizon));
        let mut decisions = Vec::with_capacity(nodes);
        for node in 0..nodes {
            let ctx = pool_time_major(tape.value(enc.h_f), nodes, node).to_vec();
            let d = self.route(&ctx, RouteMode::Greedy, &mut greedy_rng())?;
            let mark = tape.len();
            let inst = self.forecast_instance(&mut tape, &enc, data, w, node, &d.actions, n_p, false)?;
            out.row_mut(node).assign(&tape.value(inst.output).row(0));
            tape.truncate(mark);
            decisions.push(d);
        }
        Ok((out, decisions))
    }

    pub fn dispatch_policy(&self, data: &DispatchData, sc: &DispatchScenario, n_p: usize) -> Result<(Vec<f64>, RouterDecision)> {
        let mut tape = Tape::new();
        let (inst, d) = self.dispatch_instance(&mut tape, data, sc, RouteMode::Greedy, &mut greedy_rng(), n_p, false)?;
        Ok((tape.value(inst.output).iter().copied().collect(), d))
    }
}

fn check_finite(stage: Stage, batch: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("stage {stage:?} batch {batch}: loss {v}")))
    }
}

fn clip_and_step(store: &mut ParamStore, mut grads: GradStore, lr: f64, clip: f64) {
    let norm = grads.global_norm();
    if norm > clip {
        grads.scale(clip / norm);
    }
    store.descend(&grads, lr);
}

/// Data of either task.
#[derive(Debug, Clone)]
pub enum TaskData {
    Forecast(ForecastData),
    Dispatch(DispatchData),
}

impl TaskData {
    fn len(&self) -> usize {
        match self {
            TaskData::Forecast(d) => d.windows.len(),
            TaskData::Dispatch(d) => d.scenarios.len(),
        }
    }

    fn task(&self) -> TaskKind {
        match self {
            TaskData::Forecast(_) => TaskKind::Forecast,
            TaskData::Dispatch(_) => TaskKind::Dispatch,
        }
    }
}

fn check_task(model: &Model, data: &TaskData, cfg: &TrainConfig) -> Result<()> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if model.cfg.task != data.task() || cfg.task != data.task() {
        return Err(Error::InvalidArgument(format!(
            "model task {:?}, train task {:?}, data task {:?}",
            model.cfg.task,
            cfg.task,
            data.task()
        )));
    }
    if data.len() == 0 {
        return Err(Error::InvalidArgument("no training instances".into()));
    }
    Ok(())
}

fn pick_nodes(rng: &mut ChaCha8Rng, nodes: usize, per_window: Option<usize>) -> Vec<usize> {
    match per_window {
        Some(m) if m < nodes => {
            let mut all: Vec<usize> = (0..nodes).collect();
            all.shuffle(rng);
            all.truncate(m);
            all.sort_unstable();
            all
        }
        _ => (0..nodes).collect(),
    }
}

/// Stage A: every group except `router` is trained with plain gradient
/// descent on `L_LLM + λ_t·L_t`; routing is greedy.
pub fn train_stage_a(model: &mut Model, data: &TaskData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    check_task(model, data, cfg)?;
    log.stages.push(Stage::A);
    let n_p = model.cfg.n_patches;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch_index = 0;
    for epoch in 0..cfg.epochs_stage_a {
        order.shuffle(&mut model.rng);
        let (mut loss_sum, mut task_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let plan: Vec<(usize, Vec<usize>)> = chunk
                .iter()
                .map(|&i| match data {
                    TaskData::Forecast(d) => (i, pick_nodes(&mut model.rng, d.nodes(), cfg.nodes_per_window)),
                    TaskData::Dispatch(_) => (i, vec![CENTER_CELL]),
                })
                .collect();
            let instances: usize = plan.iter().map(|(_, n)| n.len()).sum();
            let weight = 1.0 / instances as f64;
            let mut grads = GradStore::new(model.store.len());
            let (mut loss, mut task) = (0.0, 0.0);
            for (i, nodes) in &plan {
                let (g, l, t) = stage_a_item(model, data, *i, nodes, n_p, cfg, weight)?;
                grads.merge(&g);
                loss += l;
                task += t;
            }
            check_finite(Stage::A, batch_index, loss)?;
            grads.retain(|id| model.store.group_of(id) != "router");
            if !grads.all_finite() {
                return Err(Error::NonFinite(format!("stage A batch {batch_index}: gradient")));
            }
            if log::log_enabled!(log::Level::Debug) {
                let mut groups: BTreeMap<String, f64> = BTreeMap::new();
                for (id, g) in grads.iter() {
                    *groups.entry(model.store.group_of(id).to_string()).or_default() += g.iter().map(|x| x * x).sum::<f64>();
                }
                log::debug!("batch {batch_index} grad norms {groups:?}");
            }
            clip_and_step(&mut model.store, grads, cfg.lr, cfg.clip);
            loss_sum += loss;
            task_sum += task;
            batches += 1;
            batch_index += 1;
        }
        let rec = EpochRecord {
            stage: Stage::A,
            epoch,
            loss: loss_sum / batches as f64,
            task_loss: task_sum / batches as f64,
        };
        log::info!("stage A epoch {epoch}: loss {:.6} task {:.6}", rec.loss, rec.task_loss);
        log.epochs.push(rec);
    }
    Ok(())
}

/// Gradients of one window (or scenario) scaled by `weight`, plus the
/// weighted loss and task loss.
fn stage_a_item(
    model: &Model,
    data: &TaskData,
    i: usize,
    nodes: &[usize],
    n_p: usize,
    cfg: &TrainConfig,
    weight: f64,
) -> Result<(GradStore, f64, f64)> {
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    let mut task_total = 0.0;
    match data {
        TaskData::Forecast(d) => {
            let w = &d.windows[i];
            let enc = model.encode_window(&mut tape, w, &d.pair)?;
            for &node in nodes {
                let ctx = pool_time_major(tape.value(enc.h_f), enc.nodes, node).to_vec();
                let dec = model.route(&ctx, RouteMode::Greedy, &mut greedy_rng())?;
                let inst = model.forecast_instance(&mut tape, &enc, d, w, node, &dec.actions, n_p, cfg.lm_loss)?;
                let target = tape.constant(w.target.column(node).to_owned().insert_axis(Axis(0)));
                let mae = mae_var(&mut tape, inst.output, target);
                task_total += tape.scalar(mae) * weight;
                let scaled = tape.scale(mae, cfg.weights.lambda_t);
                terms.push(match inst.ce {
                    Some(ce) => tape.add(ce, scaled),
                    None => scaled,
                });
            }
        }
        TaskData::Dispatch(d) => {
            let sc = &d.scenarios[i];
            let (inst, _) = model.dispatch_instance(&mut tape, d, sc, RouteMode::Greedy, &mut greedy_rng(), n_p, cfg.lm_loss)?;
            let ld = dispatch_loss_var(&mut tape, inst.output, sc, &cfg.weights, &cfg.rp)?;
            task_total += tape.scalar(ld.total) * weight;
            let scaled = tape.scale(ld.total, cfg.weights.lambda_t);
            terms.push(match inst.ce {
                Some(ce) => tape.add(ce, scaled),
                None => scaled,
            });
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    let total = tape.scale(total, weight);
    let loss = tape.scalar(total);
    Ok((tape.backward(total).into_params(), loss, task_total))
}

/// Stage B: sampled routing, reward `−L_t` (forecast) or `Σ_g π_g·R_g`
/// (dispatch), one router update per batch. Nothing else moves.
pub fn train_stage_b(model: &mut Model, data: &TaskData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    check_task(model, data, cfg)?;
    log.stages.push(Stage::B);
    let n_p = model.cfg.n_patches;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch_index = 0;
    for epoch in 0..cfg.epochs_stage_b {
        order.shuffle(&mut model.rng);
        let (mut reward_sum, mut task_sum, mut count) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::new();
            for &i in chunk {
                let mut rng = model.rng.clone();
                let items = stage_b_item(model, data, i, n_p, cfg, &mut rng)?;
                model.rng = rng;
                batch.extend(items);
            }
            for (_, r) in &batch {
                check_finite(Stage::B, batch_index, *r)?;
                reward_sum += r;
                task_sum -= r;
                count += 1;
            }
            model.router.update(&mut model.store, &batch, cfg.router_lr)?;
            batch_index += 1;
        }
        let rec = EpochRecord {
            stage: Stage::B,
            epoch,
            loss: reward_sum / count as f64,
            task_loss: task_sum / count as f64,
        };
        log::info!("stage B epoch {epoch}: mean reward {:.6}", rec.loss);
        log.epochs.push(rec);
    }
    Ok(())
}

fn stage_b_item(
    model: &Model,
    data: &TaskData,
    i: usize,
    n_p: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(RouterDecision, f64)>> {
    let mut tape = Tape::new();
    match data {
        TaskData::Forecast(d) => {
            let w = &d.windows[i];
            let enc = model.encode_window(&mut tape, w, &d.pair)?;
            let nodes = pick_nodes(rng, enc.nodes, cfg.nodes_per_window);
            let mut out = Vec::with_capacity(nodes.len());
            for node in nodes {
                let ctx = pool_time_major(tape.value(enc.h_f), enc.nodes, node).to_vec();
                let dec = model.route(&ctx, RouteMode::Sample, rng)?;
                let mark = tape.len();
                let inst = model.forecast_instance(&mut tape, &enc, d, w, node, &dec.actions, n_p, false)?;
                let pred: Vec<f64> = tape.value(inst.output).iter().copied().collect();
                tape.truncate(mark);
                let target: Vec<f64> = w.target.column(node).to_vec();
                let mae = crate::losses_metrics::mae_loss(&pred, &target)?;
                out.push((dec, -mae));
            }
            Ok(out)
        }
        TaskData::Dispatch(d) => {
            let sc = &d.scenarios[i];
            let (inst, dec) = model.dispatch_instance(&mut tape, d, sc, RouteMode::Sample, rng, n_p, false)?;
            let pi: Vec<f64> = tape.value(inst.output).iter().copied().collect();
            let loss = crate::losses_metrics::dispatch_loss(&pi, sc, &LossWeights { lambda_t: 1.0, lambda_w: 0.0, lambda_e: 0.0 }, &cfg.rp)?;
            Ok(vec![(dec, -loss.l_rf)])
        }
    }
}

/// `[A, B] × alternations`.
pub fn run_schedule(model: &mut Model, data: &TaskData, cfg: &TrainConfig) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    for _ in 0..cfg.alternations {
        train_stage_a(model, data, cfg, &mut log)?;
        train_stage_b(model, data, cfg, &mut log)?;
    }
    Ok(log)
}

/// Denormalised forecasts `(pred, target)` flattened over windows, nodes
/// and steps, plus every routing decision.
pub fn forecast_predictions(model: &Model, data: &ForecastData, n_p: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<RouterDecision>)> {
    let mut pred = Vec::new();
    let mut target = Vec::new();
    let mut decisions = Vec::new();
    for w in &data.windows {
        let (p, d) = model.forecast_window(data, w, n_p)?;
        for node in 0..data.nodes() {
            for s in 0..model.cfg.horizon {
                pred.push(data.stats.denormalize(0, p[[node, s]]));
                target.push(data.stats.denormalize(0, w.target[[s, node]]));
            }
        }
        decisions.extend(d);
    }
    Ok((pred, target, decisions))
}

pub fn evaluate_forecast(model: &Model, data: &ForecastData, n_p: usize) -> Result<(ForecastMetrics, Vec<RouterDecision>)> {
    if data.windows.is_empty() {
        return Err(Error::InvalidArgument("no evaluation windows".into()));
    }
    let (pred, target, decisions) = forecast_predictions(model, data, n_p)?;
    let (mae, rmse) = metric_mae_rmse(&pred, &target)?;
    Ok((ForecastMetrics { mae, rmse }, decisions))
}

/// Last observed value repeated over the horizon.
pub fn persistence_metrics(data: &ForecastData) -> Result<ForecastMetrics> {
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for w in &data.windows {
        let k = w.history.dim().0;
        for node in 0..data.nodes() {
            let last = data.stats.denormalize(0, w.history[[k - 1, node, 0]]);
            for s in 0..w.target.nrows() {
                pred.push(last);
                target.push(data.stats.denormalize(0, w.target[[s, node]]));
            }
        }
    }
    let (mae, rmse) = metric_mae_rmse(&pred, &target)?;
    Ok(ForecastMetrics { mae, rmse })
}

pub fn evaluate_dispatch(model: &Model, data: &DispatchData, n_p: usize) -> Result<(DispatchMetrics, Vec<RouterDecision>)> {
    let mut policies = Vec::with_capacity(data.scenarios.len());
    let mut decisions = Vec::with_capacity(data.scenarios.len());
    for sc in &data.scenarios {
        let (pi, d) = model.dispatch_policy(data, sc, n_p)?;
        policies.push(pi);
        decisions.push(d);
    }
    Ok((metric_dispatch(&policies, &data.scenarios)?, decisions))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    pool: PromptPool,
    seed: u64,
    rng: RngState,
    arrays: Vec<ArrayEntry>,
    /// Free-form snapshot of the run configuration.
    #[serde(default)]
    extra: serde_json::Value,
}

/// Writes the model. Layout: magic, `u32` version, `u64` header length,
/// JSON header, little-endian `f64` arrays in header order, then the
/// SHA-256 of everything before it.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model, extra)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_bytes(model: &Model, extra: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: model.cfg.clone(),
        pool: model.pool.clone(),
        seed: model.seed,
        rng: RngState {
            seed: hex::encode(model.rng.get_seed()),
            stream: model.rng.get_stream(),
            word_pos: model.rng.get_word_pos().to_string(),
        },
        arrays: model
            .store
            .iter()
            .map(|(name, v)| ArrayEntry {
                name: name.to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 8 * model.store.num_scalars() + 64);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
    buf.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
    buf.extend_from_slice(&json);
    for (_, v) in model.store.iter() {
        for x in v.iter() {
            buf.write_f64::<LittleEndian>(*x).expect("vec write");
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Loaded model plus the free-form run snapshot stored with it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Model, serde_json::Value)> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic or truncated)"));
    }
    let mut cur = &bytes[8..];
    let version = cur.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch, file is corrupt"));
    }
    let hlen = cur.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header length"))? as usize;
    let start = 8 + 4 + 8;
    if start + hlen > body.len() {
        return Err(corrupt("header extends past the end of the file"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[start..start + hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = Model::new(header.model, header.pool, header.seed)?;
    if header.arrays.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} arrays, model defines {}",
            header.arrays.len(),
            model.store.len()
        )));
    }
    let mut data = &body[start + hlen..];
    for entry in &header.arrays {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown array {}", entry.name)))?;
        let want = model.store.get(id).dim();
        if want != (entry.rows, entry.cols) {
            return Err(Error::Checkpoint(format!(
                "array {} is {}x{}, model expects {}x{}",
                entry.name, entry.rows, entry.cols, want.0, want.1
            )));
        }
        let mut values = vec![0.0; entry.rows * entry.cols];
        data.read_f64_into::<LittleEndian>(&mut values)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {}", entry.name)))?;
        *model.store.get_mut(id) = Array2::from_shape_vec(want, values).expect("sized");
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after the last array"));
    }
    let seed: [u8; 32] = hex::decode(&header.rng.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| corrupt("bad rng seed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(header.rng.word_pos.parse::<u128>().map_err(|_| corrupt("bad rng position"))?);
    model.rng = rng;
    Ok((model, header.extra))
}
