//! Command layer behind the `transllm` binary.
//!
//! Every command reads one JSON run config, validates it before touching
//! any data, and writes its outputs plus a `manifest.json` into the run
//! directory:
//!
//! ```text
//! <out>/config.json          effective config
//! <out>/checkpoint           model (train)
//! <out>/metrics.json         evaluation results
//! <out>/routing_stats.csv    prompt selection counts
//! <out>/logs/                per-epoch training log
//! <out>/manifest.json        inputs, config hash, seed, versions
//! ```

use crate::data_io::{load_series, synth_generate, write_manifest, write_series, SeriesDataset, SynthConfig};
use crate::dispatch_sim::{baseline_policy, evaluate_policy, read_scenarios, synth_scenarios, write_scenarios, BaselineKind, ScenarioConfig};
use crate::error::{Error, Result};
use crate::graph::{build_grid_adjacency, build_semantic, build_spatial_from_edges, AdjacencyPair, GraphFile, DEFAULT_SEMANTIC_DEGREE};
use crate::llm_bridge::{Backend, LmConfig, RemoteLm};
use crate::losses_metrics::MetricsReport;
use crate::prompt_router::{routing_stats, PromptPool, RouterDecision, TaskKind};
use crate::st_encoder::EncoderConfig;
use crate::training::{
    checkpoint_bytes, evaluate_dispatch, evaluate_forecast, load_checkpoint, persistence_metrics, prepare_dispatch,
    prepare_forecast, prepare_forecast_eval, run_schedule, save_checkpoint, DispatchData, ForecastData, Model,
    ModelConfig, SplitConfig, TaskData, TrainConfig, CHECKPOINT_VERSION,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    BuildGraph,
    Train,
    Eval,
    ZeroShot,
    DispatchSim,
    RouteStats,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::BuildGraph => "build-graph",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::ZeroShot => "zero-shot",
            Command::DispatchSim => "dispatch-sim",
            Command::RouteStats => "route-stats",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Surrogate,
    Remote,
}

/// Input files of one domain. Relative paths resolve against the config
/// file's directory; missing entries fall back to the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub series: Option<PathBuf>,
    pub spatial_graph: Option<PathBuf>,
    pub semantic_graph: Option<PathBuf>,
    pub scenarios: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Spatial graph from an edge list CSV `from,to,weight`.
    pub edges: Option<PathBuf>,
    /// Otherwise a 4-neighbour grid of `rows × cols` nodes.
    pub grid_rows: Option<usize>,
    pub grid_cols: Option<usize>,
    pub semantic_degree: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            edges: None,
            grid_rows: None,
            grid_cols: None,
            semantic_degree: DEFAULT_SEMANTIC_DEGREE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub head_hidden: usize,
    pub router_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            encoder: m.encoder,
            lm: m.lm,
            head_hidden: m.head_hidden,
            router_hidden: m.router_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroShotConfig {
    pub data: DataPaths,
    /// `N_p` values to evaluate; the trained value when empty.
    pub n_patches: Vec<usize>,
    pub stride: usize,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            n_patches: Vec::new(),
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub history_len: usize,
    pub horizon: usize,
    pub n_patches: usize,
    pub data: DataPaths,
    pub synth: SynthConfig,
    pub scenarios: ScenarioConfig,
    pub graph: GraphConfig,
    /// Prompt pool JSON; the built-in pool of the task when absent.
    pub pool: Option<PathBuf>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub backend: BackendKind,
    /// Remote endpoint; `TRANSLLM_LM_URL` is used when absent.
    pub remote_url: Option<String>,
    pub zero_shot: ZeroShotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Forecast,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            history_len: 12,
            horizon: 12,
            n_patches: 12,
            data: DataPaths::default(),
            synth: SynthConfig::default(),
            scenarios: ScenarioConfig::default(),
            graph: GraphConfig::default(),
            pool: None,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            backend: BackendKind::Surrogate,
            remote_url: None,
            zero_shot: ZeroShotConfig::default(),
        }
    }
}

/// Keys of `given` absent from `reference`, as dotted paths. `null` in the
/// reference (an optional section) accepts any subtree.
fn unknown_keys(given: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(r)) = (given, reference) {
        for (k, v) in g {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                None => out.push(format!("{path}: unknown key")),
                Some(rv) => unknown_keys(v, rv, &path, out),
            }
        }
    }
}

impl RunConfig {
    /// Parses and validates; every violated key is reported at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config is not JSON: {e}")]))?;
        let mut errs = Vec::new();
        let reference = serde_json::to_value(RunConfig::default())?;
        unknown_keys(&value, &reference, "", &mut errs);
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&x);
                }
            }
        };
        for d in [&mut self.data, &mut self.zero_shot.data] {
            fix(&mut d.series);
            fix(&mut d.spatial_graph);
            fix(&mut d.semantic_graph);
            fix(&mut d.scenarios);
        }
        fix(&mut self.pool);
        fix(&mut self.graph.edges);
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.history_len == 0 {
            errs.push("history_len must be >= 1".into());
        }
        if self.horizon == 0 {
            errs.push("horizon must be >= 1".into());
        }
        let model = self.model_config(if self.task == TaskKind::Dispatch { 9 } else { 1 });
        errs.extend(model.validate().into_iter().filter(|e| !e.starts_with("model.nodes")).map(|e| {
            e.replacen("model.n_patches", "n_patches", 1)
                .replacen("model.history_len", "history_len", 1)
                .replacen("model.horizon", "horizon", 1)
        }));
        errs.extend(self.train.validate());
        if self.train.lr == 0.0 {
            errs.push("train.lr must be positive".into());
        }
        if self.train.task != self.task {
            errs.push(format!("train.task ({:?}) must match task ({:?})", self.train.task, self.task));
        }
        if !(self.split.train_frac > 0.0 && self.split.val_frac >= 0.0 && self.split.train_frac + self.split.val_frac < 1.0) {
            errs.push("split: need 0 < train_frac, 0 <= val_frac, train_frac + val_frac < 1".into());
        }
        if self.split.stride == 0 {
            errs.push("split.stride must be >= 1".into());
        }
        if self.zero_shot.stride == 0 {
            errs.push("zero_shot.stride must be >= 1".into());
        }
        if self.graph.semantic_degree == 0 {
            errs.push("graph.semantic_degree must be >= 1".into());
        }
        if self.graph.grid_rows.is_some() != self.graph.grid_cols.is_some() {
            errs.push("graph.grid_rows and graph.grid_cols must be given together".into());
        }
        errs.extend(self.scenarios.validate());
        if self.task == TaskKind::Dispatch && self.scenarios.history_len != self.history_len {
            errs.push(format!(
                "scenarios.history_len ({}) must equal history_len ({})",
                self.scenarios.history_len, self.history_len
            ));
        }
        if self.synth.n_nodes == 0 || self.synth.length == 0 || self.synth.steps_per_day == 0 {
            errs.push("synth: n_nodes, length and steps_per_day must be >= 1".into());
        }
        if self.synth.interval_minutes == 0 {
            errs.push("synth.interval_minutes must be >= 1".into());
        }
        if !(self.synth.noise_sigma >= 0.0) {
            errs.push("synth.noise_sigma must be nonnegative".into());
        }
        if self.backend == BackendKind::Remote {
            let url = self.remote_url.clone().or_else(|| std::env::var(crate::llm_bridge::LM_URL_ENV).ok());
            if url.map_or(true, |u| u.trim().is_empty()) {
                errs.push(format!("remote_url: required for the remote backend (or set {})", crate::llm_bridge::LM_URL_ENV));
            }
        }
        errs
    }

    pub fn model_config(&self, nodes: usize) -> ModelConfig {
        ModelConfig {
            task: self.task,
            nodes,
            in_features: if self.task == TaskKind::Dispatch { 2 } else { 1 },
            history_len: self.history_len,
            horizon: if self.task == TaskKind::Dispatch { 1 } else { self.horizon },
            n_patches: self.n_patches,
            encoder: self.model.encoder.clone(),
            lm: self.model.lm.clone(),
            head_hidden: self.model.head_hidden,
            router_hidden: self.model.router_hidden,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn backend(&self, d_model: usize) -> Backend {
        match self.backend {
            BackendKind::Surrogate => Backend::Surrogate,
            BackendKind::Remote => match &self.remote_url {
                Some(u) => Backend::Remote(RemoteLm::new(u.clone(), d_model)),
                None => Backend::from_env(d_model),
            },
        }
    }

    fn pool(&self) -> Result<PromptPool> {
        match &self.pool {
            Some(p) => PromptPool::load(p, self.task),
            None => Ok(PromptPool::default_for(self.task)),
        }
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn routing_stats(&self) -> PathBuf {
        self.root.join("routing_stats.csv")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn series(&self) -> PathBuf {
        self.root.join("data").join("series.csv")
    }
    pub fn scenarios(&self) -> PathBuf {
        self.root.join("data").join("scenarios.jsonl")
    }
    pub fn spatial_graph(&self) -> PathBuf {
        self.root.join("graph").join("spatial.json")
    }
    pub fn semantic_graph(&self) -> PathBuf {
        self.root.join("graph").join("semantic.json")
    }
}

/// Result of one command: files written and the headline values.
#[derive(Debug, Clone, Serialize)]
pub struct CommandOutput {
    pub command: &'static str,
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Ctx {
    cfg: RunConfig,
    dir: RunDir,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn output(&mut self, p: PathBuf) -> PathBuf {
        self.outputs.push(p.clone());
        p
    }

    fn series_path(&self, d: &DataPaths) -> PathBuf {
        d.series.clone().unwrap_or_else(|| self.dir.series())
    }

    fn scenarios_path(&self, d: &DataPaths) -> PathBuf {
        d.scenarios.clone().unwrap_or_else(|| self.dir.scenarios())
    }

    fn load_series(&mut self, d: &DataPaths) -> Result<SeriesDataset> {
        let p = self.series_path(d);
        self.input(&p);
        load_series(&p)
    }

    fn load_scenarios(&mut self, d: &DataPaths) -> Result<Vec<crate::dispatch_sim::DispatchScenario>> {
        let p = self.scenarios_path(d);
        self.input(&p);
        read_scenarios(&p)
    }

    fn spatial_for(&mut self, n: usize) -> Result<ndarray::Array2<f64>> {
        let g = self.cfg.graph.clone();
        if let Some(path) = &g.edges {
            self.input(path);
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_path(path)
                .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
            let mut edges = Vec::new();
            for (i, rec) in rdr.deserialize::<(usize, usize, f64)>().enumerate() {
                edges.push(rec.map_err(|e| Error::Csv { row: i + 2, msg: e.to_string() })?);
            }
            return build_spatial_from_edges(&edges, n);
        }
        match (g.grid_rows, g.grid_cols) {
            (Some(r), Some(c)) if r * c == n => Ok(build_grid_adjacency(r, c)),
            (Some(r), Some(c)) => Err(Error::Config(vec![format!("graph.grid_rows × graph.grid_cols = {} but the series has {n} nodes", r * c)])),
            _ => {
                let cols = (1..=n).rev().find(|c| n % c == 0 && c * c <= n).map_or(n, |c| n / c);
                Ok(build_grid_adjacency(n / cols, cols))
            }
        }
    }

    /// Graph files from the config, else the run directory, else built
    /// from the series' training part.
    fn forecast_graph(&mut self, d: &DataPaths, ds: &SeriesDataset, train_only: bool) -> Result<AdjacencyPair> {
        let sp = d.spatial_graph.clone().or_else(|| Some(self.dir.spatial_graph()).filter(|p| p.exists() && d == &self.cfg.data));
        let se = d.semantic_graph.clone().or_else(|| Some(self.dir.semantic_graph()).filter(|p| p.exists() && d == &self.cfg.data));
        let a_sp = match sp {
            Some(p) => {
                self.input(&p);
                GraphFile::read(&p)?.to_matrix()?
            }
            None => self.spatial_for(ds.num_nodes())?,
        };
        let a_se = match se {
            Some(p) => {
                self.input(&p);
                GraphFile::read(&p)?.to_matrix()?
            }
            None => {
                let end = if train_only {
                    ((ds.len() as f64 * self.cfg.split.train_frac).round() as usize).max(2).min(ds.len())
                } else {
                    ds.len()
                };
                build_semantic(&ds.slice_steps(0, end), self.cfg.graph.semantic_degree)?
            }
        };
        if a_sp.nrows() != ds.num_nodes() || a_se.nrows() != ds.num_nodes() {
            return Err(Error::Shape(format!(
                "graphs have {} and {} nodes, series has {}",
                a_sp.nrows(),
                a_se.nrows(),
                ds.num_nodes()
            )));
        }
        AdjacencyPair::new(a_sp, a_se)
    }

    fn dispatch_split(&mut self) -> Result<(DispatchData, DispatchData)> {
        let d = self.cfg.data.clone();
        let all = self.load_scenarios(&d)?;
        let cut = ((all.len() as f64) * (self.cfg.split.train_frac + self.cfg.split.val_frac)).round() as usize;
        let cut = cut.clamp(1, all.len().saturating_sub(1).max(1));
        let (train, test) = all.split_at(cut);
        if test.is_empty() {
            return Err(Error::InvalidArgument("need at least two scenarios to split".into()));
        }
        let interval = self.cfg.scenarios.interval_minutes;
        let train = prepare_dispatch(train.to_vec(), None, None, interval)?;
        let test = prepare_dispatch(test.to_vec(), Some(train.stats.clone()), Some(train.pair.clone()), interval)?;
        Ok((train, test))
    }

    fn forecast_split(&mut self) -> Result<crate::training::ForecastSplits> {
        let d = self.cfg.data.clone();
        let ds = self.load_series(&d)?;
        let pair = self.forecast_graph(&d, &ds, true)?;
        prepare_forecast(&ds, &pair, self.cfg.history_len, self.cfg.horizon, &self.cfg.split)
    }

    fn load_model(&mut self) -> Result<Model> {
        let p = self.dir.checkpoint();
        self.input(&p);
        let (mut model, _) = load_checkpoint(&p)?;
        model.backend = self.cfg.backend(model.cfg.lm.d_model);
        Ok(model)
    }

    fn finish(mut self, command: Command, summary: Value) -> Result<CommandOutput> {
        let config_path = self.output(self.dir.config());
        write_json(&config_path, &self.cfg)?;
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            if p.exists() {
                inputs.insert(p.display().to_string(), file_sha256(p)?);
            }
        }
        let manifest = json!({
            "command": command.name(),
            "inputs": inputs,
            "outputs": self.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "versions": {
                "transllm": env!("CARGO_PKG_VERSION"),
                "checkpoint_format": CHECKPOINT_VERSION,
            },
            "summary": summary,
            "created_at": chrono::Utc::now().to_rfc3339(),
        });
        let manifest_path = self.dir.manifest();
        write_json(&manifest_path, &manifest)?;
        self.outputs.push(manifest_path);
        Ok(CommandOutput {
            command: command.name(),
            outputs: self.outputs,
            summary,
        })
    }
}

/// Applies `--seed` / `--out` overrides; the seed is shared by data
/// generation, model initialisation and training.
pub fn apply_overrides(cfg: &mut RunConfig, seed: Option<u64>, out: Option<PathBuf>) {
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
}

/// Runs `command` with a validated config.
pub fn run(command: Command, cfg: RunConfig) -> Result<CommandOutput> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let dir = RunDir::new(cfg.out_dir.clone());
    mkdir(&dir.root)?;
    let mut ctx = Ctx {
        cfg,
        dir,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let summary = match command {
        Command::Synth => cmd_synth(&mut ctx)?,
        Command::BuildGraph => cmd_build_graph(&mut ctx)?,
        Command::Train => cmd_train(&mut ctx)?,
        Command::Eval => cmd_eval(&mut ctx)?,
        Command::ZeroShot => cmd_zero_shot(&mut ctx)?,
        Command::DispatchSim => cmd_dispatch_sim(&mut ctx)?,
        Command::RouteStats => cmd_route_stats(&mut ctx)?,
    };
    ctx.finish(command, summary)
}

fn cmd_synth(ctx: &mut Ctx) -> Result<Value> {
    match ctx.cfg.task {
        TaskKind::Forecast => {
            let ds = synth_generate(&ctx.cfg.synth, ctx.cfg.seed)?;
            let p = ctx.output(ctx.dir.series());
            mkdir(p.parent().expect("has parent"))?;
            write_series(&ds, &p)?;
            let mp = ctx.output(p.with_extension("manifest.json"));
            write_manifest(&ds.manifest(), &mp)?;
            Ok(json!({"steps": ds.len(), "nodes": ds.num_nodes()}))
        }
        TaskKind::Dispatch => {
            let sc = synth_scenarios(&ctx.cfg.scenarios, ctx.cfg.seed)?;
            let p = ctx.output(ctx.dir.scenarios());
            mkdir(p.parent().expect("has parent"))?;
            write_scenarios(&p, &sc)?;
            Ok(json!({"scenarios": sc.len()}))
        }
    }
}

fn cmd_build_graph(ctx: &mut Ctx) -> Result<Value> {
    let pair = match ctx.cfg.task {
        TaskKind::Forecast => {
            let d = ctx.cfg.data.clone();
            let ds = ctx.load_series(&d)?;
            let a_sp = ctx.spatial_for(ds.num_nodes())?;
            let end = ((ds.len() as f64 * ctx.cfg.split.train_frac).round() as usize).clamp(2, ds.len());
            let a_se = build_semantic(&ds.slice_steps(0, end), ctx.cfg.graph.semantic_degree)?;
            AdjacencyPair::new(a_sp, a_se)?
        }
        TaskKind::Dispatch => ctx.dispatch_split()?.0.pair,
    };
    mkdir(&ctx.dir.root.join("graph"))?;
    let sp = ctx.output(ctx.dir.spatial_graph());
    GraphFile::from_matrix(&pair.a_sp).write(&sp)?;
    let se = ctx.output(ctx.dir.semantic_graph());
    GraphFile::from_matrix(&pair.a_se).write(&se)?;
    Ok(json!({"nodes": pair.n}))
}

fn write_routing(ctx: &mut Ctx, pool: &PromptPool, decisions: &[RouterDecision]) -> Result<()> {
    let p = ctx.output(ctx.dir.routing_stats());
    routing_stats(pool, decisions).save_csv(&p)
}

fn evaluate(ctx: &mut Ctx, model: &Model, n_p: usize) -> Result<(Value, Vec<RouterDecision>)> {
    match ctx.cfg.task {
        TaskKind::Forecast => {
            let splits = ctx.forecast_split()?;
            let (m, d) = evaluate_forecast(model, &splits.test, n_p)?;
            let base = persistence_metrics(&splits.test)?;
            Ok((json!({"model": MetricsReport::Forecast(m), "persistence": MetricsReport::Forecast(base)}), d))
        }
        TaskKind::Dispatch => {
            let (_, test) = ctx.dispatch_split()?;
            let (m, d) = evaluate_dispatch(model, &test, n_p)?;
            let mut out = json!({"model": MetricsReport::Dispatch(m)});
            for (name, kind) in [("stay_put", BaselineKind::StayPut), ("uniform", BaselineKind::Uniform)] {
                let b = evaluate_policy(|s| baseline_policy(kind, s), &test.scenarios)?;
                out[name] = serde_json::to_value(MetricsReport::Dispatch(b))?;
            }
            Ok((out, d))
        }
    }
}

fn cmd_train(ctx: &mut Ctx) -> Result<Value> {
    let pool = ctx.cfg.pool()?;
    let mut train_cfg = ctx.cfg.train.clone();
    train_cfg.seed = ctx.cfg.seed;
    let (data, nodes) = match ctx.cfg.task {
        TaskKind::Forecast => {
            let s = ctx.forecast_split()?;
            let n = s.train.nodes();
            (TaskData::Forecast(s.train), n)
        }
        TaskKind::Dispatch => (TaskData::Dispatch(ctx.dispatch_split()?.0), 9),
    };
    let mut model = Model::new(ctx.cfg.model_config(nodes), pool.clone(), ctx.cfg.seed)?;
    let log = run_schedule(&mut model, &data, &train_cfg)?;
    mkdir(&ctx.dir.logs())?;
    let lp = ctx.output(ctx.dir.logs().join("train_log.json"));
    write_json(&lp, &log)?;
    let ck = ctx.output(ctx.dir.checkpoint());
    save_checkpoint(&model, &ck, serde_json::to_value(&ctx.cfg)?)?;
    // Evaluate the reloaded model so train and eval see the same state.
    let (mut model, _) = load_checkpoint(&ck)?;
    model.backend = ctx.cfg.backend(model.cfg.lm.d_model);
    let (metrics, decisions) = evaluate(ctx, &model, model.cfg.n_patches)?;
    let mp = ctx.output(ctx.dir.metrics());
    write_json(&mp, &metrics)?;
    write_routing(ctx, &pool, &decisions)?;
    Ok(json!({"metrics": metrics, "epochs": log.epochs.len(), "stages": log.stages}))
}

fn cmd_eval(ctx: &mut Ctx) -> Result<Value> {
    let model = ctx.load_model()?;
    let (metrics, decisions) = evaluate(ctx, &model, model.cfg.n_patches)?;
    let mp = ctx.output(ctx.dir.metrics());
    write_json(&mp, &metrics)?;
    let pool = model.pool.clone();
    write_routing(ctx, &pool, &decisions)?;
    Ok(json!({"metrics": metrics}))
}

fn cmd_zero_shot(ctx: &mut Ctx) -> Result<Value> {
    if ctx.cfg.task != TaskKind::Forecast {
        return Err(Error::Unsupported("zero-shot transfer is defined for forecasting".into()));
    }
    let model = ctx.load_model()?;
    let before = model.store.hash_all();
    let d = ctx.cfg.zero_shot.data.clone();
    if d.series.is_none() {
        return Err(Error::Config(vec!["zero_shot.data.series: required for zero-shot".into()]));
    }
    let ds = ctx.load_series(&d)?;
    let pair = ctx.forecast_graph(&d, &ds, false)?;
    let data = prepare_forecast_eval(&ds, &pair, model.cfg.history_len, model.cfg.horizon, ctx.cfg.zero_shot.stride)?;
    let sweep = if ctx.cfg.zero_shot.n_patches.is_empty() {
        vec![model.cfg.n_patches]
    } else {
        ctx.cfg.zero_shot.n_patches.clone()
    };
    let mut results = serde_json::Map::new();
    for n_p in sweep {
        let (m, _) = evaluate_forecast(&model, &data, n_p)?;
        results.insert(n_p.to_string(), serde_json::to_value(MetricsReport::Forecast(m))?);
    }
    let after = model.store.hash_all();
    if before != after {
        return Err(Error::InvalidData("parameters changed during zero-shot evaluation".into()));
    }
    let metrics = json!({
        "nodes": data.nodes(),
        "by_n_patches": results,
        "persistence": MetricsReport::Forecast(persistence_metrics(&data)?),
        "parameter_hash": after,
    });
    let mp = ctx.output(ctx.dir.metrics());
    write_json(&mp, &metrics)?;
    Ok(metrics)
}

fn cmd_dispatch_sim(ctx: &mut Ctx) -> Result<Value> {
    if ctx.cfg.task != TaskKind::Dispatch {
        return Err(Error::Config(vec!["task: dispatch-sim needs task = \"dispatch\"".into()]));
    }
    let (_, test) = ctx.dispatch_split()?;
    let mut out = serde_json::Map::new();
    for (name, kind) in [
        ("stay_put", BaselineKind::StayPut),
        ("uniform", BaselineKind::Uniform),
        ("greedy_demand", BaselineKind::GreedyDemand),
    ] {
        let m = evaluate_policy(|s| baseline_policy(kind, s), &test.scenarios)?;
        out.insert(name.into(), serde_json::to_value(MetricsReport::Dispatch(m))?);
    }
    if ctx.dir.checkpoint().exists() {
        let model = ctx.load_model()?;
        let (m, _) = evaluate_dispatch(&model, &test, model.cfg.n_patches)?;
        out.insert("model".into(), serde_json::to_value(MetricsReport::Dispatch(m))?);
    }
    let metrics = Value::Object(out);
    let mp = ctx.output(ctx.dir.metrics());
    write_json(&mp, &metrics)?;
    Ok(metrics)
}

fn cmd_route_stats(ctx: &mut Ctx) -> Result<Value> {
    let model = ctx.load_model()?;
    let decisions = match ctx.cfg.task {
        TaskKind::Forecast => {
            let s = ctx.forecast_split()?;
            route_all_forecast(&model, &s.test)?
        }
        TaskKind::Dispatch => {
            let (_, test) = ctx.dispatch_split()?;
            evaluate_dispatch(&model, &test, model.cfg.n_patches)?.1
        }
    };
    let stats = routing_stats(&model.pool, &decisions);
    let p = ctx.output(ctx.dir.routing_stats());
    stats.save_csv(&p)?;
    Ok(json!({"decisions": stats.decisions, "frequencies": stats.frequencies()}))
}

fn route_all_forecast(model: &Model, data: &ForecastData) -> Result<Vec<RouterDecision>> {
    Ok(evaluate_forecast(model, data, model.cfg.n_patches)?.1)
}

/// Machine-readable error body printed by the binary on failure.
pub fn error_json(e: &Error) -> Value {
    let details: Vec<String> = match e {
        Error::Config(list) => list.clone(),
        _ => Vec::new(),
    };
    json!({"error": {"kind": e.kind(), "message": e.to_string(), "details": details}})
}

/// Raw checkpoint bytes of a model, for callers hashing artifacts.
pub fn model_digest(model: &Model) -> Result<String> {
    Ok(hex::encode(Sha256::digest(checkpoint_bytes(model, Value::Null)?)))
}
