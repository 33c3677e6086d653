//! Dual-branch spatiotemporal encoder.
//!
//! Each branch stacks ST-Blocks of the form `TCN → (+ node embedding) → GAT
//! → TCN` over its own adjacency; the spatial and semantic branches share the
//! input but not parameters. A learned projection across the time axis maps
//! the `K` encoded steps onto the `T`-step horizon and the branches are
//! concatenated along channels.

use crate::data_io::{WindowSample, CLOCK_CHANNELS};
use crate::error::{Error, Result};
use crate::graph::AdjacencyPair;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    /// Channel width `D` of every block.
    pub d: usize,
    pub kernel: usize,
    /// Dilations of the two TCNs inside each block.
    pub dilations: Vec<usize>,
    pub gat_heads: usize,
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            d: 64,
            kernel: 2,
            dilations: vec![1, 2],
            gat_heads: 4,
            leaky_slope: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_blocks == 0 {
            errs.push("encoder.n_blocks must be >= 1".into());
        }
        if self.d == 0 || self.gat_heads == 0 || self.d % self.gat_heads != 0 {
            errs.push("encoder.d must be a positive multiple of encoder.gat_heads".into());
        }
        if self.kernel == 0 {
            errs.push("encoder.kernel must be >= 1".into());
        }
        if self.dilations.len() != 2 || self.dilations.contains(&0) {
            errs.push("encoder.dilations must hold two positive values".into());
        }
        errs
    }
}

/// Causal dilated convolution over time, applied per node.
///
/// Kernel tap `j` multiplies the input delayed by `(kernel-1-j)·dilation`
/// steps, so the last tap sees the current step. Output is
/// `ReLU(conv + b)`, plus the input when `residual` is set.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub taps: Vec<ParamId>,
    pub bias: ParamId,
    pub dilation: usize,
    pub residual: bool,
}

impl TemporalConv {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel;
        let taps = (0..kernel)
            .map(|j| store.insert_uniform(format!("{name}.w{j}"), (c_in, c_out), fan_in, rng))
            .collect();
        let bias = store.insert_uniform(format!("{name}.b"), (1, c_out), fan_in, rng);
        Self {
            taps,
            bias,
            dilation,
            residual: c_in == c_out,
        }
    }

    /// `x` is `(T·N)×C`, time-major.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, nodes: usize) -> Var {
        let kernel = self.taps.len();
        let mut acc: Option<Var> = None;
        for (j, &w) in self.taps.iter().enumerate() {
            let delay = (kernel - 1 - j) * self.dilation;
            let xs = if delay == 0 { x } else { tape.shift_rows(x, delay * nodes) };
            let wv = tape.param(store, w);
            let term = tape.matmul(xs, wv);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        let b = tape.param(store, self.bias);
        let y = tape.add_row(acc.expect("kernel >= 1"), b);
        let y = tape.relu(y);
        if self.residual {
            tape.add(y, x)
        } else {
            y
        }
    }
}

/// Masked multi-head graph attention applied independently per time step.
#[derive(Debug, Clone)]
pub struct GraphAttention {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
    pub heads: usize,
    pub slope: f64,
}

impl GraphAttention {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        heads: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let head_dim = c_out / heads;
        Self {
            w: store.insert_uniform(format!("{name}.w"), (c_in, c_out), c_in, rng),
            a_src: store.insert_uniform(format!("{name}.a_src"), (1, c_out), 2 * head_dim, rng),
            a_dst: store.insert_uniform(format!("{name}.a_dst"), (1, c_out), 2 * head_dim, rng),
            heads,
            slope,
        }
    }

    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        mask: &Rc<Vec<bool>>,
        nodes: usize,
    ) -> Var {
        let w = tape.param(store, self.w);
        let wh = tape.matmul(x, w);
        let s = tape.param(store, self.a_src);
        let d = tape.param(store, self.a_dst);
        tape.graph_attention(wh, s, d, self.heads, nodes, mask.clone(), self.slope)
    }
}

/// Attention mask: neighbours with nonzero weight plus the diagonal.
pub fn attention_mask(a: &Array2<f64>) -> Rc<Vec<bool>> {
    let n = a.nrows();
    Rc::new(
        (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                i == j || a[[i, j]] != 0.0
            })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct StBlock {
    pub tcn_in: TemporalConv,
    /// Node meta embedding table `N×D`.
    pub node_embedding: ParamId,
    pub gat: GraphAttention,
    pub tcn_out: TemporalConv,
}

impl StBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        nodes: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d;
        Self {
            tcn_in: TemporalConv::init(store, &format!("{name}.tcn_in"), c_in, d, cfg.kernel, cfg.dilations[0], rng),
            node_embedding: store.insert_uniform(format!("{name}.node_emb"), (nodes, d), d, rng),
            gat: GraphAttention::init(store, &format!("{name}.gat"), d, d, cfg.gat_heads, cfg.leaky_slope, rng),
            tcn_out: TemporalConv::init(store, &format!("{name}.tcn_out"), d, d, cfg.kernel, cfg.dilations[1], rng),
        }
    }

    /// `TCN(GAT(TCN(x) + φ, A))`. When the graph has a different node count
    /// than the embedding table (zero-shot transfer), every node receives
    /// the mean embedding row.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        mask: &Rc<Vec<bool>>,
        nodes: usize,
    ) -> Var {
        let h = self.tcn_in.forward(tape, store, x, nodes);
        let mut phi = tape.param(store, self.node_embedding);
        if store.get(self.node_embedding).nrows() != nodes {
            let mean = tape.mean_rows(phi);
            phi = tape.gather_rows(mean, &vec![0; nodes]);
        }
        let h = tape.add_tiled(h, phi);
        let h = self.gat.forward(tape, store, h, mask, nodes);
        self.tcn_out.forward(tape, store, h, nodes)
    }
}

#[derive(Debug, Clone)]
pub struct TimeProjection {
    /// `T×K`
    pub weight: ParamId,
    /// `T×1`
    pub bias: ParamId,
}

impl TimeProjection {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, nodes: usize) -> Var {
        let (rows, c) = tape.shape(x);
        let k = rows / nodes;
        let t = store.get(self.weight).nrows();
        let m = tape.reshape(x, k, nodes * c);
        let w = tape.param(store, self.weight);
        let y = tape.matmul(w, m);
        let b = tape.param(store, self.bias);
        let y = tape.add_col(y, b);
        tape.reshape(y, t * nodes, c)
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub blocks: Vec<StBlock>,
    pub time_proj: TimeProjection,
}

/// Tape handles for one encoder pass. All sequences are time-major
/// `(steps·N)×channels`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub h_sp: Var,
    pub h_se: Var,
    /// `T·N × 2D`
    pub h_f: Var,
    /// Branch outputs before the time projection, concatenated: `K·N × 2D`.
    pub h_hist: Var,
    pub nodes: usize,
}

/// Materialised encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h_sp: Array3<f64>,
    pub h_se: Array3<f64>,
    pub h_f: Array3<f64>,
    pub h_hist: Array3<f64>,
}

fn to_array3(m: &Array2<f64>, nodes: usize) -> Array3<f64> {
    let (rows, c) = m.dim();
    Array3::from_shape_vec((rows / nodes, nodes, c), m.iter().copied().collect()).expect("time-major layout")
}

impl EncoderVars {
    pub fn materialize(&self, tape: &Tape<'_>) -> EncoderOutput {
        EncoderOutput {
            h_sp: to_array3(tape.value(self.h_sp), self.nodes),
            h_se: to_array3(tape.value(self.h_se), self.nodes),
            h_f: to_array3(tape.value(self.h_f), self.nodes),
            h_hist: to_array3(tape.value(self.h_hist), self.nodes),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StEncoder {
    pub cfg: EncoderConfig,
    pub in_channels: usize,
    pub history_len: usize,
    pub horizon: usize,
    pub spatial: Branch,
    pub semantic: Branch,
}

impl StEncoder {
    /// Registers parameters under `encoder.sp.*` and `encoder.se.*`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        in_channels: usize,
        nodes: usize,
        history_len: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut branch = |tag: &str, rng: &mut R| {
            let blocks = (0..cfg.n_blocks)
                .map(|b| {
                    let c_in = if b == 0 { in_channels } else { cfg.d };
                    StBlock::init(store, &format!("encoder.{tag}.{b}"), c_in, nodes, cfg, rng)
                })
                .collect();
            let time_proj = TimeProjection {
                weight: store.insert_uniform(format!("encoder.{tag}.time_proj.w"), (horizon, history_len), history_len, rng),
                bias: store.insert_zeros(format!("encoder.{tag}.time_proj.b"), (horizon, 1)),
            };
            Branch { blocks, time_proj }
        };
        let spatial = branch("sp", rng);
        let semantic = branch("se", rng);
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            history_len,
            horizon,
            spatial,
            semantic,
        })
    }

    fn run_branch<'a>(
        &self,
        branch: &Branch,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        mask: &Rc<Vec<bool>>,
        nodes: usize,
    ) -> (Var, Var) {
        let mut h = x;
        for block in &branch.blocks {
            h = block.forward(tape, store, h, mask, nodes);
        }
        let projected = branch.time_proj.forward(tape, store, h, nodes);
        (h, projected)
    }

    /// Encodes a `(K·N)×F′` time-major input (see [`build_input`]).
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        pair: &AdjacencyPair,
    ) -> Result<EncoderVars> {
        let nodes = pair.n;
        let (rows, c) = tape.shape(x);
        if rows != self.history_len * nodes {
            return Err(Error::Shape(format!(
                "encoder input has {rows} rows, expected K·N = {}·{nodes}",
                self.history_len
            )));
        }
        if c != self.in_channels {
            return Err(Error::Shape(format!("encoder input has {c} channels, expected {}", self.in_channels)));
        }
        let m_sp = attention_mask(&pair.a_sp);
        let m_se = attention_mask(&pair.a_se);
        let (hist_sp, h_sp) = self.run_branch(&self.spatial, tape, store, x, &m_sp, nodes);
        let (hist_se, h_se) = self.run_branch(&self.semantic, tape, store, x, &m_se, nodes);
        let h_f = tape.concat_cols(&[h_sp, h_se]);
        let h_hist = tape.concat_cols(&[hist_sp, hist_se]);
        Ok(EncoderVars {
            h_sp,
            h_se,
            h_f,
            h_hist,
            nodes,
        })
    }

    /// Convenience wrapper producing materialised tensors.
    pub fn encode(&self, store: &ParamStore, x: &Array2<f64>, pair: &AdjacencyPair) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.forward(&mut tape, store, xv, pair)?;
        Ok(vars.materialize(&tape))
    }
}

/// Stacks normalised history `K×N×F` and clock `K×8` into the time-major
/// `(K·N)×(F+8)` encoder input.
pub fn build_input(history: &Array3<f64>, clock: &Array2<f64>) -> Array2<f64> {
    let (k, n, f) = history.dim();
    assert_eq!(clock.dim(), (k, CLOCK_CHANNELS));
    let mut out = Array2::zeros((k * n, f + CLOCK_CHANNELS));
    for t in 0..k {
        for node in 0..n {
            let r = t * n + node;
            for j in 0..f {
                out[[r, j]] = history[[t, node, j]];
            }
            for j in 0..CLOCK_CHANNELS {
                out[[r, f + j]] = clock[[t, j]];
            }
        }
    }
    out
}

pub fn window_input(w: &WindowSample) -> Array2<f64> {
    build_input(&w.history, &w.clock)
}
