//! Matrix-level reverse-mode automatic differentiation.
//!
//! Every value on the tape is a dense `f64` matrix. Sequences of node
//! features are stored time-major as `(T·N)×C` matrices (row `t·N + n`), so
//! temporal convolutions become row shifts and graph attention runs on
//! contiguous `N`-row blocks.
//!
//! ```
//! use ndarray::array;
//! use transllm::params::ParamStore;
//! use transllm::tape::Tape;
//!
//! let mut store = ParamStore::new();
//! let w = store.insert("w", array![[2.0], [3.0]]);
//! let mut tape = Tape::new();
//! let x = tape.constant(array![[1.0, 1.0]]);
//! let wv = tape.param(&store, w);
//! let y = tape.matmul(x, wv);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss);
//! assert_eq!(tape.scalar(loss), 5.0);
//! assert_eq!(grads.params().get(w).unwrap(), &array![[1.0], [1.0]]);
//! ```

use crate::params::{GradStore, ParamId, ParamStore};
use ndarray::{s, Array2, ArrayView2, Axis};
use std::borrow::Cow;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    /// `(T·N)×C` plus an `N×C` block repeated over T.
    AddTiled(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    ShiftRows(Var, usize),
    Gat(Box<GatSaved>),
    Matching(Var, MatchingSaved),
}

#[derive(Debug)]
struct GatSaved {
    wh: Var,
    a_src: Var,
    a_dst: Var,
    heads: usize,
    nodes: usize,
    slope: f64,
    mask: Rc<Vec<bool>>,
    /// attention weights laid out `[t][h][i][j]`
    alpha: Vec<f64>,
    /// pre-activation scores, same layout
    z: Vec<f64>,
}

#[derive(Debug)]
struct MatchingSaved {
    dm_dpi: Vec<f64>,
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Result of a backward pass: gradients for every tape value plus the
/// per-parameter view.
pub struct Grads {
    vars: Vec<Option<Array2<f64>>>,
    params: GradStore,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.vars[v.0].as_ref()
    }

    pub fn params(&self) -> &GradStore {
        &self.params
    }

    pub fn into_params(self) -> GradStore {
        self.params
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    num_params: usize,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar value");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that records its gradient (inspect it with [`Grads::wrt`]).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Borrows a parameter from the store; its gradient is reported under
    /// the same [`ParamId`].
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.num_params = self.num_params.max(store.len());
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter borrowed as a constant (frozen for this tape).
    pub fn frozen(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_nt {:?} x {:?}ᵀ", va.dim(), vb.dim());
        let out = va.dot(&vb.t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` of shape `1×C` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.dim(), (1, va.ncols()), "add_row");
        let out = va + vr;
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.dim(), (1, va.ncols()), "mul_row");
        let out = va * vr;
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// `a + col` with `col` of shape `R×1` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.dim(), (va.nrows(), 1), "add_col");
        let out = va + vc;
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::AddCol(a, col), ng)
    }

    pub fn add_tiled(&mut self, a: Var, block: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(block));
        let n = vb.nrows();
        assert!(
            n > 0 && va.nrows() % n == 0 && va.ncols() == vb.ncols(),
            "add_tiled {:?} + {:?}",
            va.dim(),
            vb.dim()
        );
        let mut out = va.clone();
        for mut chunk in out.axis_chunks_iter_mut(Axis(0), n) {
            chunk += vb;
        }
        let ng = self.ng(a) || self.ng(block);
        self.push(out, Op::AddTiled(a, block), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    /// Natural log. Callers own the `0·log 0` convention.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a).view(), None);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise softmax where masked-out (`false`) entries get probability 0.
    /// Every row must keep at least one entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Var {
        let out = softmax_rows(self.value(a).view(), Some(mask));
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let c = va.ncols() as f64;
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Array2::from_elem((1, 1), va.sum() / va.len() as f64);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Column means, `R×C → 1×C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape size");
        let flat: Vec<f64> = va.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let va = self.value(a);
        let out = va.select(Axis(0), rows);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, rows.to_vec()), ng)
    }

    /// Picks one column per row: `out[r] = a[r, cols[r]]`, shape `R×1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), cols.len(), "pick");
        let out = Array2::from_shape_fn((cols.len(), 1), |(r, _)| va[[r, cols[r]]]);
        let ng = self.ng(a);
        self.push(out, Op::Pick(a, cols.to_vec()), ng)
    }

    /// Shifts rows down by `k`, filling the top with zeros (causal delay).
    pub fn shift_rows(&mut self, a: Var, k: usize) -> Var {
        let va = self.value(a);
        let (r, c) = va.dim();
        let mut out = Array2::zeros((r, c));
        if k < r {
            out.slice_mut(s![k.., ..]).assign(&va.slice(s![..r - k, ..]));
        }
        let ng = self.ng(a);
        self.push(out, Op::ShiftRows(a, k), ng)
    }

    /// Multi-head masked graph attention over `T` blocks of `nodes` rows.
    ///
    /// `wh` is `(T·N)×(H·c)` (already linearly transformed), `a_src`/`a_dst`
    /// are `1×(H·c)`. For head `h` and block `t`, node `i` attends to every
    /// `j` with `mask[i·N + j]` using
    /// `softmax_j LeakyReLU(a_src_h·wh_i + a_dst_h·wh_j)`; heads are
    /// concatenated in the output.
    pub fn graph_attention(
        &mut self,
        wh: Var,
        a_src: Var,
        a_dst: Var,
        heads: usize,
        nodes: usize,
        mask: Rc<Vec<bool>>,
        slope: f64,
    ) -> Var {
        let vw = self.value(wh);
        let (rows, width) = vw.dim();
        assert!(heads > 0 && width % heads == 0, "gat head split");
        assert!(nodes > 0 && rows % nodes == 0, "gat node blocks");
        assert_eq!(mask.len(), nodes * nodes, "gat mask");
        assert_eq!(self.value(a_src).dim(), (1, width));
        assert_eq!(self.value(a_dst).dim(), (1, width));
        let vs = self.value(a_src);
        let vd = self.value(a_dst);
        let c = width / heads;
        let steps = rows / nodes;
        let nn = nodes * nodes;
        let mut alpha = vec![0.0; steps * heads * nn];
        let mut z = vec![0.0; steps * heads * nn];
        let mut out = Array2::zeros((rows, width));
        let mut src = vec![0.0; nodes];
        let mut dst = vec![0.0; nodes];
        for t in 0..steps {
            for h in 0..heads {
                let cols = h * c..(h + 1) * c;
                for i in 0..nodes {
                    let r = vw.row(t * nodes + i);
                    let mut ss = 0.0;
                    let mut sd = 0.0;
                    for k in cols.clone() {
                        ss += r[k] * vs[[0, k]];
                        sd += r[k] * vd[[0, k]];
                    }
                    src[i] = ss;
                    dst[i] = sd;
                }
                let base = (t * heads + h) * nn;
                for i in 0..nodes {
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..nodes {
                        if mask[i * nodes + j] {
                            let zz = src[i] + dst[j];
                            let e = if zz > 0.0 { zz } else { slope * zz };
                            z[base + i * nodes + j] = zz;
                            alpha[base + i * nodes + j] = e;
                            m = m.max(e);
                        }
                    }
                    let mut denom = 0.0;
                    for j in 0..nodes {
                        let idx = base + i * nodes + j;
                        if mask[i * nodes + j] {
                            alpha[idx] = (alpha[idx] - m).exp();
                            denom += alpha[idx];
                        } else {
                            alpha[idx] = 0.0;
                        }
                    }
                    for j in 0..nodes {
                        let idx = base + i * nodes + j;
                        if mask[i * nodes + j] {
                            alpha[idx] /= denom;
                            let a = alpha[idx];
                            for k in cols.clone() {
                                out[[t * nodes + i, k]] += a * vw[[t * nodes + j, k]];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(wh) || self.ng(a_src) || self.ng(a_dst);
        let saved = GatSaved {
            wh,
            a_src,
            a_dst,
            heads,
            nodes,
            slope,
            mask,
            alpha,
            z,
        };
        self.push(out, Op::Gat(Box::new(saved)), ng)
    }

    /// Per-vehicle matching rate of a fluid dispatch on a `1×G` proportion
    /// row: `supply_g = v0·π_g + comp_g`, `m_g = 0` without demand, `1` when
    /// demand meets an empty supply, else `min(1, demand_g / supply_g)`.
    pub fn matching_rate(&mut self, pi: Var, v0: f64, demand: &[f64], comp: &[f64]) -> Var {
        let vp = self.value(pi);
        let g = vp.ncols();
        assert_eq!(vp.nrows(), 1);
        assert!(demand.len() == g && comp.len() == g);
        let mut out = Array2::zeros((1, g));
        let mut dm = vec![0.0; g];
        for k in 0..g {
            let supply = v0 * vp[[0, k]] + comp[k];
            let (m, d) = matching_rate_scalar(v0, supply, demand[k]);
            out[[0, k]] = m;
            dm[k] = d;
        }
        let ng = self.ng(pi);
        self.push(out, Op::Matching(pi, MatchingSaved { dm_dpi: dm }), ng)
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        let mut params = GradStore::new(self.num_params);
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Grads {
            vars: grads,
            params,
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
        params: &mut GradStore,
    ) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if self.ng(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*r));
                }
                if self.ng(*r) {
                    let prod = g * self.value(*a);
                    acc(*r, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddCol(a, c) => {
                acc(*a, g.clone());
                if self.ng(*c) {
                    acc(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::AddTiled(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    let n = self.value(*b).nrows();
                    let mut gb = Array2::zeros((n, g.ncols()));
                    for chunk in g.axis_chunks_iter(Axis(0), n) {
                        gb += &chunk;
                    }
                    acc(*b, gb);
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= slope
                        }
                    });
                acc(*a, d);
            }
            Op::Log(a) => acc(*a, g / self.value(*a)),
            Op::Abs(a) => {
                let d = g * &self.value(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let gy = g * &**y;
                let rs = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, &gy - &(&**y * &rs));
            }
            Op::LogSoftmax(a) => {
                let p = node.value.mapv(f64::exp);
                let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, g - &(&p * &rs));
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let c = y.ncols() as f64;
                let mut d = Array2::zeros(y.dim());
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mg = gr.sum() / c;
                    let mgy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
                    for k in 0..y.ncols() {
                        d[[r, k]] = is * (gr[k] - mg - yr[k] * mgy);
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
            Op::Mean(a) => {
                let sh = self.shape(*a);
                acc(*a, Array2::from_elem(sh, g[[0, 0]] / (sh.0 * sh.1) as f64));
            }
            Op::MeanRows(a) => {
                let (r, _) = self.shape(*a);
                let row = g / r as f64;
                let d = row.broadcast(self.shape(*a)).expect("broadcast").to_owned();
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        acc(p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.ng(p) {
                        acc(p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                let flat: Vec<f64> = g.iter().copied().collect();
                acc(*a, Array2::from_shape_vec((r, c), flat).expect("reshape back"));
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dr = d.row_mut(r);
                    dr += &g.row(i);
                }
                acc(*a, d);
            }
            Op::Pick(a, cols) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (r, &c) in cols.iter().enumerate() {
                    d[[r, c]] += g[[r, 0]];
                }
                acc(*a, d);
            }
            Op::ShiftRows(a, k) => {
                let (r, c) = self.shape(*a);
                let mut d = Array2::zeros((r, c));
                if *k < r {
                    d.slice_mut(s![..r - k, ..]).assign(&g.slice(s![*k.., ..]));
                }
                acc(*a, d);
            }
            Op::Gat(sv) => {
                let (dwh, dsrc, ddst) = self.gat_backward(sv, g);
                acc(sv.wh, dwh);
                acc(sv.a_src, dsrc);
                acc(sv.a_dst, ddst);
            }
            Op::Matching(pi, saved) => {
                let mut d = g.clone();
                for (k, dm) in saved.dm_dpi.iter().enumerate() {
                    d[[0, k]] *= dm;
                }
                acc(*pi, d);
            }
        }
    }

    fn gat_backward(
        &self,
        sv: &GatSaved,
        g: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let vw = self.value(sv.wh);
        let vs = self.value(sv.a_src);
        let vd = self.value(sv.a_dst);
        let (rows, width) = vw.dim();
        let nodes = sv.nodes;
        let heads = sv.heads;
        let c = width / heads;
        let steps = rows / nodes;
        let nn = nodes * nodes;
        let mut dwh = Array2::zeros((rows, width));
        let mut dsrc_p = Array2::zeros((1, width));
        let mut ddst_p = Array2::zeros((1, width));
        let mut dalpha = vec![0.0; nn];
        let mut dsrc = vec![0.0; nodes];
        let mut ddst = vec![0.0; nodes];
        for t in 0..steps {
            for h in 0..heads {
                let cols = h * c..(h + 1) * c;
                let base = (t * heads + h) * nn;
                dsrc.iter_mut().for_each(|x| *x = 0.0);
                ddst.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..nodes {
                    let gi = t * nodes + i;
                    for j in 0..nodes {
                        let idx = i * nodes + j;
                        if !sv.mask[idx] {
                            dalpha[idx] = 0.0;
                            continue;
                        }
                        let a = sv.alpha[base + idx];
                        let gj = t * nodes + j;
                        let mut da = 0.0;
                        for k in cols.clone() {
                            da += g[[gi, k]] * vw[[gj, k]];
                            dwh[[gj, k]] += a * g[[gi, k]];
                        }
                        dalpha[idx] = da;
                    }
                    let dot: f64 = (0..nodes)
                        .map(|j| sv.alpha[base + i * nodes + j] * dalpha[i * nodes + j])
                        .sum();
                    for j in 0..nodes {
                        let idx = i * nodes + j;
                        if !sv.mask[idx] {
                            continue;
                        }
                        let de = sv.alpha[base + idx] * (dalpha[idx] - dot);
                        let dz = if sv.z[base + idx] > 0.0 {
                            de
                        } else {
                            de * sv.slope
                        };
                        dsrc[i] += dz;
                        ddst[j] += dz;
                    }
                }
                for i in 0..nodes {
                    let gi = t * nodes + i;
                    for k in cols.clone() {
                        dwh[[gi, k]] += dsrc[i] * vs[[0, k]] + ddst[i] * vd[[0, k]];
                        dsrc_p[[0, k]] += dsrc[i] * vw[[gi, k]];
                        ddst_p[[0, k]] += ddst[i] * vw[[gi, k]];
                    }
                }
            }
        }
        (dwh, dsrc_p, ddst_p)
    }
}

/// Scalar matching model shared by the tape op and the simulator: returns
/// `(m, dm/dπ)` for a cell with the given supply and demand.
pub(crate) fn matching_rate_scalar(v0: f64, supply: f64, demand: f64) -> (f64, f64) {
    if demand <= 0.0 {
        (0.0, 0.0)
    } else if supply <= 0.0 || demand >= supply {
        (1.0, 0.0)
    } else {
        (demand / supply, -demand * v0 / (supply * supply))
    }
}

pub(crate) fn softmax_rows(a: ArrayView2<'_, f64>, mask: Option<&[bool]>) -> Array2<f64> {
    let (r, c) = a.dim();
    let mut out = Array2::zeros((r, c));
    for i in 0..r {
        let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
        let mut m = f64::NEG_INFINITY;
        for j in 0..c {
            if keep(j) {
                m = m.max(a[[i, j]]);
            }
        }
        let mut denom = 0.0;
        for j in 0..c {
            if keep(j) {
                let e = (a[[i, j]] - m).exp();
                out[[i, j]] = e;
                denom += e;
            }
        }
        out.row_mut(i).mapv_inplace(|x| x / denom);
    }
    out
}
