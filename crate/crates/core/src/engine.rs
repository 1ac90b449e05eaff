//! Reverse-mode autodiff on an explicit tape, with byte-exact accounting of
//! the buffers retained for the backward pass.
//!
//! Recording discipline: a primitive records a tape node only when at least
//! one input lies on a gradient-requiring path and retention is enabled.
//! Inside [`Engine::detached`] nothing is recorded and outputs carry no tape
//! handle, so they re-enter later computations as constants.
//!
//! # Retention rule table
//!
//! The bytes a node retains are part of the public contract. A buffer is
//! retained only when the backward rule needs it to produce a gradient that
//! will actually propagate; buffers that are parameter values are counted at
//! zero bytes (they are alive in their store regardless).
//!
//! | primitive                 | retained for backward                        |
//! |---------------------------|----------------------------------------------|
//! | `matmul(a, b)`            | `b` if grad(a) flows; `a` if grad(b) flows    |
//! | `add`, `scale`            | nothing                                       |
//! | `mul(a, b)`               | `b` if grad(a) flows; `a` if grad(b) flows    |
//! | `transpose`, `reshape`    | nothing                                       |
//! | `concat-rows`             | nothing                                       |
//! | `softmax-rows`            | its output                                    |
//! | `layernorm(x, γ, β)`      | `x`, and `γ` (γ is a parameter: 0 bytes)      |
//! | `relu`                    | sign mask, 1 byte per element                 |
//! | `gelu`                    | its input                                     |
//! | `sigmoid`                 | its output                                    |
//! | `mean-over-axis`          | nothing                                       |
//! | `embedding-add`           | nothing                                       |
//! | `cross-entropy-w-logits`  | the softmax probabilities                     |
//! | `cosine-rows`             | both inputs                                   |
//! | `l1-normalize-rows`       | its input                                     |
//!
//! `peak_retained_bytes` tracks the running maximum of the live retained
//! total; `backward` consumes the tape and releases every retained buffer.

use crate::scalar::Scalar;
use crate::tensor::{at, NodeId, Provenance, Tensor};
use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;
use thiserror::Error;

/// Which part of the model a tape node belongs to. Owner tags are the
/// evidence mechanism for the no-backbone-backprop property: after a
/// backward pass the engine reports how many nodes of each owner it visited.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Owner {
    Backbone,
    Side,
    Head,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{kind}: shape mismatch: {detail}")]
    ShapeMismatch { kind: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is a constant (not on the tape); nothing to differentiate")]
    ConstantLoss,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

fn shape_err(kind: &'static str, detail: String) -> EngineError {
    EngineError::ShapeMismatch { kind, detail }
}

/// Primitive identifier plus its static attributes. Attributes carry no
/// gradient (cross-entropy targets, reshape target, scale constant).
#[derive(Clone, Debug)]
pub enum PrimOp<F: Scalar> {
    Matmul,
    Add,
    Mul,
    Scale(F),
    Transpose,
    Reshape(Vec<usize>),
    ConcatRows,
    SoftmaxRows,
    LayerNorm { eps: F },
    Relu,
    Gelu,
    Sigmoid,
    MeanOverAxis(usize),
    EmbeddingAdd,
    CrossEntropyWithLogits { targets: Vec<usize> },
    CosineRows,
    L1NormalizeRows,
}

impl<F: Scalar> PrimOp<F> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PrimOp::Matmul => "matmul",
            PrimOp::Add => "add",
            PrimOp::Mul => "mul",
            PrimOp::Scale(_) => "scale",
            PrimOp::Transpose => "transpose",
            PrimOp::Reshape(_) => "reshape",
            PrimOp::ConcatRows => "concat-rows",
            PrimOp::SoftmaxRows => "softmax-rows",
            PrimOp::LayerNorm { .. } => "layernorm",
            PrimOp::Relu => "relu",
            PrimOp::Gelu => "gelu",
            PrimOp::Sigmoid => "sigmoid",
            PrimOp::MeanOverAxis(_) => "mean-over-axis",
            PrimOp::EmbeddingAdd => "embedding-add",
            PrimOp::CrossEntropyWithLogits { .. } => "cross-entropy-with-logits",
            PrimOp::CosineRows => "cosine-rows",
            PrimOp::L1NormalizeRows => "l1-normalize-rows",
        }
    }
}

/// A buffer kept alive for a backward rule, with the bytes it was charged.
struct Retained<F> {
    data: Rc<Vec<F>>,
    charged: u64,
}

impl<F: Scalar> Retained<F> {
    fn of(t: &Tensor<F>) -> Self {
        let charged = match t.provenance() {
            Provenance::Param => 0,
            Provenance::Activation => t.byte_size(),
        };
        Retained {
            data: t.shared(),
            charged,
        }
    }
}

/// Backward payload per recorded node. `need_*` flags say which input
/// gradients actually propagate; buffers not needed for those are absent.
enum BackOp<F: Scalar> {
    Leaf {
        sink: Option<Rc<RefCell<Vec<F>>>>,
    },
    Matmul {
        a: Option<Retained<F>>,
        b: Option<Retained<F>>,
        m: usize,
        k: usize,
        n: usize,
        need_da: bool,
        need_db: bool,
    },
    Add {
        broadcast_b: bool,
        rows: usize,
        cols: usize,
        need_da: bool,
        need_db: bool,
    },
    Mul {
        a: Option<Retained<F>>,
        b: Option<Retained<F>>,
        a_numel: usize,
        b_numel: usize,
        need_da: bool,
        need_db: bool,
    },
    Scale {
        c: F,
    },
    Transpose {
        rows: usize,
        cols: usize,
    },
    Reshape,
    ConcatRows {
        row_counts: Vec<usize>,
        cols: usize,
        needs: Vec<bool>,
    },
    SoftmaxRows {
        y: Retained<F>,
        rows: usize,
        cols: usize,
    },
    LayerNorm {
        x: Retained<F>,
        gain: Retained<F>,
        eps: F,
        rows: usize,
        cols: usize,
        need_dx: bool,
        need_dgain: bool,
        need_dbias: bool,
    },
    Relu {
        mask: Vec<u8>,
    },
    Gelu {
        x: Retained<F>,
    },
    Sigmoid {
        y: Retained<F>,
    },
    MeanOverAxis {
        axis: usize,
        rows: usize,
        cols: usize,
    },
    EmbeddingAdd {
        x_rows: usize,
        table_rows: usize,
        cols: usize,
        need_dx: bool,
        need_dtable: bool,
    },
    CrossEntropy {
        probs: Retained<F>,
        targets: Vec<usize>,
        cols: usize,
    },
    CosineRows {
        a: Retained<F>,
        b: Retained<F>,
        rows: usize,
        cols: usize,
        need_da: bool,
        need_db: bool,
    },
    L1NormalizeRows {
        x: Retained<F>,
        rows: usize,
        cols: usize,
    },
}

struct Node<F: Scalar> {
    back: BackOp<F>,
    inputs: Vec<Option<NodeId>>,
    owner: Owner,
    layer: Option<u16>,
    retained_bytes: u64,
    grad: Option<Vec<F>>,
}

/// What one backward pass touched: node counts per owner, the set of
/// backbone layers visited, and an estimate of the arithmetic performed.
#[derive(Clone, Debug, Default)]
pub struct BackwardStats {
    pub visited_backbone: usize,
    pub visited_side: usize,
    pub visited_head: usize,
    pub visited_backbone_layers: BTreeSet<u16>,
    pub flops: u64,
}

impl BackwardStats {
    pub fn visited_total(&self) -> usize {
        self.visited_backbone + self.visited_side + self.visited_head
    }
}

/// Single-tape reverse-mode engine. One engine instance per execution
/// context; independent instances may run concurrently.
pub struct Engine<F: Scalar> {
    nodes: Vec<Node<F>>,
    detached_depth: usize,
    scope_stack: Vec<(Owner, Option<u16>)>,
    live_retained: u64,
    peak_retained: u64,
    leaf_cache: HashMap<u64, NodeId>,
    last_stats: Option<BackwardStats>,
}

impl<F: Scalar> Default for Engine<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Engine<F> {
    pub fn new() -> Self {
        Engine {
            nodes: Vec::new(),
            detached_depth: 0,
            scope_stack: vec![(Owner::Side, None)],
            live_retained: 0,
            peak_retained: 0,
            leaf_cache: HashMap::new(),
            last_stats: None,
        }
    }

    // ── scopes ──────────────────────────────────────────────────────────

    /// Run `body` with every recorded node tagged `(owner, layer)`.
    pub fn scoped<R>(
        &mut self,
        owner: Owner,
        layer: Option<u16>,
        body: impl FnOnce(&mut Self) -> R,
    ) -> R {
        self.scope_stack.push((owner, layer));
        let out = body(self);
        self.scope_stack.pop();
        out
    }

    /// No-retention scope: primitives inside record nothing and retain
    /// nothing; outputs carry no tape handle. Nesting is allowed.
    pub fn detached<R>(&mut self, body: impl FnOnce(&mut Self) -> R) -> R {
        self.detached_depth += 1;
        let out = body(self);
        self.detached_depth -= 1;
        out
    }

    pub fn is_detached(&self) -> bool {
        self.detached_depth > 0
    }

    fn current_scope(&self) -> (Owner, Option<u16>) {
        *self.scope_stack.last().expect("scope stack never empty")
    }

    // ── accounting ──────────────────────────────────────────────────────

    /// Maximum over the run of the live retained-byte total.
    pub fn peak_retained_bytes(&self) -> u64 {
        self.peak_retained
    }

    /// Retained bytes currently held by the tape.
    pub fn live_retained_bytes(&self) -> u64 {
        self.live_retained
    }

    /// Restart the peak tracker from the currently live total.
    pub fn reset_accounting(&mut self) {
        self.peak_retained = self.live_retained;
    }

    pub fn tape_len(&self) -> usize {
        self.nodes.len()
    }

    /// Stats of the most recent backward pass.
    pub fn last_backward_stats(&self) -> Option<&BackwardStats> {
        self.last_stats.as_ref()
    }

    /// Drop the tape without running backward (e.g. after an eval-only
    /// forward). Releases all retained bytes.
    pub fn clear_tape(&mut self) {
        let held: u64 = self.nodes.iter().map(|n| n.retained_bytes).sum();
        self.live_retained -= held;
        self.nodes.clear();
        self.leaf_cache.clear();
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Enter a parameter on the tape. Trainable parameters get a leaf node
    /// whose gradient accumulates into `sink`; frozen ones come back as
    /// constants. Repeat uses of the same `uid` share one leaf per tape.
    pub fn leaf(
        &mut self,
        uid: u64,
        shape: &[usize],
        value: Rc<Vec<F>>,
        trainable: bool,
        owner: Owner,
        sink: Option<Rc<RefCell<Vec<F>>>>,
    ) -> Tensor<F> {
        let tensor = Tensor::from_shared(shape.to_vec(), value, Provenance::Param);
        if !trainable || self.detached_depth > 0 {
            return tensor;
        }
        if let Some(&id) = self.leaf_cache.get(&uid) {
            return tensor.with_node(id);
        }
        let (_, layer) = self.current_scope();
        let id = self.push_node(Node {
            back: BackOp::Leaf { sink },
            inputs: vec![],
            owner,
            layer,
            retained_bytes: 0,
            grad: None,
        });
        self.leaf_cache.insert(uid, id);
        tensor.with_node(id)
    }

    fn push_node(&mut self, node: Node<F>) -> NodeId {
        self.live_retained += node.retained_bytes;
        if self.live_retained > self.peak_retained {
            self.peak_retained = self.live_retained;
        }
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    // ── primitive application ───────────────────────────────────────────

    /// Apply one primitive. Records a tape node when retention is enabled
    /// and any input is on a gradient-requiring path.
    pub fn apply(&mut self, op: PrimOp<F>, inputs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let kind = op.kind_name();
        let (shape, data) = compute_value(&op, inputs)?;
        let recording =
            self.detached_depth == 0 && inputs.iter().any(|t| t.node().is_some());
        let out = Tensor::from_vec(shape, data);
        if !recording {
            return Ok(out);
        }

        let needs: Vec<bool> = inputs.iter().map(|t| t.node().is_some()).collect();
        let input_ids: Vec<Option<NodeId>> = inputs.iter().map(|t| t.node()).collect();
        let (owner, layer) = self.current_scope();

        let back = build_backop(&op, inputs, &needs, &out)?;
        let retained_bytes = backop_retained_bytes(&back);
        let id = self.push_node(Node {
            back,
            inputs: input_ids,
            owner,
            layer,
            retained_bytes,
            grad: None,
        });
        let _ = kind;
        Ok(out.with_node(id))
    }

    // Typed wrappers; these are the surface the model code uses.

    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::Add, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: &Tensor<F>, c: F) -> Result<Tensor<F>> {
        self.apply(PrimOp::Scale(c), &[a])
    }

    pub fn transpose(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: &Tensor<F>, shape: Vec<usize>) -> Result<Tensor<F>> {
        self.apply(PrimOp::Reshape(shape), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        self.apply(PrimOp::ConcatRows, parts)
    }

    pub fn softmax_rows(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::SoftmaxRows, &[a])
    }

    pub fn layer_norm(
        &mut self,
        x: &Tensor<F>,
        gain: &Tensor<F>,
        bias: &Tensor<F>,
        eps: F,
    ) -> Result<Tensor<F>> {
        self.apply(PrimOp::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn relu(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::Relu, &[a])
    }

    pub fn gelu(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::Gelu, &[a])
    }

    pub fn sigmoid(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::Sigmoid, &[a])
    }

    pub fn mean_over_axis(&mut self, a: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
        self.apply(PrimOp::MeanOverAxis(axis), &[a])
    }

    pub fn embedding_add(&mut self, x: &Tensor<F>, table: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::EmbeddingAdd, &[x, table])
    }

    pub fn cross_entropy_with_logits(
        &mut self,
        logits: &Tensor<F>,
        targets: Vec<usize>,
    ) -> Result<Tensor<F>> {
        self.apply(PrimOp::CrossEntropyWithLogits { targets }, &[logits])
    }

    pub fn cosine_rows(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::CosineRows, &[a, b])
    }

    pub fn l1_normalize_rows(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        self.apply(PrimOp::L1NormalizeRows, &[a])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of trainable parameter
    /// leaves accumulate into their store sinks; the tape is consumed.
    pub fn backward(&mut self, loss: &Tensor<F>) -> Result<BackwardStats> {
        if loss.numel() != 1 {
            return Err(EngineError::NonScalarLoss(loss.shape().to_vec()));
        }
        let loss_id = loss.node().ok_or(EngineError::ConstantLoss)?;
        self.nodes[loss_id].grad = Some(vec![F::one()]);

        let mut stats = BackwardStats::default();
        for id in (0..=loss_id).rev() {
            let grad = match self.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            match self.nodes[id].owner {
                Owner::Backbone => {
                    stats.visited_backbone += 1;
                    if let Some(layer) = self.nodes[id].layer {
                        stats.visited_backbone_layers.insert(layer);
                    }
                }
                Owner::Side => stats.visited_side += 1,
                Owner::Head => stats.visited_head += 1,
            }
            self.propagate(id, grad, &mut stats);
        }

        self.clear_tape();
        self.last_stats = Some(stats.clone());
        Ok(stats)
    }

    fn accumulate(&mut self, target: Option<NodeId>, grad: Vec<F>) {
        let Some(id) = target else { return };
        match &mut self.nodes[id].grad {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad.iter()) {
                    *a += *g;
                }
            }
            None => self.nodes[id].grad = Some(grad),
        }
    }

    /// Compute and hand on the vector-Jacobian products of node `id`.
    /// Takes the backward payload out of the node; the tape is consumed at
    /// the end of the sweep anyway.
    fn propagate(&mut self, id: NodeId, dout: Vec<F>, stats: &mut BackwardStats) {
        let inputs = self.nodes[id].inputs.clone();
        let back = std::mem::replace(&mut self.nodes[id].back, BackOp::Leaf { sink: None });
        match back {
            BackOp::Leaf { sink } => {
                if let Some(sink) = sink {
                    let mut acc = sink.borrow_mut();
                    for (a, g) in acc.iter_mut().zip(dout.iter()) {
                        *a += *g;
                    }
                    stats.flops += dout.len() as u64;
                }
            }
            BackOp::Matmul {
                a,
                b,
                m,
                k,
                n,
                need_da,
                need_db,
            } => {
                let mut da = None;
                let mut db = None;
                if need_da {
                    // da = dout · bᵀ
                    let bd = &b.as_ref().expect("matmul retained b").data;
                    let mut g = vec![F::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dout[at(n, i, j)];
                            for kk in 0..k {
                                g[at(k, i, kk)] += d * bd[at(n, kk, j)];
                            }
                        }
                    }
                    stats.flops += 2 * (m * n * k) as u64;
                    da = Some(g);
                }
                if need_db {
                    // db = aᵀ · dout
                    let ad = &a.as_ref().expect("matmul retained a").data;
                    let mut g = vec![F::zero(); k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let v = ad[at(k, i, kk)];
                            for j in 0..n {
                                g[at(n, kk, j)] += v * dout[at(n, i, j)];
                            }
                        }
                    }
                    stats.flops += 2 * (m * n * k) as u64;
                    db = Some(g);
                }
                if let Some(g) = da {
                    self.accumulate(inputs[0], g);
                }
                if let Some(g) = db {
                    self.accumulate(inputs[1], g);
                }
            }
            BackOp::Add {
                broadcast_b,
                rows,
                cols,
                need_da,
                need_db,
            } => {
                let db = if need_db {
                    if broadcast_b {
                        let mut g = vec![F::zero(); cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                g[c] += dout[at(cols, r, c)];
                            }
                        }
                        stats.flops += (rows * cols) as u64;
                        Some(g)
                    } else {
                        Some(dout.clone())
                    }
                } else {
                    None
                };
                if need_da {
                    self.accumulate(inputs[0], dout);
                }
                if let Some(g) = db {
                    self.accumulate(inputs[1], g);
                }
            }
            BackOp::Mul {
                a,
                b,
                a_numel,
                b_numel,
                need_da,
                need_db,
            } => {
                let (an, bn) = (a_numel, b_numel);
                let out_n = dout.len();
                let mut da = None;
                let mut db = None;
                if need_da {
                    let bd = &b.as_ref().expect("mul retained b").data;
                    let mut g = vec![F::zero(); an];
                    for i in 0..out_n {
                        g[i % an] += dout[i] * bd[broadcast_index(i, bn, out_n)];
                    }
                    stats.flops += 2 * out_n as u64;
                    da = Some(g);
                }
                if need_db {
                    let ad = &a.as_ref().expect("mul retained a").data;
                    let mut g = vec![F::zero(); bn];
                    for i in 0..out_n {
                        g[broadcast_index(i, bn, out_n)] += dout[i] * ad[i % an];
                    }
                    stats.flops += 2 * out_n as u64;
                    db = Some(g);
                }
                if let Some(g) = da {
                    self.accumulate(inputs[0], g);
                }
                if let Some(g) = db {
                    self.accumulate(inputs[1], g);
                }
            }
            BackOp::Scale { c } => {
                let g: Vec<F> = dout.iter().map(|d| *d * c).collect();
                stats.flops += g.len() as u64;
                self.accumulate(inputs[0], g);
            }
            BackOp::Transpose { rows, cols } => {
                // dout has shape [cols, rows]; transpose it back.
                let mut g = vec![F::zero(); rows * cols];
                for r in 0..cols {
                    for c in 0..rows {
                        g[at(cols, c, r)] = dout[at(rows, r, c)];
                    }
                }
                stats.flops += g.len() as u64;
                self.accumulate(inputs[0], g);
            }
            BackOp::Reshape => {
                stats.flops += dout.len() as u64;
                self.accumulate(inputs[0], dout);
            }
            BackOp::ConcatRows {
                row_counts,
                cols,
                needs,
            } => {
                let mut offset = 0usize;
                let mut grads: Vec<(usize, Vec<F>)> = Vec::new();
                for (idx, (&rc, &need)) in row_counts.iter().zip(needs.iter()).enumerate() {
                    let len = rc * cols;
                    if need {
                        grads.push((idx, dout[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
                stats.flops += dout.len() as u64;
                for (idx, g) in grads {
                    self.accumulate(inputs[idx], g);
                }
            }
            BackOp::SoftmaxRows { y, rows, cols } => {
                let yd = &y.data;
                let mut g = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    let mut dot = F::zero();
                    for c in 0..cols {
                        dot += dout[at(cols, r, c)] * yd[at(cols, r, c)];
                    }
                    for c in 0..cols {
                        let i = at(cols, r, c);
                        g[i] = yd[i] * (dout[i] - dot);
                    }
                }
                stats.flops += 4 * (rows * cols) as u64;
                self.accumulate(inputs[0], g);
            }
            BackOp::LayerNorm {
                x,
                gain,
                eps,
                rows,
                cols,
                need_dx,
                need_dgain,
                need_dbias,
            } => {
                let xd = x.data;
                let gd = gain.data;
                let inv_n = F::one() / F::from_usize(cols);
                let mut dx = if need_dx {
                    Some(vec![F::zero(); rows * cols])
                } else {
                    None
                };
                let mut dgain = if need_dgain {
                    Some(vec![F::zero(); cols])
                } else {
                    None
                };
                let mut dbias = if need_dbias {
                    Some(vec![F::zero(); cols])
                } else {
                    None
                };
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let mean = row.iter().copied().sum::<F>() * inv_n;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<F>()
                        * inv_n;
                    let rstd = F::one() / (var + eps).sqrt();
                    // dxhat, plus the two row means the dx formula needs.
                    let mut mean_dxhat = F::zero();
                    let mut mean_dxhat_xhat = F::zero();
                    let mut xhat = vec![F::zero(); cols];
                    let mut dxhat = vec![F::zero(); cols];
                    for c in 0..cols {
                        let i = at(cols, r, c);
                        xhat[c] = (xd[i] - mean) * rstd;
                        dxhat[c] = dout[i] * gd[c];
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * xhat[c];
                    }
                    mean_dxhat *= inv_n;
                    mean_dxhat_xhat *= inv_n;
                    for c in 0..cols {
                        let i = at(cols, r, c);
                        if let Some(dx) = dx.as_mut() {
                            dx[i] = rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                        }
                        if let Some(dg) = dgain.as_mut() {
                            dg[c] += dout[i] * xhat[c];
                        }
                        if let Some(db) = dbias.as_mut() {
                            db[c] += dout[i];
                        }
                    }
                }
                stats.flops += 10 * (rows * cols) as u64;
                if let Some(g) = dx {
                    self.accumulate(inputs[0], g);
                }
                if let Some(g) = dgain {
                    self.accumulate(inputs[1], g);
                }
                if let Some(g) = dbias {
                    self.accumulate(inputs[2], g);
                }
            }
            BackOp::Relu { mask } => {
                let g: Vec<F> = dout
                    .iter()
                    .zip(mask.iter())
                    .map(|(d, &m)| if m != 0 { *d } else { F::zero() })
                    .collect();
                stats.flops += g.len() as u64;
                self.accumulate(inputs[0], g);
            }
            BackOp::Gelu { x } => {
                let xd = &x.data;
                let g: Vec<F> = dout
                    .iter()
                    .zip(xd.iter())
                    .map(|(d, &v)| *d * gelu_derivative(v))
                    .collect();
                stats.flops += 12 * g.len() as u64;
                self.accumulate(inputs[0], g);
            }
            BackOp::Sigmoid { y } => {
                let yd = &y.data;
                let g: Vec<F> = dout
                    .iter()
                    .zip(yd.iter())
                    .map(|(d, &v)| *d * v * (F::one() - v))
                    .collect();
                stats.flops += 2 * g.len() as u64;
                self.accumulate(inputs[0], g);
            }
            BackOp::MeanOverAxis { axis, rows, cols } => {
                let mut g = vec![F::zero(); rows * cols];
                if axis == 0 {
                    let inv = F::one() / F::from_usize(rows);
                    for r in 0..rows {
                        for c in 0..cols {
                            g[at(cols, r, c)] = dout[c] * inv;
                        }
                    }
                } else {
                    let inv = F::one() / F::from_usize(cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            g[at(cols, r, c)] = dout[r] * inv;
                        }
                    }
                }
                stats.flops += g.len() as u64;
                self.accumulate(inputs[0], g);
            }
            BackOp::EmbeddingAdd {
                x_rows,
                table_rows,
                cols,
                need_dx,
                need_dtable,
            } => {
                let dtable = if need_dtable {
                    let mut g = vec![F::zero(); table_rows * cols];
                    g[..x_rows * cols].copy_from_slice(&dout[..x_rows * cols]);
                    Some(g)
                } else {
                    None
                };
                stats.flops += dout.len() as u64;
                if need_dx {
                    self.accumulate(inputs[0], dout);
                }
                if let Some(g) = dtable {
                    self.accumulate(inputs[1], g);
                }
            }
            BackOp::CrossEntropy {
                probs,
                targets,
                cols,
            } => {
                let rows = targets.len();
                let pd = &probs.data;
                let scale = dout[0] / F::from_usize(rows);
                let mut g = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = at(cols, r, c);
                        let indicator = if c == targets[r] { F::one() } else { F::zero() };
                        g[i] = (pd[i] - indicator) * scale;
                    }
                }
                stats.flops += 3 * g.len() as u64;
                self.accumulate(inputs[0], g);
            }
            BackOp::CosineRows {
                a,
                b,
                rows,
                cols,
                need_da,
                need_db,
            } => {
                let ad = a.data;
                let bd = b.data;
                let mut da = if need_da {
                    Some(vec![F::zero(); rows * cols])
                } else {
                    None
                };
                let mut db = if need_db {
                    Some(vec![F::zero(); rows * cols])
                } else {
                    None
                };
                for r in 0..rows {
                    let ra = &ad[r * cols..(r + 1) * cols];
                    let rb = &bd[r * cols..(r + 1) * cols];
                    let dot: F = ra.iter().zip(rb.iter()).map(|(&x, &y)| x * y).sum();
                    let na = ra.iter().map(|&x| x * x).sum::<F>().sqrt();
                    let nb = rb.iter().map(|&x| x * x).sum::<F>().sqrt();
                    let denom = na * nb;
                    if denom == F::zero() {
                        continue;
                    }
                    let cosv = dot / denom;
                    let d = dout[r];
                    for c in 0..cols {
                        if let Some(da) = da.as_mut() {
                            da[at(cols, r, c)] = d * (rb[c] / denom - cosv * ra[c] / (na * na));
                        }
                        if let Some(db) = db.as_mut() {
                            db[at(cols, r, c)] = d * (ra[c] / denom - cosv * rb[c] / (nb * nb));
                        }
                    }
                }
                stats.flops += 8 * (rows * cols) as u64;
                if let Some(g) = da {
                    self.accumulate(inputs[0], g);
                }
                if let Some(g) = db {
                    self.accumulate(inputs[1], g);
                }
            }
            BackOp::L1NormalizeRows { x, rows, cols } => {
                let xd = &x.data;
                let mut g = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let s: F = row.iter().map(|&v| v.abs()).sum();
                    if s == F::zero() {
                        continue;
                    }
                    // y_j = x_j / s  ⇒  dx_j = (g_j − sgn(x_j)·Σ_i g_i y_i) / s
                    let mut dot = F::zero();
                    for c in 0..cols {
                        dot += dout[at(cols, r, c)] * row[c] / s;
                    }
                    for c in 0..cols {
                        let sgn = if row[c] > F::zero() {
                            F::one()
                        } else if row[c] < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        g[at(cols, r, c)] = (dout[at(cols, r, c)] - sgn * dot) / s;
                    }
                }
                stats.flops += 4 * (rows * cols) as u64;
                self.accumulate(inputs[0], g);
            }
        }
    }
}

/// Index of the broadcast operand `b` matching flat output index `i`.
/// Supports same-shape (`bn == out_n`), scalar (`bn == 1`) and trailing-row
/// (`out_n % bn == 0`) broadcasting.
#[inline]
fn broadcast_index(i: usize, bn: usize, out_n: usize) -> usize {
    if bn == out_n {
        i
    } else if bn == 1 {
        0
    } else {
        i % bn
    }
}

// ── forward kernels ─────────────────────────────────────────────────────

fn want_rank2<F: Scalar>(kind: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.rank() {
        1 => Ok((1, t.cols())),
        2 => Ok((t.rows(), t.cols())),
        r => Err(shape_err(kind, format!("expected rank ≤ 2, got rank {r}"))),
    }
}

fn arity<F: Scalar>(kind: &'static str, inputs: &[&Tensor<F>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(shape_err(
            kind,
            format!("expected {} inputs, got {}", n, inputs.len()),
        ));
    }
    Ok(())
}

/// Pure value computation, shared by the recording and detached paths so
/// retention can never change the math.
fn compute_value<F: Scalar>(
    op: &PrimOp<F>,
    inputs: &[&Tensor<F>],
) -> Result<(Vec<usize>, Vec<F>)> {
    let kind = op.kind_name();
    match op {
        PrimOp::Matmul => {
            arity(kind, inputs, 2)?;
            let (m, k) = want_rank2(kind, inputs[0])?;
            let (k2, n) = want_rank2(kind, inputs[1])?;
            if k != k2 {
                return Err(shape_err(
                    kind,
                    format!(
                        "inner dims differ: {:?} × {:?}",
                        inputs[0].shape(),
                        inputs[1].shape()
                    ),
                ));
            }
            let a = inputs[0].data();
            let b = inputs[1].data();
            let mut out = vec![F::zero(); m * n];
            for i in 0..m {
                for kk in 0..k {
                    let aik = a[at(k, i, kk)];
                    let brow = &b[kk * n..(kk + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
            Ok((vec![m, n], out))
        }
        PrimOp::Add => {
            arity(kind, inputs, 2)?;
            let (m, n) = want_rank2(kind, inputs[0])?;
            let (mb, nb) = want_rank2(kind, inputs[1])?;
            let a = inputs[0].data();
            let b = inputs[1].data();
            if mb == m && nb == n {
                let out: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
                Ok((inputs[0].shape().to_vec(), out))
            } else if mb == 1 && nb == n {
                let mut out = vec![F::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        out[at(n, r, c)] = a[at(n, r, c)] + b[c];
                    }
                }
                Ok((inputs[0].shape().to_vec(), out))
            } else {
                Err(shape_err(
                    kind,
                    format!("{:?} + {:?}", inputs[0].shape(), inputs[1].shape()),
                ))
            }
        }
        PrimOp::Mul => {
            arity(kind, inputs, 2)?;
            let a = inputs[0].data();
            let b = inputs[1].data();
            let (an, bn) = (a.len(), b.len());
            let ok = bn == an || bn == 1 || (an % bn == 0 && inputs[1].rows() == 1);
            if !ok {
                return Err(shape_err(
                    kind,
                    format!("{:?} ⊙ {:?}", inputs[0].shape(), inputs[1].shape()),
                ));
            }
            let out: Vec<F> = (0..an)
                .map(|i| a[i] * b[broadcast_index(i, bn, an)])
                .collect();
            Ok((inputs[0].shape().to_vec(), out))
        }
        PrimOp::Scale(c) => {
            arity(kind, inputs, 1)?;
            let out: Vec<F> = inputs[0].data().iter().map(|&x| x * *c).collect();
            Ok((inputs[0].shape().to_vec(), out))
        }
        PrimOp::Transpose => {
            arity(kind, inputs, 1)?;
            let (m, n) = want_rank2(kind, inputs[0])?;
            let a = inputs[0].data();
            let mut out = vec![F::zero(); m * n];
            for r in 0..m {
                for c in 0..n {
                    out[at(m, c, r)] = a[at(n, r, c)];
                }
            }
            Ok((vec![n, m], out))
        }
        PrimOp::Reshape(shape) => {
            arity(kind, inputs, 1)?;
            if shape.iter().product::<usize>() != inputs[0].numel() {
                return Err(shape_err(
                    kind,
                    format!("{:?} -> {:?}", inputs[0].shape(), shape),
                ));
            }
            Ok((shape.clone(), inputs[0].data().to_vec()))
        }
        PrimOp::ConcatRows => {
            if inputs.is_empty() {
                return Err(shape_err(kind, "no inputs".into()));
            }
            let cols = inputs[0].cols();
            let mut rows = 0usize;
            for t in inputs {
                if t.cols() != cols {
                    return Err(shape_err(
                        kind,
                        format!("column widths differ: {} vs {}", cols, t.cols()),
                    ));
                }
                rows += t.rows();
            }
            let mut out = Vec::with_capacity(rows * cols);
            for t in inputs {
                out.extend_from_slice(t.data());
            }
            Ok((vec![rows, cols], out))
        }
        PrimOp::SoftmaxRows => {
            arity(kind, inputs, 1)?;
            let (m, n) = want_rank2(kind, inputs[0])?;
            let a = inputs[0].data();
            let mut out = vec![F::zero(); m * n];
            for r in 0..m {
                let row = &a[r * n..(r + 1) * n];
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut denom = F::zero();
                for c in 0..n {
                    let e = (row[c] - max).exp();
                    out[at(n, r, c)] = e;
                    denom += e;
                }
                for c in 0..n {
                    out[at(n, r, c)] = out[at(n, r, c)] / denom;
                }
            }
            Ok((inputs[0].shape().to_vec(), out))
        }
        PrimOp::LayerNorm { eps } => {
            arity(kind, inputs, 3)?;
            let (m, n) = want_rank2(kind, inputs[0])?;
            let gain = inputs[1];
            let bias = inputs[2];
            if gain.numel() != n || bias.numel() != n {
                return Err(shape_err(
                    kind,
                    format!(
                        "x {:?} with gain {:?} / bias {:?}",
                        inputs[0].shape(),
                        gain.shape(),
                        bias.shape()
                    ),
                ));
            }
            let x = inputs[0].data();
            let g = gain.data();
            let b = bias.data();
            let inv_n = F::one() / F::from_usize(n);
            let mut out = vec![F::zero(); m * n];
            for r in 0..m {
                let row = &x[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<F>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
                let rstd = F::one() / (var + *eps).sqrt();
                for c in 0..n {
                    out[at(n, r, c)] = (row[c] - mean) * rstd * g[c] + b[c];
                }
            }
            Ok((inputs[0].shape().to_vec(), out))
        }
        PrimOp::Relu => {
            arity(kind, inputs, 1)?;
            let out: Vec<F> = inputs[0]
                .data()
                .iter()
                .map(|&x| if x > F::zero() { x } else { F::zero() })
                .collect();
            Ok((inputs[0].shape().to_vec(), out))
        }
        PrimOp::Gelu => {
            arity(kind, inputs, 1)?;
            let out: Vec<F> = inputs[0].data().iter().map(|&x| gelu_value(x)).collect();
            Ok((inputs[0].shape().to_vec(), out))
        }
        PrimOp::Sigmoid => {
            arity(kind, inputs, 1)?;
            let out: Vec<F> = inputs[0]
                .data()
                .iter()
                .map(|&x| F::one() / (F::one() + (-x).exp()))
                .collect();
            Ok((inputs[0].shape().to_vec(), out))
        }
        PrimOp::MeanOverAxis(axis) => {
            arity(kind, inputs, 1)?;
            let (m, n) = want_rank2(kind, inputs[0])?;
            if *axis > 1 {
                return Err(shape_err(kind, format!("axis {axis} out of range")));
            }
            let a = inputs[0].data();
            if *axis == 0 {
                let inv = F::one() / F::from_usize(m);
                let mut out = vec![F::zero(); n];
                for r in 0..m {
                    for c in 0..n {
                        out[c] += a[at(n, r, c)];
                    }
                }
                for v in out.iter_mut() {
                    *v *= inv;
                }
                Ok((vec![1, n], out))
            } else {
                let inv = F::one() / F::from_usize(n);
                let mut out = vec![F::zero(); m];
                for r in 0..m {
                    let mut s = F::zero();
                    for c in 0..n {
                        s += a[at(n, r, c)];
                    }
                    out[r] = s * inv;
                }
                Ok((vec![m, 1], out))
            }
        }
        PrimOp::EmbeddingAdd => {
            arity(kind, inputs, 2)?;
            let (m, n) = want_rank2(kind, inputs[0])?;
            let (tm, tn) = want_rank2(kind, inputs[1])?;
            if tn != n || tm < m {
                return Err(shape_err(
                    kind,
                    format!(
                        "x {:?} with table {:?}",
                        inputs[0].shape(),
                        inputs[1].shape()
                    ),
                ));
            }
            let x = inputs[0].data();
            let t = inputs[1].data();
            let out: Vec<F> = (0..m * n).map(|i| x[i] + t[i]).collect();
            Ok((inputs[0].shape().to_vec(), out))
        }
        PrimOp::CrossEntropyWithLogits { targets } => {
            arity(kind, inputs, 1)?;
            let (m, n) = want_rank2(kind, inputs[0])?;
            if targets.len() != m {
                return Err(shape_err(
                    kind,
                    format!("{} logit rows vs {} targets", m, targets.len()),
                ));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= n) {
                return Err(shape_err(
                    kind,
                    format!("target class {t} out of range for {n} classes"),
                ));
            }
            let a = inputs[0].data();
            let mut loss = F::zero();
            for r in 0..m {
                let row = &a[r * n..(r + 1) * n];
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
                loss += lse - row[targets[r]];
            }
            loss = loss / F::from_usize(m);
            Ok((vec![1], vec![loss]))
        }
        PrimOp::CosineRows => {
            arity(kind, inputs, 2)?;
            let (m, n) = want_rank2(kind, inputs[0])?;
            let (mb, nb) = want_rank2(kind, inputs[1])?;
            if m != mb || n != nb {
                return Err(shape_err(
                    kind,
                    format!("{:?} vs {:?}", inputs[0].shape(), inputs[1].shape()),
                ));
            }
            let a = inputs[0].data();
            let b = inputs[1].data();
            let mut out = vec![F::zero(); m];
            for r in 0..m {
                let ra = &a[r * n..(r + 1) * n];
                let rb = &b[r * n..(r + 1) * n];
                let dot: F = ra.iter().zip(rb.iter()).map(|(&x, &y)| x * y).sum();
                let na = ra.iter().map(|&x| x * x).sum::<F>().sqrt();
                let nb_ = rb.iter().map(|&x| x * x).sum::<F>().sqrt();
                out[r] = if na == F::zero() || nb_ == F::zero() {
                    F::zero()
                } else {
                    dot / (na * nb_)
                };
            }
            Ok((vec![m, 1], out))
        }
        PrimOp::L1NormalizeRows => {
            arity(kind, inputs, 1)?;
            let (m, n) = want_rank2(kind, inputs[0])?;
            let a = inputs[0].data();
            let mut out = vec![F::zero(); m * n];
            for r in 0..m {
                let row = &a[r * n..(r + 1) * n];
                let s: F = row.iter().map(|&v| v.abs()).sum();
                if s > F::zero() {
                    for c in 0..n {
                        out[at(n, r, c)] = row[c] / s;
                    }
                }
                // all-zero rows stay zero
            }
            Ok((inputs[0].shape().to_vec(), out))
        }
    }
}

/// Build the backward payload, retaining exactly the buffers the rule table
/// prescribes for the gradients that will flow.
fn build_backop<F: Scalar>(
    op: &PrimOp<F>,
    inputs: &[&Tensor<F>],
    needs: &[bool],
    out: &Tensor<F>,
) -> Result<BackOp<F>> {
    let kind = op.kind_name();
    Ok(match op {
        PrimOp::Matmul => {
            let (m, k) = want_rank2(kind, inputs[0])?;
            let (_, n) = want_rank2(kind, inputs[1])?;
            BackOp::Matmul {
                a: needs[1].then(|| Retained::of(inputs[0])),
                b: needs[0].then(|| Retained::of(inputs[1])),
                m,
                k,
                n,
                need_da: needs[0],
                need_db: needs[1],
            }
        }
        PrimOp::Add => {
            let (m, n) = want_rank2(kind, inputs[0])?;
            let (mb, _) = want_rank2(kind, inputs[1])?;
            BackOp::Add {
                broadcast_b: mb == 1 && m != 1,
                rows: m,
                cols: n,
                need_da: needs[0],
                need_db: needs[1],
            }
        }
        PrimOp::Mul => BackOp::Mul {
            a: needs[1].then(|| Retained::of(inputs[0])),
            b: needs[0].then(|| Retained::of(inputs[1])),
            a_numel: inputs[0].numel(),
            b_numel: inputs[1].numel(),
            need_da: needs[0],
            need_db: needs[1],
        },
        PrimOp::Scale(c) => BackOp::Scale { c: *c },
        PrimOp::Transpose => {
            let (m, n) = want_rank2(kind, inputs[0])?;
            BackOp::Transpose { rows: m, cols: n }
        }
        PrimOp::Reshape(_) => BackOp::Reshape,
        PrimOp::ConcatRows => BackOp::ConcatRows {
            row_counts: inputs.iter().map(|t| t.rows()).collect(),
            cols: inputs[0].cols(),
            needs: needs.to_vec(),
        },
        PrimOp::SoftmaxRows => {
            let (m, n) = want_rank2(kind, inputs[0])?;
            BackOp::SoftmaxRows {
                y: Retained::of(out),
                rows: m,
                cols: n,
            }
        }
        PrimOp::LayerNorm { eps } => {
            let (m, n) = want_rank2(kind, inputs[0])?;
            BackOp::LayerNorm {
                x: Retained::of(inputs[0]),
                gain: Retained::of(inputs[1]),
                eps: *eps,
                rows: m,
                cols: n,
                need_dx: needs[0],
                need_dgain: needs[1],
                need_dbias: needs[2],
            }
        }
        PrimOp::Relu => BackOp::Relu {
            mask: inputs[0]
                .data()
                .iter()
                .map(|&x| u8::from(x > F::zero()))
                .collect(),
        },
        PrimOp::Gelu => BackOp::Gelu {
            x: Retained::of(inputs[0]),
        },
        PrimOp::Sigmoid => BackOp::Sigmoid {
            y: Retained::of(out),
        },
        PrimOp::MeanOverAxis(axis) => {
            let (m, n) = want_rank2(kind, inputs[0])?;
            BackOp::MeanOverAxis {
                axis: *axis,
                rows: m,
                cols: n,
            }
        }
        PrimOp::EmbeddingAdd => {
            let (m, n) = want_rank2(kind, inputs[0])?;
            let (tm, _) = want_rank2(kind, inputs[1])?;
            BackOp::EmbeddingAdd {
                x_rows: m,
                table_rows: tm,
                cols: n,
                need_dx: needs[0],
                need_dtable: needs[1],
            }
        }
        PrimOp::CrossEntropyWithLogits { targets } => {
            let (m, n) = want_rank2(kind, inputs[0])?;
            // Recompute the probabilities once; the loss value itself does
            // not keep them.
            let a = inputs[0].data();
            let mut probs = vec![F::zero(); m * n];
            for r in 0..m {
                let row = &a[r * n..(r + 1) * n];
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut denom = F::zero();
                for c in 0..n {
                    let e = (row[c] - max).exp();
                    probs[at(n, r, c)] = e;
                    denom += e;
                }
                for c in 0..n {
                    probs[at(n, r, c)] = probs[at(n, r, c)] / denom;
                }
            }
            BackOp::CrossEntropy {
                probs: Retained {
                    data: Rc::new(probs),
                    charged: (m * n) as u64 * F::BYTES,
                },
                targets: targets.clone(),
                cols: n,
            }
        }
        PrimOp::CosineRows => {
            let (m, n) = want_rank2(kind, inputs[0])?;
            BackOp::CosineRows {
                a: Retained::of(inputs[0]),
                b: Retained::of(inputs[1]),
                rows: m,
                cols: n,
                need_da: needs[0],
                need_db: needs[1],
            }
        }
        PrimOp::L1NormalizeRows => {
            let (m, n) = want_rank2(kind, inputs[0])?;
            BackOp::L1NormalizeRows {
                x: Retained::of(inputs[0]),
                rows: m,
                cols: n,
            }
        }
    })
}

fn backop_retained_bytes<F: Scalar>(back: &BackOp<F>) -> u64 {
    match back {
        BackOp::Leaf { .. } => 0,
        BackOp::Matmul { a, b, .. } | BackOp::Mul { a, b, .. } => {
            a.as_ref().map_or(0, |r| r.charged) + b.as_ref().map_or(0, |r| r.charged)
        }
        BackOp::Add { .. }
        | BackOp::Scale { .. }
        | BackOp::Transpose { .. }
        | BackOp::Reshape { .. }
        | BackOp::ConcatRows { .. }
        | BackOp::MeanOverAxis { .. }
        | BackOp::EmbeddingAdd { .. } => 0,
        BackOp::SoftmaxRows { y, .. } => y.charged,
        BackOp::LayerNorm { x, gain, .. } => x.charged + gain.charged,
        BackOp::Relu { mask } => mask.len() as u64,
        BackOp::Gelu { x } => x.charged,
        BackOp::Sigmoid { y } => y.charged,
        BackOp::CrossEntropy { probs, .. } => probs.charged,
        BackOp::CosineRows { a, b, .. } => a.charged + b.charged,
        BackOp::L1NormalizeRows { x, .. } => x.charged,
    }
}

// tanh-form GELU; forward and derivative must agree exactly for the
// finite-difference oracle.
fn gelu_value<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/π)
    let a = F::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    let half = F::from_f64(0.5);
    half * x * (F::one() + u.tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4);
    let a = F::from_f64(0.044715);
    let three = F::from_f64(3.0);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
    }

    /// Mark a constant as a trainable leaf with a sink; returns the sink.
    fn leaf(
        eng: &mut Engine<f64>,
        uid: u64,
        shape: &[usize],
        data: &[f64],
    ) -> (Tensor<f64>, Rc<RefCell<Vec<f64>>>) {
        let sink = Rc::new(RefCell::new(vec![0.0; data.len()]));
        let value = Rc::new(data.to_vec());
        let tensor = eng.leaf(uid, shape, value, true, Owner::Side, Some(Rc::clone(&sink)));
        (tensor, sink)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut eng = Engine::<f64>::new();
        let x = t(&[1, 2], &[0.0, 0.0]);
        let y = eng.softmax_rows(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut eng = Engine::<f64>::new();
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2, 1], &[3.0, 4.0]);
        let y = eng.matmul(&i2, &v).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn layernorm_hand_computed() {
        // x = [1, 3], μ = 2, σ² = 1: (x−μ)/√(1+1e-5) = ∓0.999995…
        let mut eng = Engine::<f64>::new();
        let x = t(&[1, 2], &[1.0, 3.0]);
        let g = t(&[1, 2], &[1.0, 1.0]);
        let b = t(&[1, 2], &[0.0, 0.0]);
        let y = eng.layer_norm(&x, &g, &b, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        // loss = Σ w·x with w trainable, x constant ⇒ grad(w) = x.
        let mut eng = Engine::<f64>::new();
        let (w, sink) = leaf(&mut eng, 1, &[1, 3], &[0.5, -1.0, 2.0]);
        let x = t(&[3, 1], &[3.0, 4.0, 5.0]);
        let y = eng.matmul(&w, &x).unwrap(); // [1,1]
        let loss = eng.reshape(&y, vec![1]).unwrap();
        eng.backward(&loss).unwrap();
        assert_eq!(&*sink.borrow(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn detached_scope_records_nothing_and_matches_bitwise() {
        let mut eng = Engine::<f64>::new();
        let x = t(&[2, 2], &[0.3, -0.7, 1.1, 0.2]);
        let (w, _sink) = leaf(&mut eng, 7, &[2, 2], &[0.1, 0.2, -0.4, 0.9]);

        let on_tape = {
            let y = eng.matmul(&x, &w).unwrap();
            eng.gelu(&y).unwrap()
        };
        assert!(eng.tape_len() > 0);
        assert!(eng.peak_retained_bytes() > 0);

        let mut eng2 = Engine::<f64>::new();
        let w_const = t(&[2, 2], &[0.1, 0.2, -0.4, 0.9]);
        let off_tape = eng2.detached(|e| {
            let y = e.matmul(&x, &w_const).unwrap();
            e.gelu(&y).unwrap()
        });
        assert_eq!(eng2.tape_len(), 0);
        assert_eq!(eng2.peak_retained_bytes(), 0);
        assert!(off_tape.is_const());
        for (a, b) in on_tape.data().iter().zip(off_tape.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "retention changed the math");
        }
    }

    #[test]
    fn nested_detached_scopes_still_record_nothing() {
        let mut eng = Engine::<f64>::new();
        let (w, _s) = leaf(&mut eng, 3, &[1, 2], &[1.0, 2.0]);
        eng.detached(|e| {
            e.detached(|e2| {
                let y = e2.relu(&w).unwrap();
                assert!(y.is_const());
            });
            assert!(e.is_detached());
        });
        assert_eq!(eng.tape_len(), 1); // only the leaf itself
        assert_eq!(eng.peak_retained_bytes(), 0);
    }

    #[test]
    fn matmul_retention_charges_one_input() {
        // f32, 4×5 constant activation times a trainable 5×2 parameter:
        // only the 4×5 input is needed (for grad of the parameter) = 80 B.
        let mut eng = Engine::<f32>::new();
        let x = Tensor::<f32>::from_vec(vec![4, 5], vec![1.0; 20]);
        let sink = Rc::new(RefCell::new(vec![0.0f32; 10]));
        let w = eng.leaf(
            11,
            &[5, 2],
            Rc::new(vec![0.5f32; 10]),
            true,
            Owner::Side,
            Some(sink),
        );
        let _y = eng.matmul(&x, &w).unwrap();
        assert_eq!(eng.peak_retained_bytes(), 80);
    }

    #[test]
    fn no_grad_ops_record_nothing() {
        let mut eng = Engine::<f64>::new();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = eng.gelu(&x).unwrap();
        assert!(y.is_const());
        assert_eq!(eng.tape_len(), 0);
        assert_eq!(eng.peak_retained_bytes(), 0);
    }

    #[test]
    fn peak_is_max_over_sequential_runs_without_reset() {
        let mut eng = Engine::<f64>::new();
        // run 1: big retention
        let (w, _s) = leaf(&mut eng, 1, &[8, 8], &[0.1; 64]);
        let x = t(&[8, 8], &[1.0; 64]);
        let y = eng.matmul(&x, &w).unwrap();
        let m = eng.mean_over_axis(&y, 0).unwrap();
        let m2 = eng.mean_over_axis(&m, 1).unwrap();
        let loss = eng.reshape(&m2, vec![1]).unwrap();
        eng.backward(&loss).unwrap();
        let peak1 = eng.peak_retained_bytes();
        assert_eq!(eng.live_retained_bytes(), 0);

        // run 2: smaller retention; peak must not move.
        let (w2, _s2) = leaf(&mut eng, 2, &[2, 2], &[0.1; 4]);
        let x2 = t(&[2, 2], &[1.0; 4]);
        let y2 = eng.matmul(&x2, &w2).unwrap();
        let m = eng.mean_over_axis(&y2, 0).unwrap();
        let m2 = eng.mean_over_axis(&m, 1).unwrap();
        let loss2 = eng.reshape(&m2, vec![1]).unwrap();
        eng.backward(&loss2).unwrap();
        assert_eq!(eng.peak_retained_bytes(), peak1);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut eng = Engine::<f64>::new();
        let (w, _s) = leaf(&mut eng, 1, &[1, 2], &[1.0, 2.0]);
        let y = eng.relu(&w).unwrap();
        let err = eng.backward(&y).unwrap_err();
        assert!(matches!(err, EngineError::NonScalarLoss(_)));
    }

    #[test]
    fn shape_mismatch_names_kind_and_shapes() {
        let mut eng = Engine::<f64>::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let err = eng.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn frozen_leaf_is_constant() {
        let mut eng = Engine::<f64>::new();
        let w = eng.leaf(5, &[1, 2], Rc::new(vec![1.0, 2.0]), false, Owner::Backbone, None);
        assert!(w.is_const());
        assert_eq!(eng.tape_len(), 0);
    }

    #[test]
    fn owner_visit_stats_track_regions() {
        let mut eng = Engine::<f64>::new();
        let x = t(&[1, 2], &[1.0, -2.0]);
        let (w, _s) = leaf(&mut eng, 1, &[2, 1], &[0.3, 0.4]);
        let y = eng.scoped(Owner::Backbone, Some(3), |e| e.matmul(&x, &w).unwrap());
        let loss = eng.scoped(Owner::Head, None, |e| e.reshape(&y, vec![1]).unwrap());
        let stats = eng.backward(&loss).unwrap();
        assert_eq!(stats.visited_backbone, 1);
        assert_eq!(stats.visited_head, 1);
        assert_eq!(stats.visited_side, 1); // the leaf, recorded in default scope
        assert_eq!(
            stats.visited_backbone_layers.iter().copied().collect::<Vec<_>>(),
            vec![3]
        );
    }

    #[test]
    fn l1_normalize_keeps_zero_rows() {
        let mut eng = Engine::<f64>::new();
        let x = t(&[2, 2], &[3.0, 1.0, 0.0, 0.0]);
        let y = eng.l1_normalize_rows(&x).unwrap();
        assert_eq!(y.data(), &[0.75, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut eng = Engine::<f64>::new();
        let logits = t(&[1, 4], &[0.0; 4]);
        let loss = eng
            .cross_entropy_with_logits(&logits, vec![2])
            .unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }
}
