//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every forward operation appends a node to the [`Tape`]. Node ids are
//! assigned in creation order, which is a topological order of the graph, so
//! [`Tape::backward`] walks ids downwards and visits each reachable node once.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::time::Instant;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Sqrt,
    Softplus,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(usize, Unary),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout(usize, Vec<T>),
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    GroupMax {
        x: usize,
        argmax: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Transpose(usize),
    L2NormalizeRows {
        x: usize,
        norms: Vec<T>,
    },
    Reshape(usize),
    SoftCrossEntropy {
        logits: usize,
        target: Vec<T>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(_, u) => match u {
                Unary::Relu => "relu",
                Unary::Sigmoid => "sigmoid",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Abs => "abs",
                Unary::Sqrt => "sqrt",
                Unary::Softplus => "softplus",
            },
            Op::Maximum(..) => "maximum",
            Op::Minimum(..) => "minimum",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout(..) => "dropout",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::GroupMax { .. } => "group_max",
            Op::Attention { .. } => "attention",
            Op::Transpose(..) => "transpose",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::Reshape(..) => "reshape",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Confined to one execution context.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    mode: Mode,
    rng: RefCell<ChaCha8Rng>,
    captured: RefCell<Vec<Arc<Tensor<T>>>>,
    capture_attention: Cell<bool>,
    profile: Option<RefCell<Profile>>,
}

/// Wall-clock time per op name, forward and backward.
#[derive(Clone, Debug, Default)]
pub struct Profile {
    last: Option<Instant>,
    pub forward: BTreeMap<&'static str, (f64, u64)>,
    pub backward: BTreeMap<&'static str, (f64, u64)>,
    /// Multiply-adds performed by forward matrix products.
    pub matmul_macs: u64,
}

impl Profile {
    fn tick(map: &mut BTreeMap<&'static str, (f64, u64)>, name: &'static str, secs: f64) {
        let e = map.entry(name).or_insert((0.0, 0));
        e.0 += secs;
        e.1 += 1;
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visits: Vec<u32>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with `requires_grad`.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Moves a gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }

    /// Per-node visit counts of the reverse sweep.
    pub fn visits(&self) -> &[u32] {
        &self.visits
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            captured: RefCell::new(Vec::new()),
            capture_attention: Cell::new(false),
            profile: None,
        }
    }

    /// Records time spent per op; forward time is measured between pushes.
    pub fn with_profiling(mut self) -> Self {
        self.profile = Some(RefCell::new(Profile {
            last: Some(Instant::now()),
            ..Profile::default()
        }));
        self
    }

    pub fn profile(&self) -> Option<Profile> {
        self.profile.as_ref().map(|p| p.borrow().clone())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keep the probabilities of every subsequent attention op for inspection.
    pub fn set_capture_attention(&self, on: bool) {
        self.capture_attention.set(on);
    }

    /// Attention weights `[heads, nq, nk]` of the latest captured attention op.
    pub fn last_attention(&self) -> Option<Arc<Tensor<T>>> {
        self.captured.borrow().last().cloned()
    }

    /// All captured attention weights, in execution order.
    pub fn captured_attention(&self) -> Vec<Arc<Tensor<T>>> {
        self.captured.borrow().clone()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        if let Some(p) = &self.profile {
            let mut p = p.borrow_mut();
            let now = Instant::now();
            let dt = p.last.map_or(0.0, |l| (now - l).as_secs_f64());
            Profile::tick(&mut p.forward, op.name(), dt);
            p.last = Some(now);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that shares storage with an existing tensor (no copy).
    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var<'_, T>) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn val(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn rg2(&self, a: usize, b: usize) -> bool {
        let n = self.nodes.borrow();
        n[a].requires_grad || n[b].requires_grad
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(invalid(
                "backward",
                format!("output must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut visits = vec![0u32; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            visits[id] += 1;
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            match &self.profile {
                Some(p) => {
                    let t0 = Instant::now();
                    backprop(&nodes, id, &g, &mut grads);
                    Profile::tick(&mut p.borrow_mut().backward, node.op.name(), t0.elapsed().as_secs_f64());
                }
                None => backprop(&nodes, id, &g, &mut grads),
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            visits,
        })
    }

    fn unary(&self, a: Var<'_, T>, kind: Unary) -> Result<Var<'_, T>> {
        let x = self.val(a.id);
        let f: fn(T) -> T = match kind {
            Unary::Relu => |v| if v > T::zero() { v } else { T::zero() },
            Unary::Sigmoid => |v| T::one() / (T::one() + (-v).exp()),
            Unary::Exp => |v| v.exp(),
            Unary::Log => |v| v.ln(),
            Unary::Abs => |v| v.abs(),
            Unary::Sqrt => |v| v.sqrt(),
            Unary::Softplus => |v| {
                // max(v, 0) + log1p(exp(-|v|))
                v.max(T::zero()) + (-v.abs()).exp().ln_1p()
            },
        };
        self.push(x.map(f), Op::Unary(a.id, kind), self.rg(a.id))
    }

    fn binary_same(
        &self,
        a: Var<'_, T>,
        b: Var<'_, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'_, T>> {
        let (x, y) = (self.val(a.id), self.val(b.id));
        if x.shape() != y.shape() {
            return Err(shape_err(name, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, op, self.rg2(a.id, b.id))
    }
}

fn grad_buf<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

#[allow(clippy::too_many_lines)]
fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            if let Some(ga) = grad_buf(grads, nodes, a) {
                // ga += g (m x n) * b^T (n x k)
                T::gemm(m, n, k, T::one(), g, n, 1, bv.data(), 1, n, T::one(), ga, k, 1);
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                // gb += a^T (k x m) * g (m x n)
                T::gemm(k, m, n, T::one(), av.data(), 1, k, g, n, 1, T::one(), gb, n, 1);
            }
        }
        &Op::Add(a, b) => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                add_into(gb, g);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.clone(), nodes[b].value.clone());
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *d += s * y;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av.data()) {
                    *d += s * x;
                }
            }
        }
        &Op::Div(a, b) => {
            let bv = nodes[b].value.clone();
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *d += s / y;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                // d(a/b)/db = -(a/b)/b
                for (((d, &s), &y), &o) in gb.iter_mut().zip(g).zip(bv.data()).zip(out.data()) {
                    *d -= s * o / y;
                }
            }
        }
        &Op::AddRow(a, r) => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                add_into(ga, g);
            }
            let c = nodes[r].value.len();
            if let Some(gr) = grad_buf(grads, nodes, r) {
                for row in g.chunks_exact(c) {
                    add_into(gr, row);
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d += s * c;
                }
            }
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                add_into(ga, g);
            }
        }
        &Op::Unary(a, kind) => {
            let x = nodes[a].value.clone();
            if let Some(ga) = grad_buf(grads, nodes, a) {
                let it = ga.iter_mut().zip(g).zip(x.data().iter().zip(out.data()));
                match kind {
                    Unary::Relu => {
                        for ((d, &s), (&xi, _)) in it {
                            if xi > T::zero() {
                                *d += s;
                            }
                        }
                    }
                    Unary::Sigmoid => {
                        for ((d, &s), (_, &y)) in it {
                            *d += s * y * (T::one() - y);
                        }
                    }
                    Unary::Exp => {
                        for ((d, &s), (_, &y)) in it {
                            *d += s * y;
                        }
                    }
                    Unary::Log => {
                        for ((d, &s), (&xi, _)) in it {
                            *d += s / xi;
                        }
                    }
                    Unary::Abs => {
                        for ((d, &s), (&xi, _)) in it {
                            if xi > T::zero() {
                                *d += s;
                            } else if xi < T::zero() {
                                *d -= s;
                            }
                        }
                    }
                    Unary::Sqrt => {
                        for ((d, &s), (_, &y)) in it {
                            *d += s / (T::c(2.0) * y);
                        }
                    }
                    Unary::Softplus => {
                        for ((d, &s), (&xi, _)) in it {
                            *d += s / (T::one() + (-xi).exp());
                        }
                    }
                }
            }
        }
        &Op::Maximum(a, b) | &Op::Minimum(a, b) => {
            let is_max = matches!(nodes[id].op, Op::Maximum(..));
            let (av, bv) = (nodes[a].value.clone(), nodes[b].value.clone());
            // Ties route the gradient to the first operand.
            let pick_a: Vec<bool> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| if is_max { x >= y } else { x <= y })
                .collect();
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((d, &s), &p) in ga.iter_mut().zip(g).zip(&pick_a) {
                    if p {
                        *d += s;
                    }
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                for ((d, &s), &p) in gb.iter_mut().zip(g).zip(&pick_a) {
                    if !p {
                        *d += s;
                    }
                }
            }
        }
        &Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            if let Some(gx) = grad_buf(grads, nodes, x) {
                let y = out.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let p = base + j * inner;
                            dot += g[p] * y[p];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        &Op::LogSoftmax {
            x,
            outer,
            len,
            inner,
        } => {
            if let Some(gx) = grad_buf(grads, nodes, x) {
                let y = out.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut sum = T::zero();
                        for j in 0..len {
                            sum += g[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] += g[p] - y[p].exp() * sum;
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let gv = nodes[gain].value.clone();
            let c = gv.len();
            let nrow = xhat.len() / c;
            if let Some(gx) = grad_buf(grads, nodes, x) {
                let cf = T::c(c as f64);
                let mut dxhat = vec![T::zero(); c];
                for r in 0..nrow {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        dxhat[j] = gr[j] * gv.data()[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xr[j];
                    }
                    let k = rstd[r] / cf;
                    let dst = &mut gx[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] += k * (cf * dxhat[j] - s1 - xr[j] * s2);
                    }
                }
            }
            if let Some(gg) = grad_buf(grads, nodes, gain) {
                for r in 0..nrow {
                    for j in 0..c {
                        gg[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, bias) {
                for row in g.chunks_exact(c) {
                    add_into(gb, row);
                }
            }
        }
        Op::Dropout(a, mask) => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for ((d, &s), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += s * m;
                }
            }
        }
        Op::GatherRows(a, idx) => {
            let c = nodes[*a].value.cols();
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for (i, &src) in idx.iter().enumerate() {
                    add_into(&mut ga[src * c..(src + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = grad_buf(grads, nodes, p) {
                    for (r, dst) in gp.chunks_exact_mut(w).enumerate() {
                        add_into(dst, &g[r * total + off..r * total + off + w]);
                    }
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = grad_buf(grads, nodes, p) {
                    add_into(gp, &g[off..off + len]);
                }
                off += len;
            }
        }
        &Op::SliceCols { x, start } => {
            let src_c = nodes[x].value.cols();
            let w = out.cols();
            if let Some(gx) = grad_buf(grads, nodes, x) {
                for (r, row) in g.chunks_exact(w).enumerate() {
                    add_into(&mut gx[r * src_c + start..r * src_c + start + w], row);
                }
            }
        }
        &Op::SliceRows { x, start } => {
            let c = nodes[x].value.cols();
            if let Some(gx) = grad_buf(grads, nodes, x) {
                add_into(&mut gx[start * c..start * c + g.len()], g);
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        &Op::Mean(a) => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                let s = g[0] / T::c(ga.len() as f64);
                for d in ga.iter_mut() {
                    *d += s;
                }
            }
        }
        &Op::MeanRows(a) => {
            let r = nodes[a].value.rows();
            if let Some(ga) = grad_buf(grads, nodes, a) {
                let inv = T::one() / T::c(r as f64);
                let c = g.len();
                for row in ga.chunks_exact_mut(c) {
                    for (d, &s) in row.iter_mut().zip(g) {
                        *d += s * inv;
                    }
                }
            }
        }
        Op::GroupMax { x, argmax } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => attention_backward(nodes, (*q, *k, *v), *heads, probs, g, grads),
        &Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            if let Some(ga) = grad_buf(grads, nodes, a) {
                // out is r x c, input is c x r
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            let c = out.cols();
            let y = out.data();
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += (gr[j] - yr[j] * dot) / nrm;
                    }
                }
            }
        }
        Op::SoftCrossEntropy {
            logits,
            target,
            probs,
        } => {
            let c = nodes[*logits].value.cols();
            if let Some(gl) = grad_buf(grads, nodes, *logits) {
                for (r, &gr) in g.iter().enumerate() {
                    let t = &target[r * c..(r + 1) * c];
                    let p = &probs[r * c..(r + 1) * c];
                    let mass: T = t.iter().copied().sum();
                    for j in 0..c {
                        gl[r * c + j] += gr * (mass * p[j] - t[j]);
                    }
                }
            }
        }
    }
}

fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    (q, k, v): (usize, usize, usize),
    heads: usize,
    probs: &[T],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (qv, kv, vv) = (
        nodes[q].value.clone(),
        nodes[k].value.clone(),
        nodes[v].value.clone(),
    );
    let (nq, c) = (qv.rows(), qv.cols());
    let nk = kv.rows();
    let dh = c / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut dq = vec![T::zero(); nq * c];
    let mut dk = vec![T::zero(); nk * c];
    let mut dv = vec![T::zero(); nk * c];
    let mut dp = vec![T::zero(); nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let off = h * dh;
        // dV_h += P^T dO_h
        T::gemm(nk, nq, dh, T::one(), p, 1, nk, &g[off..], c, 1, T::one(), &mut dv[off..], c, 1);
        // dP = dO_h V_h^T
        T::gemm(nq, dh, nk, T::one(), &g[off..], c, 1, &vv.data()[off..], 1, c, T::zero(), &mut dp, nk, 1);
        // dS = P * (dP - rowsum(dP * P))
        for i in 0..nq {
            let row_p = &p[i * nk..(i + 1) * nk];
            let row_d = &mut dp[i * nk..(i + 1) * nk];
            let dot: T = row_p.iter().zip(row_d.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pp) in row_d.iter_mut().zip(row_p) {
                *d = pp * (*d - dot) * scale;
            }
        }
        // dQ_h += dS K_h ; dK_h += dS^T Q_h
        T::gemm(nq, nk, dh, T::one(), &dp, nk, 1, &kv.data()[off..], c, 1, T::one(), &mut dq[off..], c, 1);
        T::gemm(nk, nq, dh, T::one(), &dp, 1, nk, &qv.data()[off..], c, 1, T::one(), &mut dk[off..], c, 1);
    }
    if let Some(gq) = grad_buf(grads, nodes, q) {
        add_into(gq, &dq);
    }
    if let Some(gk) = grad_buf(grads, nodes, k) {
        add_into(gk, &dk);
    }
    if let Some(gv) = grad_buf(grads, nodes, v) {
        add_into(gv, &dv);
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(self) -> Arc<Tensor<T>> {
        self.tape.val(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    /// Scalar value of a one-element node.
    pub fn item(self) -> T {
        self.value().data()[0]
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let t = self.tape;
        let (a, b) = (t.val(self.id), t.val(other.id));
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), a.data(), k, 1, b.data(), n, 1, T::zero(), &mut out, n, 1);
        if let Some(p) = &t.profile {
            p.borrow_mut().matmul_macs += (m * k * n) as u64;
        }
        t.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(self.id, other.id),
            t.rg2(self.id, other.id),
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape
            .binary_same(self, other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape
            .binary_same(self, other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape
            .binary_same(self, other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape
            .binary_same(self, other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn maximum(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary_same(
            self,
            other,
            "maximum",
            |a, b| if a >= b { a } else { b },
            Op::Maximum(self.id, other.id),
        )
    }

    pub fn minimum(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary_same(
            self,
            other,
            "minimum",
            |a, b| if a <= b { a } else { b },
            Op::Minimum(self.id, other.id),
        )
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let t = self.tape;
        let (a, r) = (t.val(self.id), t.val(row.id));
        let c = a.cols();
        if r.len() != c {
            return Err(shape_err("add_row", a.shape(), r.shape()));
        }
        let mut data = a.data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            add_into(chunk, r.data());
        }
        t.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::AddRow(self.id, row.id),
            t.rg2(self.id, row.id),
        )
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        let t = self.tape;
        let a = t.val(self.id);
        t.push(a.map(|x| x * c), Op::Scale(self.id, c), t.rg(self.id))
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        let t = self.tape;
        let a = t.val(self.id);
        t.push(a.map(|x| x + c), Op::AddScalar(self.id), t.rg(self.id))
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.scale(-T::one())
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.tape.unary(self, Unary::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.tape.unary(self, Unary::Sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.tape.unary(self, Unary::Exp)
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.tape.unary(self, Unary::Log)
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.tape.unary(self, Unary::Abs)
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.tape.unary(self, Unary::Sqrt)
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(self) -> Result<Var<'t, T>> {
        self.tape.unary(self, Unary::Softplus)
    }

    fn check_axis(self, axis: usize, op: &'static str) -> Result<Arc<Tensor<T>>> {
        let x = self.tape.val(self.id);
        if axis >= x.shape().len() {
            return Err(invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", x.shape()),
            ));
        }
        Ok(x)
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.check_axis(axis, "softmax")?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut y = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(y[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let p = base + j * inner;
                    y[p] = (y[p] - mx).exp();
                    s += y[p];
                }
                for j in 0..len {
                    y[base + j * inner] /= s;
                }
            }
        }
        let t = self.tape;
        t.push(
            Tensor::new(x.shape().to_vec(), y)?,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            t.rg(self.id),
        )
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.check_axis(axis, "log_softmax")?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut y = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(y[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    s += (y[base + j * inner] - mx).exp();
                }
                let lse = mx + s.ln();
                for j in 0..len {
                    y[base + j * inner] -= lse;
                }
            }
        }
        let t = self.tape;
        t.push(
            Tensor::new(x.shape().to_vec(), y)?,
            Op::LogSoftmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            t.rg(self.id),
        )
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let t = self.tape;
        let (x, gv, bv) = (t.val(self.id), t.val(gain.id), t.val(bias.id));
        let c = x.cols();
        if c == 0 {
            return Err(invalid("layer_norm", "zero-length normalization axis"));
        }
        if gv.len() != c || bv.len() != c {
            return Err(shape_err("layer_norm", x.shape(), gv.shape()));
        }
        let rows = x.len() / c;
        let cf = T::c(c as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xr = &x.data()[r * c..(r + 1) * c];
            let mean = xr.iter().copied().sum::<T>() / cf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (xr[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = t.rg(self.id) || t.rg(gain.id) || t.rg(bias.id);
        t.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Inverted dropout; identity in eval mode.
    pub fn dropout(self, rate: f64) -> Result<Var<'t, T>> {
        let t = self.tape;
        if t.mode == Mode::Eval || rate <= 0.0 {
            return Ok(self);
        }
        if rate >= 1.0 {
            return Err(invalid("dropout", format!("rate {rate} must be < 1")));
        }
        let x = t.val(self.id);
        let keep = T::c(1.0 / (1.0 - rate));
        let mask: Vec<T> = {
            let mut rng = t.rng.borrow_mut();
            (0..x.len())
                .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
                .collect()
        };
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        t.push(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::Dropout(self.id, mask),
            t.rg(self.id),
        )
    }

    /// Row selection: `out[i] = self[idx[i]]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        let (r, c) = (x.rows(), x.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(invalid("gather_rows", format!("row {bad} out of range {r}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        t.push(
            Tensor::new(vec![idx.len(), c], data)?,
            Op::GatherRows(self.id, idx.to_vec()),
            t.rg(self.id),
        )
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        if x.shape().len() != 2 {
            return Err(invalid("transpose", format!("rank-2 required, got {:?}", x.shape())));
        }
        let (r, c) = (x.rows(), x.cols());
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        t.push(Tensor::new(vec![c, r], data)?, Op::Transpose(self.id), t.rg(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        let out = (*x).clone().reshape(shape.to_vec())?;
        t.push(out, Op::Reshape(self.id), t.rg(self.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        let (r, c) = (x.rows(), x.cols());
        if start + len > c {
            return Err(invalid("slice_cols", format!("{start}+{len} exceeds {c} columns")));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        t.push(
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { x: self.id, start },
            t.rg(self.id),
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        let (r, c) = (x.rows(), x.cols());
        if start + len > r {
            return Err(invalid("slice_rows", format!("{start}+{len} exceeds {r} rows")));
        }
        let data = x.data()[start * c..(start + len) * c].to_vec();
        t.push(
            Tensor::new(vec![len, c], data)?,
            Op::SliceRows { x: self.id, start },
            t.rg(self.id),
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        t.push(Tensor::scalar(x.sum()), Op::Sum(self.id), t.rg(self.id))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        if x.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let m = x.sum() / T::c(x.len() as f64);
        t.push(Tensor::scalar(m), Op::Mean(self.id), t.rg(self.id))
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        let (r, c) = (x.rows(), x.cols());
        if r == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut acc = vec![T::zero(); c];
        for i in 0..r {
            add_into(&mut acc, x.row(i));
        }
        let inv = T::one() / T::c(r as f64);
        for a in &mut acc {
            *a *= inv;
        }
        t.push(Tensor::new(vec![1, c], acc)?, Op::MeanRows(self.id), t.rg(self.id))
    }

    /// Max over consecutive groups of `group` rows: `[s*group, c] -> [s, c]`.
    pub fn group_max(self, group: usize) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        let (r, c) = (x.rows(), x.cols());
        if group == 0 || r % group != 0 {
            return Err(invalid("group_max", format!("{r} rows not divisible into groups of {group}")));
        }
        let s = r / group;
        let mut out = vec![T::zero(); s * c];
        let mut argmax = vec![0usize; s * c];
        for gi in 0..s {
            for j in 0..c {
                let mut best = gi * group * c + j;
                for m in 1..group {
                    let p = (gi * group + m) * c + j;
                    if x.data()[p] > x.data()[best] {
                        best = p;
                    }
                }
                out[gi * c + j] = x.data()[best];
                argmax[gi * c + j] = best;
            }
        }
        t.push(
            Tensor::new(vec![s, c], out)?,
            Op::GroupMax { x: self.id, argmax },
            t.rg(self.id),
        )
    }

    /// Rows divided by their Euclidean norm.
    pub fn l2_normalize_rows(self) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        let (r, c) = (x.rows(), x.cols());
        let eps = T::c(1e-12);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row(i);
            let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        t.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::L2NormalizeRows { x: self.id, norms },
            t.rg(self.id),
        )
    }

    /// Per-row cross-entropy `-sum_j target[r,j] * log_softmax(self)[r,j]`, shape `[rows]`.
    pub fn soft_cross_entropy(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let t = self.tape;
        let x = t.val(self.id);
        if x.shape().len() != 2 || target.shape() != x.shape() {
            return Err(shape_err("soft_cross_entropy", x.shape(), target.shape()));
        }
        let (r, c) = (x.rows(), x.cols());
        let mut probs = vec![T::zero(); r * c];
        let mut loss = vec![T::zero(); r];
        for i in 0..r {
            let row = x.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            let mut l = T::zero();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
                let tj = target.data()[i * c + j];
                if tj != T::zero() {
                    l -= tj * (row[j] - lse);
                }
            }
            loss[i] = l;
        }
        t.push(
            Tensor::new(vec![r], loss)?,
            Op::SoftCrossEntropy {
                logits: self.id,
                target: target.data().to_vec(),
                probs,
            },
            t.rg(self.id),
        )
    }
}

/// Concatenate rank-2 nodes along columns.
pub fn concat_cols<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
    let t = first.tape;
    let vals: Vec<_> = parts.iter().map(|p| t.val(p.id)).collect();
    let r = vals[0].rows();
    if let Some(v) = vals.iter().find(|v| v.rows() != r) {
        return Err(shape_err("concat_cols", vals[0].shape(), v.shape()));
    }
    let total: usize = vals.iter().map(|v| v.cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for v in &vals {
            data.extend_from_slice(v.row(i));
        }
    }
    let rg = parts.iter().any(|p| t.rg(p.id));
    t.push(
        Tensor::new(vec![r, total], data)?,
        Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        rg,
    )
}

/// Concatenate rank-2 nodes along rows.
pub fn concat_rows<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
    let t = first.tape;
    let vals: Vec<_> = parts.iter().map(|p| t.val(p.id)).collect();
    let c = vals[0].cols();
    if let Some(v) = vals.iter().find(|v| v.cols() != c) {
        return Err(shape_err("concat_rows", vals[0].shape(), v.shape()));
    }
    let r: usize = vals.iter().map(|v| v.rows()).sum();
    let mut data = Vec::with_capacity(r * c);
    for v in &vals {
        data.extend_from_slice(v.data());
    }
    let rg = parts.iter().any(|p| t.rg(p.id));
    t.push(
        Tensor::new(vec![r, c], data)?,
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        rg,
    )
}

/// Multi-head scaled dot-product attention on already-projected inputs.
///
/// `q: [nq, c]`, `k, v: [nk, c]`; heads split the channel axis into equal
/// contiguous blocks and are re-concatenated in the output.
pub fn attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let t = q.tape;
    let (qv, kv, vv) = (t.val(q.id), t.val(k.id), t.val(v.id));
    let (nq, c) = (qv.rows(), qv.cols());
    let nk = kv.rows();
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "channel count {c} not divisible by {heads} heads"
        )));
    }
    if kv.cols() != c || vv.cols() != c || vv.rows() != nk {
        return Err(shape_err("attention", kv.shape(), vv.shape()));
    }
    if nk == 0 {
        return Err(Error::Empty("attention keys"));
    }
    let dh = c / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut out = vec![T::zero(); nq * c];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        T::gemm(nq, dh, nk, scale, &qv.data()[off..], c, 1, &kv.data()[off..], 1, c, T::zero(), p, nk, 1);
        for row in p.chunks_exact_mut(nk) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        T::gemm(nq, nk, dh, T::one(), p, nk, 1, &vv.data()[off..], c, 1, T::zero(), &mut out[off..], c, 1);
    }
    if t.capture_attention.get() {
        t.captured.borrow_mut().push(Arc::new(Tensor::new(vec![heads, nq, nk], probs.clone())?));
    }
    let rg = t.rg(q.id) || t.rg(k.id) || t.rg(v.id);
    t.push(
        Tensor::new(vec![nq, c], out)?,
        Op::Attention {
            q: q.id,
            k: k.id,
            v: v.id,
            heads,
            probs,
        },
        rg,
    )
}
