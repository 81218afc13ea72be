//! Parameters and transformer building blocks.
//!
//! Layer structs only hold [`ParamId`]s, so one architecture description can
//! be bound to stores of different precision. A [`Ctx`] lazily turns stored
//! parameters into tape leaves for one forward pass.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{attention, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Main,
    PointEncoder,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    groups: Vec<Group>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            groups: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, group: Group) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.groups.push(group);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.values[id.0].clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            groups: self.groups.clone(),
            index: self.index.clone(),
        }
    }
}

/// Parameter construction with deterministic initialization.
pub struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub group: Group,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            group: Group::Main,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the parameter prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            group: self.group,
            prefix,
        };
        f(&mut inner)
    }

    pub fn with_group<R>(&mut self, group: Group, f: impl FnOnce(&mut Builder<'_, T>) -> R) -> R {
        let saved = self.group;
        self.group = group;
        let r = f(self);
        self.group = saved;
        r
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::c(self.rng.gen_range(-bound..=bound)))
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape product matches data");
        let full = self.full_name(name);
        self.store.add(&full, t, self.group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.add(&full, Tensor::full(shape, T::c(value)), self.group)
    }
}

/// Binds stored parameters to one tape.
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    values: Vec<Arc<Tensor<T>>>,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    track: bool,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    /// `track` controls whether parameters receive gradients.
    pub fn new(tape: &'t Tape<T>, store: &ParamStore<T>, track: bool) -> Self {
        Self {
            tape,
            values: store.values.clone(),
            bound: RefCell::new(vec![None; store.len()]),
            track,
        }
    }

    pub fn p(&self, id: ParamId) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf_shared(self.values[id.0].clone(), self.track)?;
        self.bound.borrow_mut()[id.0] = Some(v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor<T>) -> Result<Var<'t, T>> {
        self.tape.constant(t)
    }

    /// Parameter gradients of a backward pass; unbound parameters get `None`.
    pub fn param_grads(&self, mut g: Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.and_then(|v| g.take(v)))
            .collect()
    }
}

/// Summed gradients over a mini-batch.
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    pub grads: Vec<Option<Tensor<T>>>,
    pub count: usize,
}

impl<T: Scalar> GradBuffer<T> {
    pub fn new(n: usize) -> Self {
        Self {
            grads: vec![None; n],
            count: 0,
        }
    }

    pub fn accumulate(&mut self, grads: Vec<Option<Tensor<T>>>) {
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => {
                    for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
        self.count += 1;
    }

    /// Divides by the number of accumulated samples.
    pub fn average(&mut self) {
        if self.count > 1 {
            let inv = T::one() / T::c(self.count as f64);
            for g in self.grads.iter_mut().flatten() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
        }
        self.count = 1;
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.count = 0;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        bd.scope(name, |bd| Self {
            w: bd.uniform("w", &[fan_in, fan_out], bound),
            b: bd.uniform("b", &[fan_out], bound),
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(cx.p(self.w)?)?.add_row(cx.p(self.b)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, dim: usize) -> Self {
        bd.scope(name, |bd| Self {
            gain: bd.constant("gain", &[dim], 1.0),
            bias: bd.constant("bias", &[dim], 0.0),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(cx.p(self.gain)?, cx.p(self.bias)?, T::c(LN_EPS))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(bd.scope(name, |bd| Self {
            q: Linear::new(bd, "q", dim, dim),
            k: Linear::new(bd, "k", dim, dim),
            v: Linear::new(bd, "v", dim, dim),
            out: Linear::new(bd, "out", dim, dim),
            heads,
        }))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let qp = self.q.forward(cx, q)?;
        let kp = self.k.forward(cx, k)?;
        let vp = self.v.forward(cx, v)?;
        let a = attention(qp, kp, vp, self.heads)?;
        self.out.forward(cx, a)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, dim: usize, hidden: usize, dropout: f64) -> Self {
        bd.scope(name, |bd| Self {
            l1: Linear::new(bd, "l1", dim, hidden),
            l2: Linear::new(bd, "l2", hidden, dim),
            dropout,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.l1.forward(cx, x)?.relu()?.dropout(self.dropout)?;
        self.l2.forward(cx, h)
    }
}

/// `A = ATT(x, y, y) + x; out = LN(FFN(A) + A)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    pub att: MultiHeadAttention,
    pub ffn: FeedForward,
    pub ln: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
}

impl AttentionBlock {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, d: BlockDims) -> Result<Self> {
        bd.scope(name, |bd| {
            Ok(Self {
                att: MultiHeadAttention::new(bd, "att", d.dim, d.heads)?,
                ffn: FeedForward::new(bd, "ffn", d.dim, d.ffn, d.dropout),
                ln: LayerNorm::new(bd, "ln", d.dim),
            })
        })
    }

    /// Queries `x` attend to keys `k` and values `v`.
    pub fn forward_kv<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        x: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let a = self.att.forward(cx, x, k, v)?.add(x)?;
        let f = self.ffn.forward(cx, a)?.add(a)?;
        self.ln.forward(cx, f)
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_kv(cx, x, y, y)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        bd.scope(name, |bd| Self {
            l1: Linear::new(bd, "l1", d_in, hidden),
            l2: Linear::new(bd, "l2", hidden, d_out),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.l1.forward(cx, x)?.relu()?;
        self.l2.forward(cx, h)
    }
}
