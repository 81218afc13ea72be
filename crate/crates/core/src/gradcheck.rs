//! Central finite-difference verification of backpropagated gradients.
//!
//! Every differentiable operation is registered as a [`GradCase`]; a case
//! draws random instances, reduces the op output to a scalar through a fixed
//! random weighting, and compares the tape gradient with
//! `(f(x + h) - f(x - h)) / 2h` in `f64`. Coordinates whose one-sided
//! slopes disagree straddle a kink and are left out of the comparison.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;
/// Gradient norms below this are compared absolutely.
const NORM_FLOOR: f64 = 1e-8;
const KINK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Core,
    Geometry,
    Model,
    Loss,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Core, Scope::Geometry, Scope::Model, Scope::Loss];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Core => "core",
            Scope::Geometry => "geometry",
            Scope::Model => "model",
            Scope::Loss => "loss",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "core" => Ok(Scope::Core),
            "geometry" => Ok(Scope::Geometry),
            "model" => Ok(Scope::Model),
            "loss" => Ok(Scope::Loss),
            other => Err(Error::Config(format!("unknown gradcheck scope {other:?}"))),
        }
    }
}

/// Perturbs the analytic gradient so the comparison must fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Fault(pub bool);

type Runner = fn(&mut ChaCha8Rng, Fault) -> Result<f64>;

pub struct GradCase {
    pub name: &'static str,
    pub scope: Scope,
    pub instances: usize,
    run: Runner,
}

impl GradCase {
    pub const fn new(name: &'static str, scope: Scope, run: Runner) -> Self {
        Self {
            name,
            scope,
            instances: INSTANCES,
            run,
        }
    }

    pub const fn with_instances(mut self, n: usize) -> Self {
        self.instances = n;
        self
    }

    /// Relative error of one random instance.
    pub fn evaluate(&self, rng: &mut ChaCha8Rng, fault: Fault) -> Result<f64> {
        (self.run)(rng, fault)
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub scope: Scope,
    pub instances: usize,
    pub max_rel_err: f64,
    pub error: Option<String>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_err <= TOLERANCE
    }
}

/// Norm-wise relative error between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// One finite-difference probe: central slope plus whether the one-sided
/// slopes disagree, which marks a non-differentiable point (ReLU, max, abs).
struct Probe {
    slope: f64,
    kink: bool,
}

fn probe(f0: f64, fp: f64, fm: f64) -> Probe {
    let (up, down) = ((fp - f0) / STEP, (f0 - fm) / STEP);
    let scale = up.abs().max(down.abs()).max(1.0);
    Probe {
        slope: (fp - fm) / (2.0 * STEP),
        kink: (up - down).abs() > KINK_TOLERANCE * scale,
    }
}

/// Drops kink coordinates, applies the fault and compares.
fn compare(mut analytic: Vec<f64>, probes: &[Probe], fault: Fault) -> Result<f64> {
    let keep: Vec<usize> = (0..probes.len()).filter(|&i| !probes[i].kink).collect();
    if keep.is_empty() {
        return Err(Error::Invalid {
            op: "gradcheck",
            detail: "every probed coordinate sits on a kink".into(),
        });
    }
    analytic = keep.iter().map(|&i| analytic[i]).collect();
    let numeric: Vec<f64> = keep.iter().map(|&i| probes[i].slope).collect();
    corrupt(&mut analytic, fault);
    Ok(relative_error(&analytic, &numeric))
}

fn corrupt(g: &mut [f64], fault: Fault) {
    if fault.0 {
        if let Some(first) = g.first_mut() {
            *first += 0.1 * (first.abs() + 1.0);
        }
    }
}

/// Scalar objective over leaf inputs.
pub trait Objective: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {}
impl<F> Objective for F where F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {}

fn eval_inputs(f: &impl Objective, inputs: &[Tensor<f64>], mode: Mode) -> Result<f64> {
    let tape = Tape::new(mode, 0);
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    Ok(f(&tape, &vars)?.item())
}

/// Compares gradients of `f` with respect to every element of every input.
pub fn check_inputs(inputs: &[Tensor<f64>], mode: Mode, f: impl Objective, fault: Fault) -> Result<f64> {
    let tape = Tape::new(mode, 0);
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.get(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    let mut probes = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    let f0 = eval_inputs(&f, &work, mode)?;
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + STEP;
            let fp = eval_inputs(&f, &work, mode)?;
            work[i].data_mut()[j] = x - STEP;
            let fm = eval_inputs(&f, &work, mode)?;
            work[i].data_mut()[j] = x;
            probes.push(probe(f0, fp, fm));
        }
    }
    compare(analytic, &probes, fault)
}

/// Scalar objective over bound parameters.
pub trait ParamObjective: for<'t> Fn(&Ctx<'t, f64>) -> Result<Var<'t, f64>> {}
impl<F> ParamObjective for F where F: for<'t> Fn(&Ctx<'t, f64>) -> Result<Var<'t, f64>> {}

fn eval_params(f: &impl ParamObjective, store: &ParamStore<f64>) -> Result<f64> {
    let tape = Tape::new(Mode::Eval, 0);
    let cx = Ctx::new(&tape, store, false);
    Ok(f(&cx)?.item())
}

/// Compares gradients at the given parameter coordinates (eval mode).
pub fn check_params(
    store: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    f: impl ParamObjective,
    fault: Fault,
) -> Result<f64> {
    let tape = Tape::new(Mode::Eval, 0);
    let cx = Ctx::new(&tape, store, true);
    let out = f(&cx)?;
    let grads = cx.param_grads(tape.backward(out)?);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, j)| grads[id.index()].as_ref().map_or(0.0, |g| g.data()[j]))
        .collect();
    let mut work = store.clone();
    let f0 = eval_params(&f, &work)?;
    let mut probes = Vec::with_capacity(coords.len());
    for &(id, j) in coords {
        let x = work.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = x + STEP;
        let fp = eval_params(&f, &work)?;
        work.get_mut(id).data_mut()[j] = x - STEP;
        let fm = eval_params(&f, &work)?;
        work.get_mut(id).data_mut()[j] = x;
        probes.push(probe(f0, fp, fm));
    }
    compare(analytic, &probes, fault)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Uniform in `±[margin, 1]`, keeping away from kinks at zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape, margin, 1.0);
    for x in t.data_mut() {
        if rng.gen_bool(0.5) {
            *x = -*x;
        }
    }
    t
}

/// `sum(x * w)` for a fixed weighting `w`, a generic scalar reduction.
pub fn weighted_sum<'t>(x: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let wv = x.tape().constant(w.clone().reshape(x.shape())?)?;
    x.mul(wv)?.sum()
}

pub fn registry() -> Vec<GradCase> {
    let mut cases = core_cases();
    cases.extend(crate::geometry::grad_cases());
    cases.extend(crate::pointnet::grad_cases());
    cases.extend(crate::encoders::grad_cases());
    cases.extend(crate::model::grad_cases());
    cases.extend(crate::losses::grad_cases());
    cases
}

/// Runs every case in `scopes`; `fault` names a case whose gradient is corrupted.
pub fn run(scopes: &[Scope], seed: u64, fault: Option<&str>) -> Vec<CaseReport> {
    registry()
        .into_iter()
        .filter(|c| scopes.contains(&c.scope))
        .enumerate()
        .map(|(k, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let flag = Fault(fault == Some(case.name));
            let mut worst = 0.0f64;
            let mut error = None;
            for _ in 0..case.instances {
                match (case.run)(&mut rng, flag) {
                    Ok(e) if e.is_finite() => worst = worst.max(e),
                    Ok(_) => {
                        worst = f64::INFINITY;
                        error = Some("non-finite relative error".to_string());
                        break;
                    }
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            CaseReport {
                name: case.name,
                scope: case.scope,
                instances: case.instances,
                max_rel_err: worst,
                error,
            }
        })
        .collect()
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    fault: Fault,
    x: Tensor<f64>,
    op: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Result<f64> {
    let w = uniform(rng, x.shape(), -1.0, 1.0);
    check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(op(v[0])?, &w), fault)
}

fn binary_case(
    rng: &mut ChaCha8Rng,
    fault: Fault,
    a: Tensor<f64>,
    b: Tensor<f64>,
    op: for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Result<f64> {
    let w = uniform(rng, a.shape(), -1.0, 1.0);
    check_inputs(&[a, b], Mode::Eval, move |_, v| weighted_sum(op(v[0], v[1])?, &w), fault)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

fn core_cases() -> Vec<GradCase> {
    use crate::nn::{AttentionBlock, BlockDims, Builder, FeedForward, LayerNorm, Linear, MultiHeadAttention};
    use crate::tape::{attention, concat_cols, concat_rows};
    vec![
        GradCase::new("matmul", Scope::Core, |rng, fault| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..5);
            let a = uniform(rng, &[m, k], -1.0, 1.0);
            let b = uniform(rng, &[k, n], -1.0, 1.0);
            let w = uniform(rng, &[m, n], -1.0, 1.0);
            check_inputs(&[a, b], Mode::Eval, move |_, v| weighted_sum(v[0].matmul(v[1])?, &w), fault)
        }),
        GradCase::new("add", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let (a, b) = (uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[r, c], -1.0, 1.0));
            binary_case(rng, fault, a, b, |x, y| x.add(y))
        }),
        GradCase::new("sub", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let (a, b) = (uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[r, c], -1.0, 1.0));
            binary_case(rng, fault, a, b, |x, y| x.sub(y))
        }),
        GradCase::new("mul", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let (a, b) = (uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[r, c], -1.0, 1.0));
            binary_case(rng, fault, a, b, |x, y| x.mul(y))
        }),
        GradCase::new("div", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let (a, b) = (uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[r, c], 0.5, 2.0));
            binary_case(rng, fault, a, b, |x, y| x.div(y))
        }),
        GradCase::new("maximum", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -1.0, 1.0);
            let mut b = a.clone();
            for x in b.data_mut() {
                *x += if rng.gen_bool(0.5) { 0.1 } else { -0.1 } * rng.gen_range(0.5..1.0);
            }
            binary_case(rng, fault, a, b, |x, y| x.maximum(y))
        }),
        GradCase::new("minimum", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -1.0, 1.0);
            let mut b = a.clone();
            for x in b.data_mut() {
                *x += if rng.gen_bool(0.5) { 0.1 } else { -0.1 } * rng.gen_range(0.5..1.0);
            }
            binary_case(rng, fault, a, b, |x, y| x.minimum(y))
        }),
        GradCase::new("add_row", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let a = uniform(rng, &[r, c], -1.0, 1.0);
            let b = uniform(rng, &[c], -1.0, 1.0);
            let w = uniform(rng, &[r, c], -1.0, 1.0);
            check_inputs(&[a, b], Mode::Eval, move |_, v| weighted_sum(v[0].add_row(v[1])?, &w), fault)
        }),
        GradCase::new("scale", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            unary_case(rng, fault, x, |v| v.scale(-1.7))
        }),
        GradCase::new("add_scalar", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            unary_case(rng, fault, x, |v| v.add_scalar(0.3))
        }),
        GradCase::new("relu", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = away_from_zero(rng, &[r, c], 1e-2);
            unary_case(rng, fault, x, |v| v.relu())
        }),
        GradCase::new("sigmoid", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -4.0, 4.0);
            unary_case(rng, fault, x, |v| v.sigmoid())
        }),
        GradCase::new("exp", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -2.0, 2.0);
            unary_case(rng, fault, x, |v| v.exp())
        }),
        GradCase::new("log", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], 0.2, 3.0);
            unary_case(rng, fault, x, |v| v.ln())
        }),
        GradCase::new("abs", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = away_from_zero(rng, &[r, c], 1e-2);
            unary_case(rng, fault, x, |v| v.abs())
        }),
        GradCase::new("sqrt", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], 0.2, 3.0);
            unary_case(rng, fault, x, |v| v.sqrt())
        }),
        GradCase::new("softplus", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -6.0, 6.0);
            unary_case(rng, fault, x, |v| v.softplus())
        }),
        GradCase::new("softmax", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c + 1], -2.0, 2.0);
            let axis = rng.gen_range(0..2);
            let w = uniform(rng, &[r, c + 1], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].softmax(axis)?, &w), fault)
        }),
        GradCase::new("log_softmax", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c + 1], -2.0, 2.0);
            let axis = rng.gen_range(0..2);
            let w = uniform(rng, &[r, c + 1], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].log_softmax(axis)?, &w), fault)
        }),
        GradCase::new("layer_norm", Scope::Core, |rng, fault| {
            let r = rng.gen_range(1..4);
            let c = rng.gen_range(2..7);
            let x = uniform(rng, &[r, c], -2.0, 2.0);
            let g = uniform(rng, &[c], 0.5, 1.5);
            let b = uniform(rng, &[c], -0.5, 0.5);
            let w = uniform(rng, &[r, c], -1.0, 1.0);
            check_inputs(
                &[x, g, b],
                Mode::Eval,
                move |_, v| weighted_sum(v[0].layer_norm(v[1], v[2], 1e-5)?, &w),
                fault,
            )
        }),
        GradCase::new("dropout", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            let w = uniform(rng, &[r, c], -1.0, 1.0);
            // Train-mode tapes share a seed, so every evaluation draws the same mask.
            check_inputs(&[x], Mode::Train, move |_, v| weighted_sum(v[0].dropout(0.3)?, &w), fault)
        }),
        GradCase::new("gather_rows", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            let idx: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..r)).collect();
            let w = uniform(rng, &[idx.len(), c], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].gather_rows(&idx)?, &w), fault)
        }),
        GradCase::new("concat_cols", Scope::Core, |rng, fault| {
            let r = rng.gen_range(1..4);
            let (ca, cb) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let a = uniform(rng, &[r, ca], -1.0, 1.0);
            let b = uniform(rng, &[r, cb], -1.0, 1.0);
            let w = uniform(rng, &[r, a.cols() + b.cols()], -1.0, 1.0);
            check_inputs(&[a, b], Mode::Eval, move |_, v| weighted_sum(concat_cols(v)?, &w), fault)
        }),
        GradCase::new("concat_rows", Scope::Core, |rng, fault| {
            let c = rng.gen_range(1..4);
            let (ra, rb) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let a = uniform(rng, &[ra, c], -1.0, 1.0);
            let b = uniform(rng, &[rb, c], -1.0, 1.0);
            let w = uniform(rng, &[a.rows() + b.rows(), c], -1.0, 1.0);
            check_inputs(&[a, b], Mode::Eval, move |_, v| weighted_sum(concat_rows(v)?, &w), fault)
        }),
        GradCase::new("slice_cols", Scope::Core, |rng, fault| {
            let r = rng.gen_range(1..4);
            let c = rng.gen_range(2..6);
            let start = rng.gen_range(0..c - 1);
            let len = rng.gen_range(1..=c - start);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            let w = uniform(rng, &[r, len], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].slice_cols(start, len)?, &w), fault)
        }),
        GradCase::new("slice_rows", Scope::Core, |rng, fault| {
            let r = rng.gen_range(2..6);
            let c = rng.gen_range(1..4);
            let start = rng.gen_range(0..r - 1);
            let len = rng.gen_range(1..=r - start);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            let w = uniform(rng, &[len, c], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].slice_rows(start, len)?, &w), fault)
        }),
        GradCase::new("sum", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, |_, v| v[0].sum()?.scale(1.3), fault)
        }),
        GradCase::new("mean", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, |_, v| v[0].mean()?.scale(1.3), fault)
        }),
        GradCase::new("mean_rows", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            let w = uniform(rng, &[1, c], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].mean_rows()?, &w), fault)
        }),
        GradCase::new("group_max", Scope::Core, |rng, fault| {
            let s = rng.gen_range(1..4);
            let g = rng.gen_range(1..5);
            let c = rng.gen_range(1..4);
            // Distinct values on a coarse lattice keep the argmax stable under perturbation.
            let mut vals: Vec<f64> = (0..s * g * c).map(|i| i as f64 * 0.1).collect();
            for i in (1..vals.len()).rev() {
                vals.swap(i, rng.gen_range(0..=i));
            }
            let x = Tensor::new(vec![s * g, c], vals)?;
            let w = uniform(rng, &[s, c], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].group_max(g)?, &w), fault)
        }),
        GradCase::new("transpose", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            let w = uniform(rng, &[c, r], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].transpose()?, &w), fault)
        }),
        GradCase::new("reshape", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            let w = uniform(rng, &[r * c], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].reshape(&[r * c])?, &w), fault)
        }),
        GradCase::new("l2_normalize_rows", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c + 1], 0.1, 1.0);
            let w = uniform(rng, &[r, c + 1], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].l2_normalize_rows()?, &w), fault)
        }),
        GradCase::new("soft_cross_entropy", Scope::Core, |rng, fault| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c + 1], -2.0, 2.0);
            let mut t = uniform(rng, &[r, c + 1], 0.0, 1.0);
            for i in 0..r {
                let s: f64 = t.row(i).iter().sum();
                for j in 0..=c {
                    t.data_mut()[i * (c + 1) + j] /= s;
                }
            }
            let w = uniform(rng, &[r], -1.0, 1.0);
            check_inputs(&[x], Mode::Eval, move |_, v| weighted_sum(v[0].soft_cross_entropy(&t)?, &w), fault)
        }),
        GradCase::new("attention", Scope::Core, |rng, fault| {
            let heads = rng.gen_range(1..3);
            let c = heads * rng.gen_range(1..4);
            let (nq, nk) = (rng.gen_range(1..4), rng.gen_range(1..5));
            let q = uniform(rng, &[nq, c], -1.0, 1.0);
            let k = uniform(rng, &[nk, c], -1.0, 1.0);
            let v = uniform(rng, &[nk, c], -1.0, 1.0);
            let w = uniform(rng, &[nq, c], -1.0, 1.0);
            check_inputs(
                &[q, k, v],
                Mode::Eval,
                move |_, x| weighted_sum(attention(x[0], x[1], x[2], heads)?, &w),
                fault,
            )
        }),
        GradCase::new("linear", Scope::Core, |rng, fault| {
            let (n, d_in) = dims(rng);
            let d_out = rng.gen_range(1..5);
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut Builder::new(&mut store, rng), "lin", d_in, d_out);
            let x = uniform(rng, &[n, d_in], -1.0, 1.0);
            let w = uniform(rng, &[n, d_out], -1.0, 1.0);
            check_block(&store, rng, fault, move |cx| {
                let xv = cx.constant(x.clone())?;
                weighted_sum(lin.forward(cx, xv)?, &w)
            })
        }),
        GradCase::new("layer_norm_affine", Scope::Core, |rng, fault| {
            let (n, c) = dims(rng);
            let c = c + 1;
            let mut store = ParamStore::new();
            let ln = LayerNorm::new(&mut Builder::new(&mut store, rng), "ln", c);
            for id in store.ids().collect::<Vec<_>>() {
                for x in store.get_mut(id).data_mut() {
                    *x += rng.gen_range(-0.3..0.3);
                }
            }
            let x = uniform(rng, &[n, c], -2.0, 2.0);
            let w = uniform(rng, &[n, c], -1.0, 1.0);
            check_block(&store, rng, fault, move |cx| {
                let xv = cx.constant(x.clone())?;
                weighted_sum(ln.forward(cx, xv)?, &w)
            })
        }),
        GradCase::new("scaled_dot_attention", Scope::Core, |rng, fault| {
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut Builder::new(&mut store, rng), "mha", 8, 2)?;
            let q = uniform(rng, &[3, 8], -1.0, 1.0);
            let kv = uniform(rng, &[4, 8], -1.0, 1.0);
            let w = uniform(rng, &[3, 8], -1.0, 1.0);
            // Inputs and every projection weight are checked together.
            let all = check_block(&store, rng, fault, {
                let (q, kv, w) = (q.clone(), kv.clone(), w.clone());
                move |cx| {
                    let qv = cx.constant(q.clone())?;
                    let kvv = cx.constant(kv.clone())?;
                    weighted_sum(mha.forward(cx, qv, kvv, kvv)?, &w)
                }
            })?;
            let store2 = store.clone();
            let inputs = check_inputs(
                &[q, kv.clone(), kv],
                Mode::Eval,
                move |tape, v| {
                    let cx = Ctx::new(tape, &store2, false);
                    weighted_sum(mha.forward(&cx, v[0], v[1], v[2])?, &w)
                },
                fault,
            )?;
            Ok(all.max(inputs))
        }),
        GradCase::new("feed_forward", Scope::Core, |rng, fault| {
            let (n, c) = dims(rng);
            let hidden = rng.gen_range(2..6);
            let mut store = ParamStore::new();
            let ffn = FeedForward::new(&mut Builder::new(&mut store, rng), "ffn", c, hidden, 0.1);
            let x = uniform(rng, &[n, c], -1.0, 1.0);
            let w = uniform(rng, &[n, c], -1.0, 1.0);
            check_block(&store, rng, fault, move |cx| {
                let xv = cx.constant(x.clone())?;
                weighted_sum(ffn.forward(cx, xv)?, &w)
            })
        }),
        GradCase::new("attention_block", Scope::Core, |rng, fault| {
            let mut store = ParamStore::new();
            let d = BlockDims {
                dim: 8,
                heads: 2,
                ffn: 6,
                dropout: 0.1,
            };
            let blk = AttentionBlock::new(&mut Builder::new(&mut store, rng), "blk", d)?;
            let x = uniform(rng, &[3, 8], -1.0, 1.0);
            let y = uniform(rng, &[4, 8], -1.0, 1.0);
            let w = uniform(rng, &[3, 8], -1.0, 1.0);
            check_block(&store, rng, fault, move |cx| {
                let xv = cx.constant(x.clone())?;
                let yv = cx.constant(y.clone())?;
                weighted_sum(blk.forward(cx, xv, yv)?, &w)
            })
        }),
    ]
}

/// Checks every coordinate of every parameter for small stores, a random
/// sample of 48 coordinates otherwise.
pub fn check_block(
    store: &ParamStore<f64>,
    rng: &mut ChaCha8Rng,
    fault: Fault,
    f: impl ParamObjective,
) -> Result<f64> {
    let all: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |j| (id, j)))
        .collect();
    let coords = if all.len() <= 160 {
        all
    } else {
        sample_coords(store, rng, 48)
    };
    check_params(store, &coords, f, fault)
}

/// `n` coordinates with at least one from every parameter when `n` allows.
pub fn sample_coords(store: &ParamStore<f64>, rng: &mut ChaCha8Rng, n: usize) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let id = if k < ids.len() && ids.len() <= n {
            ids[k]
        } else {
            ids[rng.gen_range(0..ids.len())]
        };
        out.push((id, rng.gen_range(0..store.get(id).len())));
    }
    out
}
