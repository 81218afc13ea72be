//! Single-target matching and the five-term training objective.

use rand::Rng;

use crate::encoders::TokenSpans;
use crate::error::{Error, Result};
use crate::geometry::{aabb_giou, aabb_giou_tape, box_row, points_in_box, Box3D};
use crate::gradcheck::{check_block, check_inputs, uniform, GradCase, Scope};
use crate::model::{random_input, GroundingModel, ModelConfig, Output};
use crate::nn::{Builder, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Mode, Var};
use crate::tensor::Tensor;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
/// Weight of the span term in the matching cost.
pub const MATCH_SPAN_WEIGHT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 8.0,
            beta: 1.0,
            gamma: 5.0,
            lambda: 1.0,
            mu: 0.01,
        }
    }
}

/// Values of the five terms; `giou` holds `1 - GIoU`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub confidence: f64,
    pub giou: f64,
    pub box_l1: f64,
    pub contrastive: f64,
    pub soft_token: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> [f64; 5] {
        [self.confidence, self.giou, self.box_l1, self.contrastive, self.soft_token]
    }

    pub fn is_valid(&self) -> bool {
        self.parts().iter().all(|v| v.is_finite() && *v >= 0.0) && self.total.is_finite()
    }
}

/// `alpha L_s + beta L_giou + gamma L_box + lambda L_c + mu L_st`.
pub fn total_loss(p: &LossBreakdown, w: &LossWeights) -> f64 {
    w.alpha * p.confidence + w.beta * p.giou + w.gamma * p.box_l1 + w.lambda * p.contrastive + w.mu * p.soft_token
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchCost {
    pub l1: f64,
    pub giou: f64,
    pub span: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub index: usize,
    pub costs: Vec<MatchCost>,
}

/// Binary focal loss over seeds, averaged; `logits` has one entry per seed.
pub fn focal_confidence_loss<'t, T: Scalar>(logits: Var<'t, T>, mask: &[bool], gamma: f64, alpha: f64) -> Result<Var<'t, T>> {
    let n = logits.value().len();
    if mask.len() != n {
        return Err(Error::Invalid {
            op: "focal_confidence_loss",
            detail: format!("{} mask entries for {n} scores", mask.len()),
        });
    }
    let x = logits.reshape(&[n, 1])?;
    let pos_w: Vec<f64> = mask.iter().map(|&m| if m { alpha } else { 0.0 }).collect();
    let neg_w: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { 1.0 - alpha }).collect();
    let tape = x.tape();
    let pw = tape.constant(Tensor::from_f64(vec![n, 1], &pos_w)?)?;
    let nw = tape.constant(Tensor::from_f64(vec![n, 1], &neg_w)?)?;
    // -log p = softplus(-x), (1 - p)^g = exp(-g softplus(x)).
    let sp = x.softplus()?;
    let sn = x.neg()?.softplus()?;
    let g = T::c(-gamma);
    let pos = sp.scale(g)?.exp()?.mul(sn)?.mul(pw)?;
    let neg = sn.scale(g)?.exp()?.mul(sp)?.mul(nw)?;
    pos.add(neg)?.mean()
}

fn span_distribution(m: usize, span: (usize, usize)) -> Vec<f64> {
    let mut t = vec![0.0; m];
    let w = 1.0 / (span.1 - span.0) as f64;
    for v in &mut t[span.0..span.1] {
        *v = w;
    }
    t
}

fn soft_ce_row(logits: &[f64], target: &[f64]) -> f64 {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
    logits.iter().zip(target).map(|(&l, &t)| t * (lse - l)).sum()
}

/// Mean absolute difference over `(x, y, z, l, w, h)`.
pub fn box_l1(a: &Box3D, b: &Box3D) -> f64 {
    let (p, q) = (a.to_array(), b.to_array());
    (0..6).map(|i| (p[i] - q[i]).abs()).sum::<f64>() / 6.0
}

/// Exhaustive single-target assignment; ties go to the lower query index.
pub fn match_query(boxes: &[Box3D], span_logits: &Tensor<f64>, gt: &Box3D, target_span: (usize, usize), w: &LossWeights) -> MatchResult {
    let m = span_logits.cols();
    let target = span_distribution(m, target_span);
    let costs: Vec<MatchCost> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let l1 = box_l1(b, gt);
            let giou = 1.0 - aabb_giou(b, gt);
            let span = soft_ce_row(span_logits.row(i), &target);
            MatchCost {
                l1,
                giou,
                span,
                total: w.gamma * l1 + w.beta * giou + MATCH_SPAN_WEIGHT * span,
            }
        })
        .collect();
    let mut index = 0;
    for (i, c) in costs.iter().enumerate() {
        if c.total < costs[index].total {
            index = i;
        }
    }
    MatchResult { index, costs }
}

/// `(L_box, L_giou)` for one predicted `[1, 6]` row against the ground truth.
pub fn box_losses<'t, T: Scalar>(pred: Var<'t, T>, gt: &Box3D) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let g = box_row(pred.tape(), gt)?;
    let l1 = pred.sub(g)?.abs()?.mean()?;
    let giou = aabb_giou_tape(pred, g)?.neg()?.add_scalar(T::one())?;
    Ok((l1, giou))
}

/// Distinct spans in class order: target, attributes, terminal.
fn span_classes(spans: &TokenSpans) -> (Vec<(usize, usize)>, usize, usize) {
    let mut classes: Vec<(usize, usize)> = Vec::new();
    let index_of = |s: (usize, usize), classes: &mut Vec<(usize, usize)>| match classes.iter().position(|&c| c == s) {
        Some(i) => i,
        None => {
            classes.push(s);
            classes.len() - 1
        }
    };
    let target = index_of(spans.target, &mut classes);
    for &a in &spans.attributes {
        index_of(a, &mut classes);
    }
    let terminal = index_of(spans.terminal, &mut classes);
    (classes, target, terminal)
}

/// Symmetric InfoNCE between unit query projections and span embeddings.
pub fn contrastive_loss<'t, T: Scalar>(
    query_proj: Var<'t, T>,
    word_proj: Var<'t, T>,
    matched: usize,
    spans: &TokenSpans,
    temperature: f64,
) -> Result<Var<'t, T>> {
    let (n, m) = (query_proj.rows(), word_proj.rows());
    spans.validate(m)?;
    if matched >= n {
        return Err(Error::Invalid {
            op: "contrastive_loss",
            detail: format!("matched query {matched} of {n}"),
        });
    }
    let (classes, target, terminal) = span_classes(spans);
    let j = classes.len();
    let avg: Vec<f64> = classes.iter().flat_map(|&s| span_distribution(m, s)).collect();
    let tape = query_proj.tape();
    let span_emb = tape
        .constant(Tensor::from_f64(vec![j, m], &avg)?)?
        .matmul(word_proj)?
        .l2_normalize_rows()?;
    let sims = query_proj.matmul(span_emb.transpose()?)?.scale(T::c(1.0 / temperature))?;
    let positive = |i: usize| if i == matched { target } else { terminal };
    let mut v2t = vec![0.0; n * j];
    for i in 0..n {
        v2t[i * j + positive(i)] = 1.0;
    }
    let vis = sims.soft_cross_entropy(&Tensor::from_f64(vec![n, j], &v2t)?)?.mean()?;
    let rows: Vec<usize> = (0..j).filter(|&c| (0..n).any(|i| positive(i) == c)).collect();
    let mut t2v = Vec::with_capacity(rows.len() * n);
    for &c in &rows {
        let owners: Vec<usize> = (0..n).filter(|&i| positive(i) == c).collect();
        let w = 1.0 / owners.len() as f64;
        t2v.extend((0..n).map(|i| if owners.contains(&i) { w } else { 0.0 }));
    }
    let txt = sims
        .transpose()?
        .gather_rows(&rows)?
        .soft_cross_entropy(&Tensor::from_f64(vec![rows.len(), n], &t2v)?)?
        .mean()?;
    vis.add(txt)?.scale(T::c(0.5))
}

/// Cross-entropy of each query's span distribution against its target.
pub fn soft_token_loss<'t, T: Scalar>(span_logits: Var<'t, T>, matched: usize, spans: &TokenSpans) -> Result<Var<'t, T>> {
    let (n, m) = (span_logits.rows(), span_logits.cols());
    spans.validate(m)?;
    let pos = span_distribution(m, spans.target);
    let neg = span_distribution(m, spans.terminal);
    let target: Vec<f64> = (0..n)
        .flat_map(|i| if i == matched { pos.clone() } else { neg.clone() })
        .collect();
    span_logits.soft_cross_entropy(&Tensor::from_f64(vec![n, m], &target)?)?.mean()
}

/// Differentiable total and its breakdown for one scene.
pub struct SceneLoss<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub parts: LossBreakdown,
    pub matched: MatchResult,
}

pub fn scene_loss<'t, T: Scalar>(
    out: &Output<'t, T>,
    gt: &Box3D,
    spans: &TokenSpans,
    weights: &LossWeights,
    temperature: f64,
) -> Result<SceneLoss<'t, T>> {
    let mask = points_in_box(&out.seeds, gt);
    let ls = focal_confidence_loss(out.score_logits, &mask, FOCAL_GAMMA, FOCAL_ALPHA)?;
    let boxes = out.pred_boxes();
    let matched = match_query(&boxes, &out.span_logits.value().cast(), gt, spans.target, weights);
    let (lb, lg) = box_losses(out.boxes.slice_rows(matched.index, 1)?, gt)?;
    let lc = contrastive_loss(out.query_proj, out.word_proj, matched.index, spans, temperature)?;
    let lst = soft_token_loss(out.span_logits, matched.index, spans)?;
    let w = |v: f64| T::c(v);
    let total = ls
        .scale(w(weights.alpha))?
        .add(lg.scale(w(weights.beta))?)?
        .add(lb.scale(w(weights.gamma))?)?
        .add(lc.scale(w(weights.lambda))?)?
        .add(lst.scale(w(weights.mu))?)?;
    let mut parts = LossBreakdown {
        confidence: ls.item().f64(),
        giou: lg.item().f64(),
        box_l1: lb.item().f64(),
        contrastive: lc.item().f64(),
        soft_token: lst.item().f64(),
        total: 0.0,
    };
    parts.total = total_loss(&parts, weights);
    Ok(SceneLoss { total, parts, matched })
}

fn random_spans(rng: &mut impl Rng, m: usize) -> TokenSpans {
    let (target, attr) = if rng.gen_bool(0.5) { ((0, 1), (1, 3)) } else { ((2, 3), (0, 2)) };
    TokenSpans {
        target,
        attributes: if m >= 4 { vec![attr] } else { vec![] },
        terminal: (m - 1, m),
    }
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("focal_loss", Scope::Loss, |rng, fault| {
            let n = rng.gen_range(2..9);
            let x = uniform(rng, &[n], -3.0, 3.0);
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            check_inputs(&[x], Mode::Eval, move |_, v| focal_confidence_loss(v[0], &mask, FOCAL_GAMMA, FOCAL_ALPHA), fault)
        }),
        GradCase::new("box_losses", Scope::Loss, |rng, fault| {
            let p = Tensor::from_f64(
                vec![1, 6],
                &[
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.3..2.0),
                    rng.gen_range(0.3..2.0),
                    rng.gen_range(0.3..2.0),
                ],
            )?;
            let gt = Box3D::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.5..1.5),
                0.0,
            );
            check_inputs(
                &[p],
                Mode::Eval,
                move |_, v| {
                    let (l1, g) = box_losses(v[0], &gt)?;
                    l1.add(g)
                },
                fault,
            )
        }),
        GradCase::new("contrastive_loss", Scope::Loss, |rng, fault| {
            let (n, m, d) = (rng.gen_range(1..5), rng.gen_range(4..7), 5);
            let spans = random_spans(rng, m);
            let matched = rng.gen_range(0..n);
            let q = uniform(rng, &[n, d], -1.0, 1.0);
            let w = uniform(rng, &[m, d], -1.0, 1.0);
            check_inputs(
                &[q, w],
                Mode::Eval,
                move |_, v| {
                    contrastive_loss(v[0].l2_normalize_rows()?, v[1].l2_normalize_rows()?, matched, &spans, 0.3)
                },
                fault,
            )
        }),
        GradCase::new("soft_token_loss", Scope::Loss, |rng, fault| {
            let (n, m) = (rng.gen_range(1..5), rng.gen_range(4..7));
            let spans = random_spans(rng, m);
            let matched = rng.gen_range(0..n);
            let x = uniform(rng, &[n, m], -2.0, 2.0);
            check_inputs(&[x], Mode::Eval, move |_, v| soft_token_loss(v[0], matched, &spans), fault)
        }),
        GradCase::new("total_loss", Scope::Loss, |rng, fault| {
            let mut store = ParamStore::new();
            let model = GroundingModel::new(&mut Builder::new(&mut store, rng), ModelConfig::tiny(9))?;
            let input = random_input(rng, 2, 40, 9, 4);
            let m = input.tokens.len();
            let spans = random_spans(rng, m);
            let gt = Box3D::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..1.0),
                0.8,
                0.8,
                1.5,
                0.0,
            );
            let weights = LossWeights::default();
            check_block(&store, rng, fault, move |cx| {
                let out = model.forward(cx, &input)?;
                Ok(scene_loss(&out, &gt, &spans, &weights, model.config.temperature)?.total)
            })
        }),
    ]
}
