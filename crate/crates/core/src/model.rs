//! The grounding network: temporal visual encoding, triple-modal interaction,
//! a query decoder over top-scoring seeds and the prediction heads.

use rand::Rng;

use crate::encoders::{fourier3d, sine2d, EncoderDims, Image, ImageEncoder, TextEncoder, PATCH};
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::gradcheck::{check_block, uniform, weighted_sum, GradCase, Scope};
use crate::nn::{AttentionBlock, BlockDims, Builder, Ctx, FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::pointnet::{PointCloud, PointEncoder, PointEncoderConfig, StageConfig};
use crate::scalar::Scalar;
use crate::tape::{concat_cols, Var};
use crate::tensor::Tensor;

/// How image tokens, point tokens and language are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fusion {
    /// Points and language interact first, image tokens are fused into the points last.
    Ours,
    /// Image tokens are fused into the points before the language interaction.
    VisionFirst,
    /// Image tokens take the place of points in the language interaction.
    ImageDominant,
    /// Mean image token concatenated to every point token, followed by an MLP.
    Concat,
}

/// How earlier frames enter the visual tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Temporal {
    /// Spatial self-attention, then cross-attention to each earlier frame.
    Dve,
    /// Clouds of all frames merged before the point encoder.
    InputConcat,
    /// Per-frame encoding, nearest-seed features of earlier frames concatenated.
    FeatureConcat,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Self::Ours),
            "vision-first" => Ok(Self::VisionFirst),
            "image-dominant" => Ok(Self::ImageDominant),
            "concat" => Ok(Self::Concat),
            _ => Err(Error::Config(format!("unknown fusion order {s:?}"))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ours => "ours",
            Self::VisionFirst => "vision-first",
            Self::ImageDominant => "image-dominant",
            Self::Concat => "concat",
        })
    }
}

impl std::str::FromStr for Temporal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dve" => Ok(Self::Dve),
            "input-concat" => Ok(Self::InputConcat),
            "feature-concat" => Ok(Self::FeatureConcat),
            _ => Err(Error::Config(format!("unknown temporal mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for Temporal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dve => "dve",
            Self::InputConcat => "input-concat",
            Self::FeatureConcat => "feature-concat",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub dve_layers: usize,
    pub tfi_layers: usize,
    pub decoder_layers: usize,
    pub encoder_layers: usize,
    pub frames: usize,
    pub queries: usize,
    pub proj_dim: usize,
    pub temperature: f64,
    pub vocab: usize,
    pub use_dve: bool,
    pub use_tfi: bool,
    pub share_dve: bool,
    pub language_first: bool,
    pub fusion: Fusion,
    pub temporal: Temporal,
    pub point: PointEncoderConfig,
}

impl ModelConfig {
    pub fn desk(vocab: usize) -> Self {
        Self {
            dim: 288,
            heads: 8,
            ffn_dim: 256,
            dropout: 0.1,
            dve_layers: 1,
            tfi_layers: 3,
            decoder_layers: 6,
            encoder_layers: 2,
            frames: 2,
            queries: 16,
            proj_dim: 64,
            temperature: 0.07,
            vocab,
            use_dve: true,
            use_tfi: true,
            share_dve: false,
            language_first: true,
            fusion: Fusion::Ours,
            temporal: Temporal::Dve,
            point: PointEncoderConfig::desk(288),
        }
    }

    /// A few-parameter configuration for finite-difference checks and smoke tests.
    pub fn tiny(vocab: usize) -> Self {
        Self {
            dim: 12,
            heads: 2,
            ffn_dim: 8,
            dropout: 0.1,
            dve_layers: 1,
            tfi_layers: 1,
            decoder_layers: 1,
            encoder_layers: 1,
            frames: 2,
            queries: 3,
            proj_dim: 4,
            temperature: 0.5,
            vocab,
            use_dve: true,
            use_tfi: true,
            share_dve: false,
            language_first: true,
            fusion: Fusion::Ours,
            temporal: Temporal::Dve,
            point: PointEncoderConfig {
                stages: vec![
                    StageConfig {
                        seeds: 12,
                        radius: 1.0,
                        neighbors: 3,
                        mlp: vec![5],
                    },
                    StageConfig {
                        seeds: 6,
                        radius: 2.0,
                        neighbors: 3,
                        mlp: vec![12],
                    },
                ],
                in_channels: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("decoder_layers", self.decoder_layers),
            ("frames", self.frames),
            ("queries", self.queries),
            ("proj_dim", self.proj_dim),
            ("vocab", self.vocab),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if !(self.temperature > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("temperature must be positive and dropout in [0, 1)".into()));
        }
        if self.queries > self.point.seeds() {
            return Err(Error::Config(format!(
                "{} queries exceed {} seeds",
                self.queries,
                self.point.seeds()
            )));
        }
        Ok(())
    }

    fn block(&self) -> BlockDims {
        BlockDims {
            dim: self.dim,
            heads: self.heads,
            ffn: self.ffn_dim,
            dropout: self.dropout,
        }
    }

    /// Whether image tokens are computed at all.
    pub fn uses_image(&self) -> bool {
        self.use_tfi
    }
}

/// One grounding sample as seen by the network; frames are oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput {
    pub clouds: Vec<PointCloud>,
    pub images: Vec<Image>,
    pub tokens: Vec<usize>,
}

/// Spatial self-attention on the current frame, then cross-attention to each
/// earlier frame (most recent first) with its positional embedding added.
#[derive(Clone, Debug)]
pub struct DynamicVisualEncoder {
    pub spatial: Vec<AttentionBlock>,
    pub temporal: Vec<Vec<AttentionBlock>>,
}

impl DynamicVisualEncoder {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, layers: usize, frames: usize, d: BlockDims) -> Result<Self> {
        bd.scope(name, |bd| {
            let mut spatial = Vec::new();
            let mut temporal = Vec::new();
            for l in 0..layers.max(1) {
                spatial.push(AttentionBlock::new(bd, &format!("l{l}.spatial"), d)?);
                temporal.push(
                    (1..frames)
                        .map(|k| AttentionBlock::new(bd, &format!("l{l}.prev{k}"), d))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            Ok(Self { spatial, temporal })
        })
    }

    /// `previous[0]` is the frame right before the current one.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        current: Var<'t, T>,
        previous: &[(Var<'t, T>, Var<'t, T>)],
    ) -> Result<Var<'t, T>> {
        let mut f = current;
        for (spatial, temporal) in self.spatial.iter().zip(&self.temporal) {
            f = spatial.forward(cx, f, f)?;
            for (blk, &(prev, pos)) in temporal.iter().zip(previous) {
                if prev.cols() != f.cols() {
                    return Err(Error::Shape {
                        op: "dynamic_visual_encode",
                        lhs: f.shape(),
                        rhs: prev.shape(),
                    });
                }
                let kv = prev.add(pos)?;
                f = blk.forward(cx, f, kv)?;
            }
        }
        Ok(f)
    }
}

/// `layers` rounds of paired cross-attention between visual tokens and words,
/// plus the image fusion stage of the selected variant.
#[derive(Clone, Debug)]
pub struct TripleModal {
    pub visual: Vec<AttentionBlock>,
    pub language: Vec<AttentionBlock>,
    pub image: Option<AttentionBlock>,
    pub concat: Option<Mlp>,
}

impl TripleModal {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, layers: usize, fusion: Fusion, d: BlockDims) -> Result<Self> {
        bd.scope(name, |bd| {
            let mut visual = Vec::new();
            let mut language = Vec::new();
            for l in 0..layers {
                visual.push(AttentionBlock::new(bd, &format!("l{l}.visual"), d)?);
                language.push(AttentionBlock::new(bd, &format!("l{l}.language"), d)?);
            }
            let (image, concat) = match fusion {
                Fusion::Concat => (None, Some(Mlp::new(bd, "concat", 2 * d.dim, d.dim, d.dim))),
                _ => (Some(AttentionBlock::new(bd, "image", d)?), None),
            };
            Ok(Self {
                visual,
                language,
                image,
                concat,
            })
        })
    }

    /// Returns the language-enhanced visual tokens and the visual-enhanced words.
    pub fn interact<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        visual: Var<'t, T>,
        words: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (mut v, mut w) = (visual, words);
        for (bv, bl) in self.visual.iter().zip(&self.language) {
            let nv = bv.forward(cx, v, w)?;
            let nw = bl.forward(cx, w, v)?;
            v = nv;
            w = nw;
        }
        Ok((v, w))
    }
}

/// Self-attention, two cross-attentions and a feed-forward sublayer, each
/// wrapped in a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_att: MultiHeadAttention,
    pub lang_att: MultiHeadAttention,
    pub vis_att: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norms: [LayerNorm; 4],
}

impl DecoderLayer {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, d: BlockDims) -> Result<Self> {
        bd.scope(name, |bd| {
            Ok(Self {
                self_att: MultiHeadAttention::new(bd, "self", d.dim, d.heads)?,
                lang_att: MultiHeadAttention::new(bd, "lang", d.dim, d.heads)?,
                vis_att: MultiHeadAttention::new(bd, "vis", d.dim, d.heads)?,
                ffn: FeedForward::new(bd, "ffn", d.dim, d.ffn, d.dropout),
                norms: [
                    LayerNorm::new(bd, "ln0", d.dim),
                    LayerNorm::new(bd, "ln1", d.dim),
                    LayerNorm::new(bd, "ln2", d.dim),
                    LayerNorm::new(bd, "ln3", d.dim),
                ],
            })
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        x: Var<'t, T>,
        words: Var<'t, T>,
        visual: Var<'t, T>,
        language_first: bool,
    ) -> Result<Var<'t, T>> {
        let sub = |x: Var<'t, T>, att: &MultiHeadAttention, y: Var<'t, T>, ln: &LayerNorm| {
            ln.forward(cx, att.forward(cx, x, y, y)?.add(x)?)
        };
        let mut x = sub(x, &self.self_att, x, &self.norms[0])?;
        if language_first {
            x = sub(x, &self.lang_att, words, &self.norms[1])?;
            x = sub(x, &self.vis_att, visual, &self.norms[2])?;
        } else {
            x = sub(x, &self.vis_att, visual, &self.norms[2])?;
            x = sub(x, &self.lang_att, words, &self.norms[1])?;
        }
        self.norms[3].forward(cx, self.ffn.forward(cx, x)?.add(x)?)
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub score: Mlp,
    pub center: Mlp,
    pub size: Mlp,
    pub span: Linear,
    pub query_proj: Linear,
    pub word_proj: Linear,
}

/// Named intermediate features of one forward pass.
pub struct ModalFeatures<'t, T: Scalar> {
    pub points: Var<'t, T>,
    pub image: Option<Var<'t, T>>,
    pub language: Var<'t, T>,
    pub points_language: Var<'t, T>,
    pub language_visual: Var<'t, T>,
    pub visual: Var<'t, T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryCandidates {
    /// Sigmoid confidences of every seed.
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub reference_positions: Vec<[f64; 3]>,
}

pub struct Output<'t, T: Scalar> {
    pub features: ModalFeatures<'t, T>,
    pub seeds: Vec<[f64; 3]>,
    /// Pre-sigmoid seed confidences, `[S, 1]`.
    pub score_logits: Var<'t, T>,
    pub queries: QueryCandidates,
    /// `(x, y, z, l, w, h)` per query, `[N, 6]`.
    pub boxes: Var<'t, T>,
    pub span_logits: Var<'t, T>,
    pub query_proj: Var<'t, T>,
    pub word_proj: Var<'t, T>,
}

impl<T: Scalar> Output<'_, T> {
    pub fn box_at(&self, i: usize) -> Box3D {
        let v = self.boxes.value();
        let r = v.row(i);
        Box3D::new(r[0].f64(), r[1].f64(), r[2].f64(), r[3].f64(), r[4].f64(), r[5].f64(), 0.0)
    }

    pub fn pred_boxes(&self) -> Vec<Box3D> {
        (0..self.boxes.rows()).map(|i| self.box_at(i)).collect()
    }

    /// Index of the query furthest from the terminal word and its box.
    pub fn target(&self) -> (usize, Box3D) {
        let m = self.word_proj.rows();
        let i = select_target(&self.query_proj.value().cast(), &self.word_proj.value().cast(), (m - 1, m));
        (i, self.box_at(i))
    }
}

/// Top-`n` seeds by score, ties broken by lower index.
pub fn select_queries(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n > scores.len() {
        return Err(Error::Config(format!("{n} queries requested from {} seeds", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

/// Query whose projection has the lowest cosine similarity to the mean of the
/// word projections in `terminal`; ties go to the lower index.
pub fn select_target(query_proj: &Tensor<f64>, word_proj: &Tensor<f64>, terminal: (usize, usize)) -> usize {
    let d = word_proj.cols();
    let mut t = vec![0.0; d];
    for r in terminal.0..terminal.1 {
        for (a, b) in t.iter_mut().zip(word_proj.row(r)) {
            *a += b;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let tn = norm(&t);
    let mut best = (f64::INFINITY, 0);
    for i in 0..query_proj.rows() {
        let q = query_proj.row(i);
        let cos = q.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / (norm(q) * tn);
        if cos < best.0 {
            best = (cos, i);
        }
    }
    best.1
}

fn nearest(points: &[[f64; 3]], p: &[f64; 3]) -> usize {
    let d2 = |q: &[f64; 3]| (0..3).map(|k| (q[k] - p[k]).powi(2)).sum::<f64>();
    let mut best = (f64::INFINITY, 0);
    for (i, q) in points.iter().enumerate() {
        let d = d2(q);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

#[derive(Clone, Debug)]
pub struct GroundingModel {
    pub config: ModelConfig,
    pub point_encoder: PointEncoder,
    pub image_encoder: Option<ImageEncoder>,
    pub text_encoder: TextEncoder,
    pub point_dve: Option<DynamicVisualEncoder>,
    pub image_dve: Option<DynamicVisualEncoder>,
    pub feature_concat: Option<Linear>,
    pub tfi: Option<TripleModal>,
    pub decoder: Vec<DecoderLayer>,
    pub heads: Heads,
}

impl GroundingModel {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.block();
        let enc = EncoderDims {
            block: d,
            layers: config.encoder_layers,
        };
        let point_encoder = PointEncoder::new(bd, "point", config.point.clone(), config.dim)?;
        let image_encoder = if config.uses_image() {
            Some(ImageEncoder::new(bd, "image", PATCH, enc)?)
        } else {
            None
        };
        let text_encoder = TextEncoder::new(bd, "text", config.vocab, enc)?;
        let dve_frames = match config.temporal {
            Temporal::Dve => config.frames,
            _ => 1,
        };
        let point_dve = if config.use_dve {
            Some(DynamicVisualEncoder::new(bd, "dve.point", config.dve_layers, dve_frames, d)?)
        } else {
            None
        };
        let image_dve = match (&point_dve, config.uses_image(), config.share_dve) {
            (Some(_), true, false) => Some(DynamicVisualEncoder::new(bd, "dve.image", config.dve_layers, dve_frames, d)?),
            _ => None,
        };
        let feature_concat = (config.temporal == Temporal::FeatureConcat && config.frames > 1)
            .then(|| Linear::new(bd, "feature_concat", config.frames * config.dim, config.dim));
        let tfi = if config.use_tfi {
            Some(TripleModal::new(bd, "tfi", config.tfi_layers, config.fusion, d)?)
        } else {
            None
        };
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderLayer::new(bd, &format!("decoder.l{l}"), d))
            .collect::<Result<Vec<_>>>()?;
        let c = config.dim;
        let heads = bd.scope("heads", |bd| Heads {
            score: Mlp::new(bd, "score", c, c, 1),
            center: Mlp::new(bd, "center", c, c, 3),
            size: Mlp::new(bd, "size", c, c, 3),
            span: Linear::new(bd, "span", c, c),
            query_proj: Linear::new(bd, "query_proj", c, config.proj_dim),
            word_proj: Linear::new(bd, "word_proj", c, config.proj_dim),
        });
        Ok(Self {
            config,
            point_encoder,
            image_encoder,
            text_encoder,
            point_dve,
            image_dve,
            feature_concat,
            tfi,
            decoder,
            heads,
        })
    }

    fn last_frames<'a, X>(&self, frames: &'a [X], what: &'static str) -> Result<&'a [X]> {
        let k = self.config.frames;
        if frames.len() < k {
            return Err(Error::Invalid {
                op: "grounding_forward",
                detail: format!("{k} frames required, {} {what} provided", frames.len()),
            });
        }
        Ok(&frames[frames.len() - k..])
    }

    fn point_tokens<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, clouds: &[PointCloud]) -> Result<(Vec<[f64; 3]>, Var<'t, T>)> {
        let clouds = self.last_frames(clouds, "clouds")?;
        let pos = |p: &[[f64; 3]]| -> Result<Var<'t, T>> { cx.constant(fourier3d(p, self.config.dim)?.cast()) };
        let current = clouds.last().expect("at least one frame");
        let (seeds, feats, previous) = match self.config.temporal {
            Temporal::InputConcat => {
                let mut merged = current.clone();
                for c in clouds[..clouds.len() - 1].iter().rev() {
                    merged = merged.merged(c);
                }
                let s = self.point_encoder.forward(cx, &merged)?;
                (s.positions, s.features, Vec::new())
            }
            Temporal::Dve | Temporal::FeatureConcat => {
                let cur = self.point_encoder.forward(cx, current)?;
                let mut previous = Vec::new();
                let history = if self.point_dve.is_some() || self.feature_concat.is_some() {
                    &clouds[..clouds.len() - 1]
                } else {
                    &[]
                };
                for c in history.iter().rev() {
                    let s = self.point_encoder.forward(cx, c)?;
                    previous.push((s.positions, s.features));
                }
                if let Some(fc) = &self.feature_concat {
                    let mut parts = vec![cur.features];
                    for (p, f) in &previous {
                        let idx: Vec<usize> = cur.positions.iter().map(|q| nearest(p, q)).collect();
                        parts.push(f.gather_rows(&idx)?);
                    }
                    (cur.positions, fc.forward(cx, concat_cols(&parts)?)?, Vec::new())
                } else {
                    (cur.positions, cur.features, previous)
                }
            }
        };
        let x = feats.add(pos(&seeds)?)?;
        let out = match &self.point_dve {
            Some(dve) => {
                let prev = previous
                    .iter()
                    .map(|(p, f)| Ok((*f, pos(p)?)))
                    .collect::<Result<Vec<_>>>()?;
                dve.forward(cx, x, &prev)?
            }
            None => x,
        };
        Ok((seeds, out))
    }

    fn image_tokens<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, images: &[Image]) -> Result<Option<Var<'t, T>>> {
        let Some(enc) = &self.image_encoder else {
            return Ok(None);
        };
        let images = if self.config.temporal == Temporal::Dve && self.config.use_dve {
            self.last_frames(images, "images")?
        } else {
            &images[images.len().saturating_sub(1)..]
        };
        let current = images.last().ok_or(Error::Empty("images"))?;
        let cur = enc.forward(cx, current)?;
        let dve = match (&self.image_dve, &self.point_dve, self.config.share_dve) {
            (Some(d), _, _) => Some(d),
            (None, Some(d), true) => Some(d),
            _ => None,
        };
        let Some(dve) = dve else {
            return Ok(Some(cur.tokens));
        };
        let mut prev = Vec::new();
        for img in images[..images.len() - 1].iter().rev() {
            let f = enc.forward(cx, img)?;
            if f.grid != cur.grid {
                return Err(Error::Shape {
                    op: "dynamic_visual_encode",
                    lhs: vec![cur.grid.0, cur.grid.1],
                    rhs: vec![f.grid.0, f.grid.1],
                });
            }
            prev.push((f.tokens, cx.constant(sine2d(f.grid.0, f.grid.1, self.config.dim)?.cast())?));
        }
        Ok(Some(dve.forward(cx, cur.tokens, &prev)?))
    }

    fn fuse<'t, T: Scalar>(
        &self,
        points: Var<'t, T>,
        image: Option<Var<'t, T>>,
        language: Var<'t, T>,
        cx: &Ctx<'t, T>,
    ) -> Result<ModalFeatures<'t, T>> {
        let (Some(tfi), Some(img)) = (&self.tfi, image) else {
            return Ok(ModalFeatures {
                points,
                image,
                language,
                points_language: points,
                language_visual: language,
                visual: points,
            });
        };
        let image_block = || tfi.image.as_ref().ok_or_else(|| Error::Config("image fusion block missing".into()));
        let (points_language, language_visual, visual) = match self.config.fusion {
            Fusion::Ours => {
                let (pl, lv) = tfi.interact(cx, points, language)?;
                (pl, lv, image_block()?.forward(cx, pl, img)?)
            }
            Fusion::VisionFirst => {
                let pi = image_block()?.forward(cx, points, img)?;
                let (pl, lv) = tfi.interact(cx, pi, language)?;
                (pl, lv, pl)
            }
            Fusion::ImageDominant => {
                let (il, lv) = tfi.interact(cx, img, language)?;
                let v = image_block()?.forward(cx, points, il)?;
                (v, lv, v)
            }
            Fusion::Concat => {
                let mlp = tfi.concat.as_ref().ok_or_else(|| Error::Config("concat fusion MLP missing".into()))?;
                let (pl, lv) = tfi.interact(cx, points, language)?;
                let g = img.mean_rows()?.gather_rows(&vec![0; pl.rows()])?;
                (pl, lv, mlp.forward(cx, concat_cols(&[pl, g])?)?)
            }
        };
        Ok(ModalFeatures {
            points,
            image,
            language,
            points_language,
            language_visual,
            visual,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, input: &SceneInput) -> Result<Output<'t, T>> {
        let (seeds, points) = self.point_tokens(cx, &input.clouds)?;
        let image = self.image_tokens(cx, &input.images)?;
        let language = self.text_encoder.forward(cx, &input.tokens)?;
        let features = self.fuse(points, image, language, cx)?;
        let h = &self.heads;
        let score_logits = h.score.forward(cx, features.visual)?;
        let scores: Vec<f64> = score_logits
            .value()
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x.f64()).exp()))
            .collect();
        let selected = select_queries(&scores, self.config.queries)?;
        let reference_positions: Vec<[f64; 3]> = selected.iter().map(|&i| seeds[i]).collect();
        let mut x = features.visual.gather_rows(&selected)?;
        for layer in &self.decoder {
            x = layer.forward(cx, x, features.language_visual, features.visual, self.config.language_first)?;
        }
        let refs = cx.constant(Tensor::from_f64(
            vec![selected.len(), 3],
            &reference_positions.iter().flatten().copied().collect::<Vec<_>>(),
        )?)?;
        let centers = h.center.forward(cx, x)?.add(refs)?;
        let sizes = h.size.forward(cx, x)?.exp()?;
        let boxes = concat_cols(&[centers, sizes])?;
        let scale = T::c(1.0 / (self.config.dim as f64).sqrt());
        let span_logits = h
            .span
            .forward(cx, x)?
            .matmul(features.language_visual.transpose()?)?
            .scale(scale)?;
        let query_proj = h.query_proj.forward(cx, x)?.l2_normalize_rows()?;
        let word_proj = h.word_proj.forward(cx, features.language_visual)?.l2_normalize_rows()?;
        Ok(Output {
            features,
            seeds,
            score_logits,
            queries: QueryCandidates {
                scores,
                selected,
                reference_positions,
            },
            boxes,
            span_logits,
            query_proj,
            word_proj,
        })
    }
}

/// Random small scene for gradient checks and shape tests.
pub fn random_input(rng: &mut impl Rng, frames: usize, points: usize, vocab: usize, words: usize) -> SceneInput {
    let mut clouds = Vec::new();
    let mut images = Vec::new();
    for f in 0..frames {
        let xyz: Vec<[f64; 3]> = (0..points)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.0..1.5)])
            .collect();
        let inten = (0..points).map(|_| rng.gen_range(0.0..1.0)).collect();
        clouds.push(PointCloud::new(xyz, inten, f).expect("valid cloud"));
        let rgb = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        images.push(Image::new(32, 32, rgb).expect("valid image"));
    }
    let mut tokens: Vec<usize> = (0..words).map(|_| rng.gen_range(0..vocab - 1)).collect();
    tokens.push(vocab - 1);
    SceneInput { clouds, images, tokens }
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("dynamic_visual_encoder", Scope::Model, |rng, fault| {
            let mut store = ParamStore::new();
            let d = BlockDims {
                dim: 8,
                heads: 2,
                ffn: 6,
                dropout: 0.1,
            };
            let dve = DynamicVisualEncoder::new(&mut Builder::new(&mut store, rng), "dve", 1, 3, d)?;
            let cur = uniform(rng, &[4, 8], -1.0, 1.0);
            let prev: Vec<(Tensor<f64>, Tensor<f64>)> = (0..2)
                .map(|_| (uniform(rng, &[5, 8], -1.0, 1.0), uniform(rng, &[5, 8], -1.0, 1.0)))
                .collect();
            let w = uniform(rng, &[4, 8], -1.0, 1.0);
            check_block(&store, rng, fault, move |cx| {
                let p = prev
                    .iter()
                    .map(|(f, pe)| Ok((cx.constant(f.clone())?, cx.constant(pe.clone())?)))
                    .collect::<Result<Vec<_>>>()?;
                weighted_sum(dve.forward(cx, cx.constant(cur.clone())?, &p)?, &w)
            })
        }),
        GradCase::new("decoder_layer", Scope::Model, |rng, fault| {
            let mut store = ParamStore::new();
            let d = BlockDims {
                dim: 8,
                heads: 2,
                ffn: 6,
                dropout: 0.1,
            };
            let layer = DecoderLayer::new(&mut Builder::new(&mut store, rng), "dec", d)?;
            let x = uniform(rng, &[3, 8], -1.0, 1.0);
            let words = uniform(rng, &[4, 8], -1.0, 1.0);
            let vis = uniform(rng, &[6, 8], -1.0, 1.0);
            let w = uniform(rng, &[3, 8], -1.0, 1.0);
            check_block(&store, rng, fault, move |cx| {
                let out = layer.forward(
                    cx,
                    cx.constant(x.clone())?,
                    cx.constant(words.clone())?,
                    cx.constant(vis.clone())?,
                    true,
                )?;
                weighted_sum(out, &w)
            })
        }),
        GradCase::new("grounding_forward", Scope::Model, |rng, fault| {
            let mut store = ParamStore::new();
            let model = GroundingModel::new(&mut Builder::new(&mut store, rng), ModelConfig::tiny(9))?;
            let input = random_input(rng, 2, 40, 9, 4);
            let m = input.tokens.len();
            let wb = uniform(rng, &[3, 6], -1.0, 1.0);
            let ws = uniform(rng, &[3, m], -1.0, 1.0);
            let wq = uniform(rng, &[3, 4], -1.0, 1.0);
            let ww = uniform(rng, &[m, 4], -1.0, 1.0);
            let wc = uniform(rng, &[6, 1], -1.0, 1.0);
            check_block(&store, rng, fault, move |cx| {
                let out = model.forward(cx, &input)?;
                weighted_sum(out.boxes, &wb)?
                    .add(weighted_sum(out.span_logits, &ws)?)?
                    .add(weighted_sum(out.query_proj, &wq)?)?
                    .add(weighted_sum(out.word_proj, &ww)?)?
                    .add(weighted_sum(out.score_logits, &wc)?)
            })
        })
        .with_instances(20),
    ]
}
