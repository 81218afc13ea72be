//! Patch-based image encoder, word-level text encoder and the fixed
//! positional embeddings used by every branch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{check_block, uniform, weighted_sum, GradCase, Scope};
use crate::nn::{AttentionBlock, BlockDims, Builder, Ctx, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const PATCH: usize = 16;
/// Coordinates are divided by this many meters before the Fourier features.
pub const FOURIER_SCALE: f64 = 30.0;
const SINE_BASE: f64 = 10_000.0;
const FOURIER_MAX_FREQ: f64 = 1_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalKind {
    Sine1d,
    Sine2d,
    Fourier3d,
}

fn sine_into(out: &mut [f64], pos: f64) {
    let dim = out.len();
    for i in 0..dim / 2 {
        let freq = SINE_BASE.powf(-((2 * i) as f64) / dim as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
}

/// Interleaved sin/cos embedding of token indices `0..len`.
pub fn sine1d(len: usize, dim: usize) -> Result<Tensor<f64>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::Config(format!("sine1d needs an even dim, got {dim}")));
    }
    let mut data = vec![0.0; len * dim];
    for (p, row) in data.chunks_exact_mut(dim).enumerate() {
        sine_into(row, p as f64);
    }
    Tensor::new(vec![len, dim], data)
}

/// Row index in the first half of the channels, column index in the second.
pub fn sine2d(rows: usize, cols: usize, dim: usize) -> Result<Tensor<f64>> {
    if dim % 4 != 0 || dim == 0 {
        return Err(Error::Config(format!("sine2d needs dim divisible by 4, got {dim}")));
    }
    let half = dim / 2;
    let mut data = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut data[(r * cols + c) * dim..(r * cols + c + 1) * dim];
            let (a, b) = row.split_at_mut(half);
            sine_into(a, r as f64);
            sine_into(b, c as f64);
        }
    }
    Tensor::new(vec![rows * cols, dim], data)
}

/// Log-spaced sin/cos features of scaled 3-D coordinates.
pub fn fourier3d(positions: &[[f64; 3]], dim: usize) -> Result<Tensor<f64>> {
    if dim % 6 != 0 || dim == 0 {
        return Err(Error::Config(format!("fourier3d needs dim divisible by 6, got {dim}")));
    }
    let nf = dim / 6;
    let freqs: Vec<f64> = (0..nf)
        .map(|k| {
            if nf == 1 {
                1.0
            } else {
                FOURIER_MAX_FREQ.powf(k as f64 / (nf - 1) as f64)
            }
        })
        .collect();
    let mut data = Vec::with_capacity(positions.len() * dim);
    for p in positions {
        for &coord in p {
            let u = coord / FOURIER_SCALE;
            for &f in &freqs {
                data.push((u * f).sin());
                data.push((u * f).cos());
            }
        }
    }
    Tensor::new(vec![positions.len(), dim], data)
}

/// Dispatches on `kind`; `Sine2d` takes `(row, col)` in the first two coordinates
/// of one grid, so use [`sine2d`] for whole grids.
pub fn positional(kind: PositionalKind, positions: &[[f64; 3]], dim: usize) -> Result<Tensor<f64>> {
    match kind {
        PositionalKind::Sine1d => {
            if dim % 2 != 0 || dim == 0 {
                return Err(Error::Config(format!("sine1d needs an even dim, got {dim}")));
            }
            let mut data = vec![0.0; positions.len() * dim];
            for (p, row) in positions.iter().zip(data.chunks_exact_mut(dim)) {
                sine_into(row, p[0]);
            }
            Tensor::new(vec![positions.len(), dim], data)
        }
        PositionalKind::Sine2d => {
            if dim % 4 != 0 || dim == 0 {
                return Err(Error::Config(format!("sine2d needs dim divisible by 4, got {dim}")));
            }
            let mut data = vec![0.0; positions.len() * dim];
            for (p, row) in positions.iter().zip(data.chunks_exact_mut(dim)) {
                let (a, b) = row.split_at_mut(dim / 2);
                sine_into(a, p[0]);
                sine_into(b, p[1]);
            }
            Tensor::new(vec![positions.len(), dim], data)
        }
        PositionalKind::Fourier3d => fourier3d(positions, dim),
    }
}

/// Image as `H x W x 3` floats in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, rgb: Vec<f64>) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::Invalid {
                op: "image",
                detail: format!("{} values for {height}x{width}x3", rgb.len()),
            });
        }
        Ok(Self { height, width, rgb })
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let o = (r * self.width + c) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }
}

/// Half-open word ranges of an utterance; `terminal` is the appended
/// "not-mentioned" span and always ends the utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSpans {
    pub target: (usize, usize),
    pub attributes: Vec<(usize, usize)>,
    pub terminal: (usize, usize),
}

impl TokenSpans {
    pub fn validate(&self, m: usize) -> Result<()> {
        let bad = |detail: String| Err(Error::Invalid { op: "token_spans", detail });
        if self.terminal.1 != m || self.terminal.0 >= self.terminal.1 {
            return bad(format!("terminal span {:?} must end the {m} tokens", self.terminal));
        }
        let mut all: Vec<(usize, usize)> = std::iter::once(self.target)
            .chain(self.attributes.iter().copied())
            .chain(std::iter::once(self.terminal))
            .collect();
        if all.iter().any(|&(b, e)| b >= e || e > m) {
            return bad(format!("empty or out-of-range span in {all:?}"));
        }
        all.sort_unstable();
        all.dedup();
        if all.windows(2).any(|w| w[0].1 > w[1].0) {
            return bad(format!("overlapping spans {all:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderDims {
    pub block: BlockDims,
    pub layers: usize,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch: usize,
    pub embed: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub dim: usize,
}

pub struct ImageGridFeatures<'t, T: Scalar> {
    pub tokens: Var<'t, T>,
    pub grid: (usize, usize),
}

impl ImageEncoder {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, patch: usize, d: EncoderDims) -> Result<Self> {
        bd.scope(name, |bd| {
            let embed = Linear::new(bd, "patch", patch * patch * 3, d.block.dim);
            let blocks = (0..d.layers)
                .map(|i| AttentionBlock::new(bd, &format!("block{i}"), d.block))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                patch,
                embed,
                blocks,
                dim: d.block.dim,
            })
        })
    }

    /// Flattened non-overlapping patches, one row per grid cell.
    pub fn patches<T: Scalar>(&self, img: &Image) -> Result<(Tensor<T>, (usize, usize))> {
        let p = self.patch;
        if img.height == 0 || img.width == 0 || img.height % p != 0 || img.width % p != 0 {
            return Err(Error::Invalid {
                op: "encode_image",
                detail: format!("{}x{} is not a multiple of patch {p}", img.height, img.width),
            });
        }
        let (gh, gw) = (img.height / p, img.width / p);
        let mut data = Vec::with_capacity(gh * gw * p * p * 3);
        for gr in 0..gh {
            for gc in 0..gw {
                for r in 0..p {
                    for c in 0..p {
                        data.extend(img.pixel(gr * p + r, gc * p + c).iter().map(|&v| T::c(v)));
                    }
                }
            }
        }
        Ok((Tensor::new(vec![gh * gw, p * p * 3], data)?, (gh, gw)))
    }

    /// Patch embedding before positions and attention.
    pub fn embed<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, img: &Image) -> Result<(Var<'t, T>, (usize, usize))> {
        let (patches, grid) = self.patches(img)?;
        Ok((self.embed.forward(cx, cx.constant(patches)?)?, grid))
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, img: &Image) -> Result<ImageGridFeatures<'t, T>> {
        let (x, grid) = self.embed(cx, img)?;
        let pos = cx.constant(sine2d(grid.0, grid.1, self.dim)?.cast())?;
        let mut h = x.add(pos)?;
        for b in &self.blocks {
            h = b.forward(cx, h, h)?;
        }
        Ok(ImageGridFeatures { tokens: h, grid })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub vocab: usize,
    pub blocks: Vec<AttentionBlock>,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, vocab: usize, d: EncoderDims) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        bd.scope(name, |bd| {
            let embedding = bd.uniform("embedding", &[vocab, d.block.dim], 1.0);
            let blocks = (0..d.layers)
                .map(|i| AttentionBlock::new(bd, &format!("block{i}"), d.block))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                embedding,
                vocab,
                blocks,
                dim: d.block.dim,
            })
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        if ids.is_empty() {
            return Err(Error::Empty("utterance"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::UnknownToken {
                id: bad,
                vocab: self.vocab,
            });
        }
        let x = cx.p(self.embedding)?.gather_rows(ids)?;
        let pos = cx.constant(sine1d(ids.len(), self.dim)?.cast())?;
        let mut h = x.add(pos)?;
        for b in &self.blocks {
            h = b.forward(cx, h, h)?;
        }
        Ok(h)
    }
}

fn tiny_dims() -> EncoderDims {
    EncoderDims {
        block: BlockDims {
            dim: 8,
            heads: 2,
            ffn: 8,
            dropout: 0.1,
        },
        layers: 2,
    }
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("encode_image", Scope::Model, |rng, fault| {
            let mut store = ParamStore::new();
            let enc = ImageEncoder::new(&mut Builder::new(&mut store, rng), "img", PATCH, tiny_dims())?;
            let img = Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect())?;
            let w = uniform(rng, &[4, 8], -1.0, 1.0);
            check_block(&store, rng, fault, move |cx| weighted_sum(enc.forward(cx, &img)?.tokens, &w))
        }),
        GradCase::new("encode_text", Scope::Model, |rng, fault| {
            let mut store = ParamStore::new();
            let enc = TextEncoder::new(&mut Builder::new(&mut store, rng), "txt", 7, tiny_dims())?;
            let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..7)).collect();
            let w = uniform(rng, &[ids.len(), 8], -1.0, 1.0);
            check_block(&store, rng, fault, move |cx| weighted_sum(enc.forward(cx, &ids)?, &w))
        }),
    ]
}
