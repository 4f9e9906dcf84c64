//! Multi-head softmax attention layers and the 2-D positional encoding.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::steerable::Ctx;
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Sinusoidal encoding `[d, h, w]`: channel `4i` and `4i+1` hold sin/cos of
/// the column index, `4i+2` and `4i+3` sin/cos of the row index, at
/// frequency `10000^(-2i/(d/2))`.
pub fn positional_encoding<T: Scalar>(d: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Invalid(format!("encoding width must be a positive multiple of 4, got {d}")));
    }
    let half = (d / 2) as f64;
    let mut out = vec![T::zero(); d * h * w];
    for i in 0..d / 4 {
        let div = (-(10000f64.ln()) * (2 * i) as f64 / half).exp();
        for r in 0..h {
            for c in 0..w {
                let (x, y) = (c as f64 * div, r as f64 * div);
                let at = |ch: usize| (ch * h + r) * w + c;
                out[at(4 * i)] = T::of(x.sin());
                out[at(4 * i + 1)] = T::of(x.cos());
                out[at(4 * i + 2)] = T::of(y.sin());
                out[at(4 * i + 3)] = T::of(y.cos());
            }
        }
    }
    Tensor::new(&[d, h, w], out)
}

pub fn add_positional_encoding<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("positional_encoding", format!("expected [d, h, w], got {s:?}")));
    }
    let pe = positional_encoding::<T>(s[0], s[1], s[2])?;
    features.zip_map(&pe, |a, b| a + b)
}

/// Bias-free dense map on the last axis.
pub struct Linear {
    weight: ParamId,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng)),
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.last() != Some(&self.d_in) {
            return Err(Error::shape("linear", format!("expected last axis {}, got {s:?}", self.d_in)));
        }
        let rows = s.iter().product::<usize>() / self.d_in;
        let flat = ctx.tape.reshape(x, &[rows, self.d_in])?;
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul(flat, w, false)?;
        let mut out = s;
        *out.last_mut().expect("non-empty") = self.d_out;
        ctx.tape.reshape(y, &out)
    }
}

pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[d], T::one())),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let axis = ctx.tape.shape(x).len() - 1;
        let y = ctx.tape.normalize_rows(x, T::of(LN_EPS))?;
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        ctx.tape.scale_shift(y, Some(g), Some(b), axis)
    }
}

/// One attention layer: `x + LN(FFN([x, LN(merge(attn(x, source)))]))`.
pub struct EncoderLayer {
    d: usize,
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    merge: Linear,
    norm1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Invalid(format!("width {d} not divisible into {heads} heads")));
        }
        Ok(Self {
            d,
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            merge: Linear::new(store, &format!("{name}.merge"), d, d, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ffn1: Linear::new(store, &format!("{name}.ffn1"), 2 * d, 2 * d, rng),
            ffn2: Linear::new(store, &format!("{name}.ffn2"), 2 * d, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        })
    }

    fn split_heads<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        let (b, l, dh) = (s[0], s[1], self.d / self.heads);
        let x = ctx.tape.reshape(x, &[b, l, self.heads, dh])?;
        let x = ctx.tape.permute(x, &[0, 2, 1, 3])?;
        ctx.tape.reshape(x, &[b * self.heads, l, dh])
    }

    /// `x` is `[b, l, d]`, `source` is `[b, s, d]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, source: Var) -> Result<Var> {
        let (sx, ss) = (ctx.tape.shape(x).to_vec(), ctx.tape.shape(source).to_vec());
        if sx.len() != 3 || ss.len() != 3 || sx[0] != ss[0] || sx[2] != self.d || ss[2] != self.d {
            return Err(Error::shape("attention", format!("{sx:?} attending to {ss:?} at width {}", self.d)));
        }
        let (b, l, dh) = (sx[0], sx[1], self.d / self.heads);
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, source)?;
        let v = self.v.forward(ctx, source)?;
        let (q, k, v) = (
            self.split_heads(ctx, q)?,
            self.split_heads(ctx, k)?,
            self.split_heads(ctx, v)?,
        );
        let scores = ctx.tape.matmul(q, k, true)?;
        let scores = ctx.tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let attn = ctx.tape.softmax_rows(scores)?;
        let m = ctx.tape.matmul(attn, v, false)?;
        let m = ctx.tape.reshape(m, &[b, self.heads, l, dh])?;
        let m = ctx.tape.permute(m, &[0, 2, 1, 3])?;
        let m = ctx.tape.reshape(m, &[b, l, self.d])?;
        let m = self.merge.forward(ctx, m)?;
        let m = self.norm1.forward(ctx, m)?;
        let cat = ctx.tape.concat(&[x, m], 2)?;
        let h = self.ffn1.forward(ctx, cat)?;
        let h = ctx.tape.relu(h);
        let h = self.ffn2.forward(ctx, h)?;
        let h = self.norm2.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}

/// A self layer and a cross layer; the cross update of both sides reads
/// the values from before the update.
pub struct AttentionBlock {
    self_layer: EncoderLayer,
    cross_layer: EncoderLayer,
}

impl AttentionBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            self_layer: EncoderLayer::new(store, &format!("{name}.self"), d, heads, rng)?,
            cross_layer: EncoderLayer::new(store, &format!("{name}.cross"), d, heads, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, a: Var, b: Var) -> Result<(Var, Var)> {
        let a = self.self_layer.forward(ctx, a, a)?;
        let b = self.self_layer.forward(ctx, b, b)?;
        let a2 = self.cross_layer.forward(ctx, a, b)?;
        let b2 = self.cross_layer.forward(ctx, b, a)?;
        Ok((a2, b2))
    }
}
