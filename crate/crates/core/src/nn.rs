//! Parameter initialisation and graph builders shared by the model parts.
//!
//! Layers are addressed by a name prefix inside one [`ParamSet`]; a linear
//! layer `p` owns `p.w` (`[in, out]`) and `p.b` (`[out]`).

use rand::Rng;

use crate::diffcore::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

const MASKED: f64 = -1e9;

pub fn init_linear<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ps.insert(
        format!("{name}.w"),
        Tensor::uniform(vec![fan_in, fan_out], bound, rng),
    )?;
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]))?;
    Ok(())
}

pub fn init_layer_norm(ps: &mut ParamSet, name: &str, dim: usize) -> Result<()> {
    ps.insert(format!("{name}.g"), Tensor::filled(vec![dim], 1.0))?;
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![dim]))?;
    Ok(())
}

pub fn linear(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{name}.g"))?;
    let beta = g.param(&format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Shape of one pre-norm transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl BlockShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn == 0 {
            return Err(Error::Config("ffn width must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_attention<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        init_linear(ps, &format!("{name}.{part}"), dim, dim, rng)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product attention of `x` (queries) over `mem`
/// (keys/values). With `causal`, query `i` only sees keys `0..=i`.
pub fn attention(
    g: &mut Graph,
    name: &str,
    x: Var,
    mem: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let q = linear(g, &format!("{name}.q"), x)?;
    let k = linear(g, &format!("{name}.k"), mem)?;
    let v = linear(g, &format!("{name}.v"), mem)?;
    let (tq, dim) = (g.shape(q)[0], g.shape(q)[1]);
    let tk = g.shape(k)[0];
    if dim % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("dim {dim} not divisible by {heads} heads"),
        ));
    }
    let dh = dim / heads;
    let mask = if causal {
        let mut m = vec![0.0; tq * tk];
        for i in 0..tq {
            for j in (i + 1)..tk {
                m[i * tk + j] = MASKED;
            }
        }
        Some(g.input(vec![tq, tk], m)?)
    } else {
        None
    };
    let kt = g.transpose(k)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_rows(kt, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let s = g.matmul(qh, kh)?;
        let mut s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let a = g.softmax(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    linear(g, &format!("{name}.o"), cat)
}

pub fn init_ffn<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    shape: BlockShape,
    rng: &mut R,
) -> Result<()> {
    init_linear(ps, &format!("{name}.up"), shape.dim, shape.ffn, rng)?;
    init_linear(ps, &format!("{name}.down"), shape.ffn, shape.dim, rng)
}

pub fn ffn(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{name}.up"), x)?;
    let h = g.gelu(h)?;
    linear(g, &format!("{name}.down"), h)
}

/// Self-attention block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
pub fn init_encoder_block<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    shape: BlockShape,
    rng: &mut R,
) -> Result<()> {
    init_layer_norm(ps, &format!("{name}.ln1"), shape.dim)?;
    init_attention(ps, &format!("{name}.attn"), shape.dim, rng)?;
    init_layer_norm(ps, &format!("{name}.ln2"), shape.dim)?;
    init_ffn(ps, &format!("{name}.ffn"), shape, rng)
}

pub fn encoder_block(g: &mut Graph, name: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(g, &format!("{name}.ln1"), x)?;
    let a = attention(g, &format!("{name}.attn"), h, h, heads, false)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, &format!("{name}.ln2"), x)?;
    let f = ffn(g, &format!("{name}.ffn"), h)?;
    g.add(x, f)
}

/// Causal self-attention, cross-attention over `mem`, then feed-forward.
pub fn init_decoder_block<R: Rng>(
    ps: &mut ParamSet,
    name: &str,
    shape: BlockShape,
    rng: &mut R,
) -> Result<()> {
    init_layer_norm(ps, &format!("{name}.ln1"), shape.dim)?;
    init_attention(ps, &format!("{name}.self"), shape.dim, rng)?;
    init_layer_norm(ps, &format!("{name}.ln2"), shape.dim)?;
    init_attention(ps, &format!("{name}.cross"), shape.dim, rng)?;
    init_layer_norm(ps, &format!("{name}.ln3"), shape.dim)?;
    init_ffn(ps, &format!("{name}.ffn"), shape, rng)
}

pub fn decoder_block(g: &mut Graph, name: &str, x: Var, mem: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(g, &format!("{name}.ln1"), x)?;
    let a = attention(g, &format!("{name}.self"), h, h, heads, true)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, &format!("{name}.ln2"), x)?;
    let c = attention(g, &format!("{name}.cross"), h, mem, heads, false)?;
    let x = g.add(x, c)?;
    let h = layer_norm(g, &format!("{name}.ln3"), x)?;
    let f = ffn(g, &format!("{name}.ffn"), h)?;
    g.add(x, f)
}
