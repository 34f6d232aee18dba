//! Codex transformer encoder, the decoder language model that reads the
//! quantised sequence through cross-attention, the wave reconstruction
//! decoder and the text embedding table.
//!
//! Sequences inside a graph hold only valid positions, packed in order; the
//! `EmbeddingSequence` wrappers gather and scatter around that.

use rand::Rng;

use crate::corpus::{TokenSequence, Vocab, BOS, EOS, PAD};
use crate::diffcore::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn;
use crate::wave_encoder::{add_positions, EmbeddingSequence};

pub const TEXT_TABLE: &str = "text.table";

pub fn init_encoder<R: Rng>(ps: &mut ParamSet, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    ps.insert(
        "enc.pos",
        Tensor::uniform(vec![cfg.max_positions, cfg.dim], 0.1, rng),
    )?;
    for i in 0..cfg.enc_layers {
        nn::init_encoder_block(ps, &format!("enc.l{i}"), cfg.block(), rng)?;
    }
    // output rows start at the expected norm of a codebook entry (1/sqrt(3))
    // so nearest-entry search is meaningful from the first step
    ps.insert(
        "enc.ln_f.g",
        Tensor::filled(vec![cfg.dim], (1.0 / (3.0 * cfg.dim as f64)).sqrt()),
    )?;
    ps.insert("enc.ln_f.b", Tensor::zeros(vec![cfg.dim]))?;
    Ok(())
}

/// `[n, dim]` to `z_c`, `[n, dim]`.
pub fn encode_graph(g: &mut Graph, cfg: &ModelConfig, x: Var) -> Result<Var> {
    if g.shape(x).len() != 2 || g.shape(x)[1] != cfg.dim {
        return Err(Error::shape(
            "encode",
            format!("expected [n, {}], got {:?}", cfg.dim, g.shape(x)),
        ));
    }
    let mut h = add_positions(g, "enc.pos", x)?;
    for i in 0..cfg.enc_layers {
        h = nn::encoder_block(g, &format!("enc.l{i}"), h, cfg.heads)?;
    }
    nn::layer_norm(g, "enc.ln_f", h)
}

pub fn encode(
    ps: &ParamSet,
    cfg: &ModelConfig,
    x: &EmbeddingSequence,
) -> Result<EmbeddingSequence> {
    if x.dim != cfg.dim {
        return Err(Error::shape(
            "encode",
            format!("{}-dim input, model dim {}", x.dim, cfg.dim),
        ));
    }
    let n = x.valid_positions().len();
    if n == 0 {
        return Ok(x.clone());
    }
    let mut g = Graph::new(ps);
    let v = g.input(vec![n, x.dim], x.valid_rows())?;
    let y = encode_graph(&mut g, cfg, v)?;
    EmbeddingSequence::scatter(x.mask.clone(), cfg.dim, g.value(y))
}

pub fn init_decoder<R: Rng>(
    ps: &mut ParamSet,
    cfg: &ModelConfig,
    vocab: usize,
    rng: &mut R,
) -> Result<()> {
    ps.insert("dec.tok", Tensor::uniform(vec![vocab, cfg.dim], 0.1, rng))?;
    ps.insert(
        "dec.pos",
        Tensor::uniform(vec![cfg.max_positions, cfg.dim], 0.1, rng),
    )?;
    ps.insert(
        "dec.mem_pos",
        Tensor::uniform(vec![cfg.max_positions, cfg.dim], 0.1, rng),
    )?;
    for i in 0..cfg.dec_layers {
        nn::init_decoder_block(ps, &format!("dec.l{i}"), cfg.block(), rng)?;
    }
    nn::init_layer_norm(ps, "dec.ln_f", cfg.dim)?;
    nn::init_linear(ps, "dec.out", cfg.dim, vocab, rng)
}

/// Next-token logits `[inputs.len(), V]` given the memory `[n, dim]`.
pub fn decoder_logits(g: &mut Graph, cfg: &ModelConfig, mem: Var, inputs: &[usize]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Input(
            "decoder needs at least one input token".into(),
        ));
    }
    let mem = add_positions(g, "dec.mem_pos", mem)?;
    let tok = g.param("dec.tok")?;
    let x = g.embedding(tok, inputs)?;
    let mut h = add_positions(g, "dec.pos", x)?;
    for i in 0..cfg.dec_layers {
        h = nn::decoder_block(g, &format!("dec.l{i}"), h, mem, cfg.heads)?;
    }
    let h = nn::layer_norm(g, "dec.ln_f", h)?;
    nn::linear(g, "dec.out", h)
}

/// Teacher-forced logits for `ids[1..]` given `ids[..len-1]`, and the mean
/// cross-entropy over the non-PAD targets.
pub fn decode_teacher_forced_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    mem: Var,
    ids: &[usize],
) -> Result<(Var, Var)> {
    if ids.len() < 2 {
        return Err(Error::Input(format!(
            "target of {} tokens has nothing to predict",
            ids.len()
        )));
    }
    if ids[0] != BOS {
        return Err(Error::Input("target must begin with BOS".into()));
    }
    let logits = decoder_logits(g, cfg, mem, &ids[..ids.len() - 1])?;
    let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| (t != PAD).then_some(t)).collect();
    let nll = g.cross_entropy(logits, &targets)?;
    Ok((logits, nll))
}

#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// Row-major `(len - 1) × vocab`.
    pub logits: Vec<f64>,
    pub rows: usize,
    pub vocab: usize,
    pub nll: f64,
}

impl TeacherForced {
    /// Argmax token at every position (lowest id on ties).
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.chunks(self.vocab).map(argmax).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn memory(g: &mut Graph, z_q: &EmbeddingSequence) -> Result<Var> {
    let n = z_q.valid_positions().len();
    if n == 0 {
        return Err(Error::Input(
            "quantised sequence has no valid positions".into(),
        ));
    }
    g.input(vec![n, z_q.dim], z_q.valid_rows())
}

pub fn decode_teacher_forced(
    ps: &ParamSet,
    cfg: &ModelConfig,
    z_q: &EmbeddingSequence,
    target: &TokenSequence,
) -> Result<TeacherForced> {
    if target.is_empty() {
        return Err(Error::Input("empty target sequence".into()));
    }
    let mut g = Graph::new(ps);
    let mem = memory(&mut g, z_q)?;
    let (logits, nll) = decode_teacher_forced_graph(&mut g, cfg, mem, &target.ids)?;
    let shape = g.shape(logits).to_vec();
    Ok(TeacherForced {
        logits: g.value(logits).to_vec(),
        rows: shape[0],
        vocab: shape[1],
        nll: g.scalar(nll),
    })
}

/// Greedy decoding from BOS over packed memory rows; returns at most
/// `max_len` generated ids (EOS included when produced).
pub fn generate_ids(
    ps: &ParamSet,
    cfg: &ModelConfig,
    mem_rows: &[f64],
    max_len: usize,
) -> Result<Vec<usize>> {
    let n = mem_rows.len() / cfg.dim;
    if n == 0 || mem_rows.len() != n * cfg.dim {
        return Err(Error::shape(
            "generate",
            format!("{} memory values for dim {}", mem_rows.len(), cfg.dim),
        ));
    }
    let limit = max_len.min(cfg.max_positions);
    let mut ids = vec![BOS];
    while ids.len() <= limit {
        let mut g = Graph::new(ps);
        let mem = g.input(vec![n, cfg.dim], mem_rows.to_vec())?;
        let logits = decoder_logits(&mut g, cfg, mem, &ids)?;
        let v = g.shape(logits)[1];
        let last = &g.value(logits)[(ids.len() - 1) * v..];
        let next = argmax(last);
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    ids.remove(0);
    Ok(ids)
}

/// Greedy free-running decode; `ids` starts with BOS, `words` stops at EOS.
pub fn generate(
    ps: &ParamSet,
    cfg: &ModelConfig,
    vocab: &Vocab,
    z_q: &EmbeddingSequence,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::Input("max_len must be at least 1".into()));
    }
    let gen = generate_ids(ps, cfg, &z_q.valid_rows(), max_len)?;
    let words = vocab.decode(&gen);
    let mut ids = vec![BOS];
    ids.extend(gen);
    Ok(TokenSequence { ids, words })
}

pub fn init_recon<R: Rng>(ps: &mut ParamSet, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    for i in 0..cfg.recon_layers {
        nn::init_encoder_block(ps, &format!("recon.l{i}"), cfg.block(), rng)?;
    }
    nn::init_layer_norm(ps, "recon.ln_f", cfg.dim)?;
    let m = cfg.dim;
    for (i, &k) in cfg.recon_kernels.iter().enumerate() {
        let b = 1.0 / ((m * k) as f64).sqrt();
        ps.insert(
            format!("recon.up{i}.w"),
            Tensor::uniform(vec![m, m, k], b, rng),
        )?;
        ps.insert(format!("recon.up{i}.b"), Tensor::zeros(vec![m]))?;
    }
    let b = 1.0 / ((m * 3) as f64).sqrt();
    ps.insert(
        "recon.out.w",
        Tensor::uniform(vec![m, cfg.channels, 3], b, rng),
    )?;
    ps.insert("recon.out.b", Tensor::zeros(vec![cfg.channels]))?;
    Ok(())
}

pub const RECON_OUT_KERNEL: usize = 3;
pub const RECON_OUT_STRIDE: usize = 2;

/// Output length of the reconstruction decoder for `t` input positions.
pub fn recon_len(cfg: &ModelConfig, t: usize) -> usize {
    let l = cfg
        .recon_kernels
        .iter()
        .zip(&cfg.recon_strides)
        .fold(t, |l, (&k, &s)| (l - 1) * s + k);
    (l - 1) * RECON_OUT_STRIDE + RECON_OUT_KERNEL
}

/// `[n, dim]` quantised rows to a `[channels, samples']` wave estimate:
/// transformer layers, then transposed convolutions that upsample in time.
pub fn reconstruct_graph(g: &mut Graph, cfg: &ModelConfig, z_q: Var) -> Result<Var> {
    if !g.params().contains("recon.out.w") {
        return Err(Error::Unsupported(
            "wave reconstruction needs a raw-wave model".into(),
        ));
    }
    let mut h = z_q;
    for i in 0..cfg.recon_layers {
        h = nn::encoder_block(g, &format!("recon.l{i}"), h, cfg.heads)?;
    }
    let h = nn::layer_norm(g, "recon.ln_f", h)?;
    let mut h = g.transpose(h)?;
    for (i, &s) in cfg.recon_strides.iter().enumerate() {
        let w = g.param(&format!("recon.up{i}.w"))?;
        let b = g.param(&format!("recon.up{i}.b"))?;
        h = g.conv_transpose1d(h, w, b, s)?;
        h = g.gelu(h)?;
    }
    let w = g.param("recon.out.w")?;
    let b = g.param("recon.out.b")?;
    g.conv_transpose1d(h, w, b, RECON_OUT_STRIDE)
}

/// Wave estimate as `(channels, samples, values)`.
pub fn reconstruct(
    ps: &ParamSet,
    cfg: &ModelConfig,
    z_q: &EmbeddingSequence,
) -> Result<(usize, usize, Vec<f64>)> {
    if !ps.contains("recon.out.w") {
        return Err(Error::Unsupported(
            "wave reconstruction needs a raw-wave model".into(),
        ));
    }
    let mut g = Graph::new(ps);
    let mem = memory(&mut g, z_q)?;
    let y = reconstruct_graph(&mut g, cfg, mem)?;
    let (c, l) = (g.shape(y)[0], g.shape(y)[1]);
    Ok((c, l, g.value(y).to_vec()))
}

pub fn init_text_table<R: Rng>(
    ps: &mut ParamSet,
    vocab: usize,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    ps.insert(
        TEXT_TABLE,
        Tensor::uniform(vec![vocab, dim], 1.0 / (dim as f64).sqrt(), rng),
    )?;
    Ok(())
}

pub fn text_embed_graph(g: &mut Graph, ids: &[usize]) -> Result<Var> {
    let t = g.param(TEXT_TABLE)?;
    g.embedding(t, ids)
}

/// One table row per non-special token.
pub fn text_embed(ps: &ParamSet, target: &TokenSequence) -> Result<EmbeddingSequence> {
    let ids = target.content_ids();
    let mut g = Graph::new(ps);
    let y = text_embed_graph(&mut g, &ids)?;
    let dim = g.shape(y)[1];
    EmbeddingSequence::dense(ids.len(), dim, g.value(y).to_vec())
}
