//! Raw-wave convolutional front end, word-feature projection and the
//! receptive-field arithmetic of the strided stack.
//!
//! Raw path: a 1×1 convolution fuses all EEG channels into `width` streams,
//! a valid strided convolution stack (GELU after each layer) downsamples in
//! time, then layer norm, a linear map to the model dimension, learned
//! positional embeddings and one bidirectional attention block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EEGRecording;
use crate::diffcore::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::featurizer::PaddedFeatures;
use crate::model::ModelConfig;
use crate::nn;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvSchedule {
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub width: usize,
}

impl Default for ConvSchedule {
    fn default() -> Self {
        Self {
            kernels: vec![10, 3, 3, 3, 2],
            strides: vec![3, 2, 2, 2, 2],
            width: 512,
        }
    }
}

impl ConvSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::Config("conv schedule has no layers".into()));
        }
        if self.kernels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "conv schedule has {} kernels but {} strides",
                self.kernels.len(),
                self.strides.len()
            )));
        }
        if let Some((k, s)) = self
            .kernels
            .iter()
            .zip(&self.strides)
            .find(|(&k, &s)| s == 0 || k < s)
        {
            return Err(Error::Config(format!(
                "conv layer kernel {k} stride {s}: need kernel >= stride >= 1"
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("conv width must be positive".into()));
        }
        Ok(())
    }

    /// Output length of every layer for an input of `len` samples.
    pub fn layer_lengths(&self, len: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.kernels.len());
        let mut l = len;
        for (&k, &s) in self.kernels.iter().zip(&self.strides) {
            if l < k {
                let rf = receptive_field(self, 1.0)
                    .map(|r| r.rf_samples)
                    .unwrap_or(k);
                return Err(Error::TooShort(format!(
                    "{len} samples, the conv stack needs at least {rf}"
                )));
            }
            l = (l - k) / s + 1;
            out.push(l);
        }
        Ok(out)
    }

    pub fn output_len(&self, len: usize) -> Result<usize> {
        Ok(*self.layer_lengths(len)?.last().expect("non-empty schedule"))
    }

    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReceptiveField {
    pub rf_samples: usize,
    pub hop_samples: usize,
    pub rf_ms: f64,
    pub hop_ms: f64,
}

pub fn receptive_field(sched: &ConvSchedule, fs: f64) -> Result<ReceptiveField> {
    sched.validate()?;
    let rf = sched
        .kernels
        .iter()
        .zip(&sched.strides)
        .rev()
        .fold(1, |rf, (&k, &s)| (rf - 1) * s + k);
    let hop = sched.hop();
    Ok(ReceptiveField {
        rf_samples: rf,
        hop_samples: hop,
        rf_ms: rf as f64 * 1000.0 / fs,
        hop_ms: hop as f64 * 1000.0 / fs,
    })
}

/// A `len × dim` sequence with a per-position validity mask; rows at masked
/// positions are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub len: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl EmbeddingSequence {
    pub fn new(len: usize, dim: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != len * dim || mask.len() != len {
            return Err(Error::shape(
                "embedding_sequence",
                format!("{len}x{dim} with {} values", values.len()),
            ));
        }
        let mut s = Self {
            len,
            dim,
            values,
            mask,
        };
        for i in 0..len {
            if !s.mask[i] {
                s.values[i * dim..(i + 1) * dim]
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        Ok(s)
    }

    /// All positions valid.
    pub fn dense(len: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(len, dim, values, vec![true; len])
    }

    /// Scatters `rows` (one per valid position, in order) into a masked sequence.
    pub fn scatter(mask: Vec<bool>, dim: usize, rows: &[f64]) -> Result<Self> {
        let len = mask.len();
        let valid: Vec<usize> = (0..len).filter(|&i| mask[i]).collect();
        if rows.len() != valid.len() * dim {
            return Err(Error::shape(
                "embedding_sequence",
                format!(
                    "{} rows for {} valid positions",
                    rows.len() / dim.max(1),
                    valid.len()
                ),
            ));
        }
        let mut values = vec![0.0; len * dim];
        for (r, &i) in valid.iter().enumerate() {
            values[i * dim..(i + 1) * dim].copy_from_slice(&rows[r * dim..(r + 1) * dim]);
        }
        Ok(Self {
            len,
            dim,
            values,
            mask,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn valid_positions(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| self.mask[i]).collect()
    }

    /// Rows at valid positions, concatenated.
    pub fn valid_rows(&self) -> Vec<f64> {
        self.valid_positions()
            .iter()
            .flat_map(|&i| self.row(i).iter().copied())
            .collect()
    }
}

pub fn init_wave_encoder<R: Rng>(ps: &mut ParamSet, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let w = cfg.conv.width;
    let b = 1.0 / (cfg.channels as f64).sqrt();
    ps.insert(
        "wave.fuse.w",
        Tensor::uniform(vec![w, cfg.channels, 1], b, rng),
    )?;
    ps.insert("wave.fuse.b", Tensor::zeros(vec![w]))?;
    for (i, &k) in cfg.conv.kernels.iter().enumerate() {
        let b = 1.0 / ((w * k) as f64).sqrt();
        ps.insert(
            format!("wave.conv{i}.w"),
            Tensor::uniform(vec![w, w, k], b, rng),
        )?;
        ps.insert(format!("wave.conv{i}.b"), Tensor::zeros(vec![w]))?;
    }
    nn::init_layer_norm(ps, "wave.ln", w)?;
    nn::init_linear(ps, "wave.out", w, cfg.dim, rng)?;
    ps.insert(
        "wave.pos",
        Tensor::uniform(vec![cfg.max_positions, cfg.dim], 0.1, rng),
    )?;
    nn::init_encoder_block(ps, "wave.attn", cfg.block(), rng)
}

/// Channel fusion and the temporal stack: `[channels, samples]` in,
/// `[T, width]` out (before attention).
pub fn wave_conv_features(g: &mut Graph, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let (c, len) = match *g.shape(x) {
        [c, l] => (c, l),
        ref s => {
            return Err(Error::shape(
                "conv_stack_forward",
                format!("expected [channels, samples], got {s:?}"),
            ))
        }
    };
    if c != cfg.channels {
        return Err(Error::shape(
            "conv_stack_forward",
            format!("{c} channels, model expects {}", cfg.channels),
        ));
    }
    cfg.conv.layer_lengths(len)?;
    let w = g.param("wave.fuse.w")?;
    let b = g.param("wave.fuse.b")?;
    let mut h = g.conv1d(x, w, b, 1)?;
    for (i, &s) in cfg.conv.strides.iter().enumerate() {
        let w = g.param(&format!("wave.conv{i}.w"))?;
        let b = g.param(&format!("wave.conv{i}.b"))?;
        h = g.conv1d(h, w, b, s)?;
        if i == 0 {
            h = normalize_over_time(g, h)?;
        }
        h = g.gelu(h)?;
    }
    g.transpose(h)
}

/// Zero mean, unit variance of every feature channel across time (group norm
/// with one group per channel, no affine). Removes the per-recording offset
/// of the normalised wave, which would otherwise dominate every position.
fn normalize_over_time(g: &mut Graph, h: Var) -> Result<Var> {
    let len = g.shape(h)[1];
    let ones = g.input(vec![len], vec![1.0; len])?;
    let zeros = g.input(vec![len], vec![0.0; len])?;
    g.layer_norm(h, ones, zeros)
}

pub(crate) fn add_positions(g: &mut Graph, table: &str, x: Var) -> Result<Var> {
    let t = g.shape(x)[0];
    let pos = g.param(table)?;
    let rows = g.shape(pos)[0];
    if t > rows {
        return Err(Error::Range(format!(
            "sequence of {t} positions exceeds `{table}` ({rows} positions)"
        )));
    }
    let p = g.slice_rows(pos, 0, t)?;
    g.add(x, p)
}

/// Full raw-wave front end: `[channels, samples]` to `[T, dim]`.
pub fn wave_forward(g: &mut Graph, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let h = wave_conv_features(g, cfg, x)?;
    let h = nn::layer_norm(g, "wave.ln", h)?;
    let h = nn::linear(g, "wave.out", h)?;
    let h = add_positions(g, "wave.pos", h)?;
    nn::encoder_block(g, "wave.attn", h, cfg.heads)
}

/// Runs the raw-wave front end on a whole recording; every position valid.
pub fn conv_stack_forward(
    ps: &ParamSet,
    cfg: &ModelConfig,
    rec: &EEGRecording,
) -> Result<EmbeddingSequence> {
    let t = cfg.conv.output_len(rec.samples)?;
    let mut g = Graph::new(ps);
    let x = g.input(vec![rec.channels, rec.samples], rec.to_f64())?;
    let y = wave_forward(&mut g, cfg, x)?;
    EmbeddingSequence::dense(t, cfg.dim, g.value(y).to_vec())
}

pub fn init_word_projection<R: Rng>(
    ps: &mut ParamSet,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    nn::init_layer_norm(ps, "proj.in_ln", cfg.feature_dim)?;
    nn::init_linear(ps, "proj.lin", cfg.feature_dim, cfg.dim, rng)?;
    nn::init_encoder_block(ps, "proj.attn", cfg.block(), rng)
}

/// Valid word-feature rows `[n, feature_dim]` to `[n, dim]`. Band powers span
/// orders of magnitude, so each row is layer-normalised before the linear map.
pub fn project_features(g: &mut Graph, cfg: &ModelConfig, x: Var) -> Result<Var> {
    match *g.shape(x) {
        [_, d] if d == cfg.feature_dim => {}
        ref s => {
            return Err(Error::shape(
                "project_word_features",
                format!("expected [n, {}], got {s:?}", cfg.feature_dim),
            ))
        }
    }
    let h = nn::layer_norm(g, "proj.in_ln", x)?;
    let h = nn::linear(g, "proj.lin", h)?;
    nn::encoder_block(g, "proj.attn", h, cfg.heads)
}

/// Projects the valid rows of a padded feature sequence; padded positions
/// stay zero and are not attended to.
pub fn project_word_features(
    ps: &ParamSet,
    cfg: &ModelConfig,
    f: &PaddedFeatures,
) -> Result<EmbeddingSequence> {
    if f.dim != cfg.feature_dim {
        return Err(Error::shape(
            "project_word_features",
            format!("{}-dim features, expected {}", f.dim, cfg.feature_dim),
        ));
    }
    let valid: Vec<usize> = (0..f.max_len).filter(|&i| f.mask[i]).collect();
    if valid.is_empty() {
        return EmbeddingSequence::new(
            f.max_len,
            cfg.dim,
            vec![0.0; f.max_len * cfg.dim],
            f.mask.clone(),
        );
    }
    let rows: Vec<f64> = valid
        .iter()
        .flat_map(|&i| f.values[i * f.dim..(i + 1) * f.dim].iter().copied())
        .collect();
    let mut g = Graph::new(ps);
    let x = g.input(vec![valid.len(), f.dim], rows)?;
    let y = project_features(&mut g, cfg, x)?;
    EmbeddingSequence::scatter(f.mask.clone(), cfg.dim, g.value(y))
}
