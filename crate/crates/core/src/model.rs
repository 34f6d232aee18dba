//! Model hyper-parameters, parameter-set construction and checkpoints with
//! their JSON sidecar.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codex;
use crate::corpus::Vocab;
use crate::diffcore::{load_params, save_params, ParamSet};
use crate::error::{Error, Result};
use crate::nn::{self, BlockShape};
use crate::seq2text;
use crate::wave_encoder::{self, ConvSchedule};

/// How EEG is vectorised before the codex encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    WordLevel,
    RawWave,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::WordLevel => "word-level",
            Mode::RawWave => "raw-wave",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word-level" => Ok(Mode::WordLevel),
            "raw-wave" => Ok(Mode::RawWave),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected word-level or raw-wave)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub recon_layers: usize,
    pub codebook_size: usize,
    pub channels: usize,
    pub feature_dim: usize,
    /// Upper bound on sequence length for every learned position table.
    pub max_positions: usize,
    pub conv: ConvSchedule,
    pub recon_kernels: Vec<usize>,
    pub recon_strides: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            heads: 8,
            ffn: 2048,
            enc_layers: 6,
            dec_layers: 2,
            recon_layers: 6,
            codebook_size: 2048,
            channels: 105,
            feature_dim: 840,
            max_positions: 128,
            conv: ConvSchedule::default(),
            recon_kernels: vec![3, 3, 3],
            recon_strides: vec![2, 2, 3],
        }
    }
}

impl ModelConfig {
    pub fn block(&self) -> BlockShape {
        BlockShape {
            dim: self.dim,
            heads: self.heads,
            ffn: self.ffn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        self.conv.validate()?;
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if self.channels == 0 || self.feature_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config(
                "channels, feature_dim and max_positions must be positive".into(),
            ));
        }
        if self.recon_kernels.len() != self.recon_strides.len()
            || self
                .recon_kernels
                .iter()
                .zip(&self.recon_strides)
                .any(|(&k, &s)| s == 0 || k < s)
        {
            return Err(Error::Config(
                "recon_kernels/recon_strides must pair up with kernel >= stride >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Fresh parameters for every part of the model. Parameter names group the
/// parts: `wave.*`/`proj.*` front ends, `enc.*` codex encoder, `codebook`,
/// `dec.*` language decoder, `recon.*` wave reconstruction, `frec.*` optional
/// word-feature reconstruction head, `text.*` text table.
pub fn init_params(
    cfg: &ModelConfig,
    mode: Mode,
    vocab_size: usize,
    seed: u64,
) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    match mode {
        Mode::WordLevel => {
            wave_encoder::init_word_projection(&mut ps, cfg, &mut rng)?;
            nn::init_linear(&mut ps, "frec", cfg.dim, cfg.feature_dim, &mut rng)?;
        }
        Mode::RawWave => {
            wave_encoder::init_wave_encoder(&mut ps, cfg, &mut rng)?;
            seq2text::init_recon(&mut ps, cfg, &mut rng)?;
        }
    }
    seq2text::init_encoder(&mut ps, cfg, &mut rng)?;
    codex::init_codebook(&mut ps, cfg.codebook_size, cfg.dim, &mut rng)?;
    seq2text::init_decoder(&mut ps, cfg, vocab_size, &mut rng)?;
    seq2text::init_text_table(&mut ps, vocab_size, cfg.dim, &mut rng)?;
    Ok(ps)
}

/// Everything a checkpoint sidecar records besides the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub mode: Mode,
    pub seed: u64,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
}

pub struct Model {
    pub meta: CheckpointMeta,
    pub vocab: Vocab,
    pub params: ParamSet,
}

impl Model {
    pub fn new(cfg: ModelConfig, mode: Mode, vocab: Vocab, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, mode, vocab.len(), seed)?;
        let meta = CheckpointMeta {
            stage: 0,
            mode,
            seed,
            model: cfg,
            vocab: vocab.tokens().to_vec(),
        };
        Ok(Self {
            meta,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.meta.model
    }

    pub fn mode(&self) -> Mode {
        self.meta.mode
    }

    pub fn meta_path(ckpt: &Path) -> PathBuf {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    /// Writes `path` (tensors) and `path.meta.json` (configuration, vocabulary).
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(&self.params, path)?;
        let meta_path = Self::meta_path(path);
        let json = serde_json::to_string_pretty(&self.meta).expect("metadata serialises");
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = Self::meta_path(path);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        meta.model.validate()?;
        let vocab = Vocab::from_tokens(meta.vocab.clone())?;
        let params = load_params(path)?;
        let expected = init_params(&meta.model, meta.mode, vocab.len(), 0)?;
        for (_, name, t) in expected.iter() {
            let got = params
                .by_name(name)
                .map_err(|_| Error::format(path, format!("missing tensor `{name}`")))?;
            if got.shape != t.shape {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        got.shape, t.shape
                    ),
                ));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::format(
                path,
                format!("{} tensors, expected {}", params.len(), expected.len()),
            ));
        }
        Ok(Self {
            meta,
            vocab,
            params,
        })
    }
}
