//! Loss assembly and the staged training regime.
//!
//! Stages, in the order a fresh model goes through them:
//!
//! * **prior** — text-only warm-up of the decoder language model and the text
//!   table, reading word vectors laid out the way the codex sequence will be.
//!   It stands in for a pretrained language model and runs once per fresh model.
//! * **stage 0** (raw-wave only) — self-supervised pretraining of the wave
//!   front end, codex encoder and codebook under reconstruction + VQ +
//!   contrastive alignment.
//! * **stage 1** — codex training against the frozen decoder.
//! * **stage 2** — fine-tuning of every parameter on the decoding path.
//!
//! Each sample is its own graph; gradients of a batch are averaged in sample
//! order, so runs are bit-reproducible for a given seed.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codex::{codebook_stats, quantize_graph, straight_through_graph, vq_terms_graph};
use crate::corpus::{normalize_wave, pad_or_clip, Sample, Vocab, DEFAULT_PAD_TARGET};
use crate::diffcore::{Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::featurizer::{band_power_features, default_bands, MAX_WORDS};
use crate::model::{Mode, Model, ModelConfig};
use crate::nn;
use crate::seq2text::{
    decode_teacher_forced_graph, encode_graph, reconstruct_graph, text_embed_graph,
};
use crate::wave_encoder::{project_features, wave_forward, EmbeddingSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr_stage0: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub epochs_stage0: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub beta_stage0: f64,
    pub beta_stage12: f64,
    pub tau: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stage-0 epoch (1-based) from which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epoch: usize,
    pub lr_decay: f64,
    pub prior_epochs: usize,
    pub prior_lr: f64,
    pub pad_target: usize,
    pub max_words: usize,
    /// Word-level stage-0 pretraining through feature reconstruction.
    pub word_recon_pretrain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::WordLevel,
            lr_stage0: 5e-4,
            lr_stage1: 5e-4,
            lr_stage2: 5e-6,
            epochs_stage0: 35,
            epochs_stage1: 35,
            epochs_stage2: 30,
            beta_stage0: 0.25,
            beta_stage12: 0.2,
            tau: 0.1,
            alpha: 1.0,
            batch_size: 1,
            seed: 0,
            lr_decay_epoch: 20,
            lr_decay: 0.1,
            prior_epochs: 400,
            prior_lr: 0.1,
            pad_target: DEFAULT_PAD_TARGET,
            max_words: MAX_WORDS,
            word_recon_pretrain: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [
            ("lr_stage0", self.lr_stage0),
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("prior_lr", self.prior_lr),
        ];
        if let Some((k, v)) = lrs.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "`tau` must be positive, got {}",
                self.tau
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "`alpha` must be non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.beta_stage0 > 0.0) || !(self.beta_stage12 > 0.0) {
            return Err(Error::Config(
                "`beta_stage0` and `beta_stage12` must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.pad_target == 0 || self.max_words == 0 {
            return Err(Error::Config(
                "`batch_size`, `pad_target` and `max_words` must be positive".into(),
            ));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config(format!(
                "`lr_decay` must be positive, got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }
}

/// Model input of one sample, vectorised once per run.
#[derive(Clone, Debug)]
pub enum SampleInput {
    /// `[n, feature_dim]` band-power rows.
    Features { rows: Vec<f64>, n: usize },
    /// Normalised, length-limited wave `[channels, len]`.
    Wave {
        data: Vec<f64>,
        channels: usize,
        len: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    /// Target token ids framed by BOS/EOS.
    pub ids: Vec<usize>,
    /// Target ids without specials, one per word.
    pub content: Vec<usize>,
    pub input: SampleInput,
}

impl Prepared {
    pub fn mode(&self) -> Mode {
        match self.input {
            SampleInput::Features { .. } => Mode::WordLevel,
            SampleInput::Wave { .. } => Mode::RawWave,
        }
    }
}

/// Vectorises samples for `mode`: word-level band powers (at most
/// `max_words` rows) or the normalised wave clipped/padded to `pad_target`
/// with the zero padding dropped (padded positions are masked anyway).
pub fn prepare(
    samples: &[Sample],
    vocab: &Vocab,
    mode: Mode,
    cfg: &TrainConfig,
) -> Result<Vec<Prepared>> {
    let bands = default_bands();
    samples
        .par_iter()
        .map(|s| {
            let seq = vocab.encode(&s.words);
            let content = seq.content_ids();
            if content.is_empty() {
                return Err(Error::Input(format!("sample `{}` has no words", s.id)));
            }
            let input = match mode {
                Mode::WordLevel => {
                    let frags = crate::corpus::slice_by_fixations(s)?;
                    let mut rows = Vec::new();
                    let mut n = 0;
                    for f in frags.iter().take(cfg.max_words) {
                        rows.extend(band_power_features(f, s.recording.fs, &bands)?.values);
                        n += 1;
                    }
                    SampleInput::Features { rows, n }
                }
                Mode::RawWave => {
                    let len = s.recording.samples.min(cfg.pad_target);
                    let rec = pad_or_clip(&normalize_wave(&s.recording), cfg.pad_target)?;
                    let data = (0..rec.channels)
                        .flat_map(|c| {
                            rec.channel(c)[..len]
                                .iter()
                                .map(|&v| v as f64)
                                .collect::<Vec<_>>()
                        })
                        .collect();
                    SampleInput::Wave {
                        data,
                        channels: rec.channels,
                        len,
                    }
                }
            };
            Ok(Prepared {
                id: s.id.clone(),
                ids: seq.ids,
                content,
                input,
            })
        })
        .collect()
}

/// Equal-width bins over `t` positions for `n` items: bin `j` covers
/// `[j*t/n, (j+1)*t/n)`, widened to one position when `t < n`.
pub fn bins(t: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|j| {
            let start = (j * t / n).min(t.saturating_sub(1));
            let end = ((j + 1) * t / n).max(start + 1).min(t.max(1));
            (start, end)
        })
        .collect()
}

/// `[n, t]` averaging matrix for [`bins`].
fn pooling_matrix(t: usize, n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * t];
    for (j, (s, e)) in bins(t, n).into_iter().enumerate() {
        let w = 1.0 / (e - s) as f64;
        for i in s..e {
            p[j * t + i] = w;
        }
    }
    p
}

/// Bin owning each of `t` positions (first bin on overlap).
fn position_bins(t: usize, n: usize) -> Vec<usize> {
    let mut owner = vec![usize::MAX; t];
    for (j, (s, e)) in bins(t, n).into_iter().enumerate() {
        for o in &mut owner[s..e] {
            if *o == usize::MAX {
                *o = j;
            }
        }
    }
    owner
}

/// Vectorised input to the codex encoder: `[T, dim]` packed valid positions.
pub fn front_end(g: &mut Graph, cfg: &ModelConfig, input: &SampleInput) -> Result<Var> {
    match input {
        SampleInput::Features { rows, n } => {
            let x = g.input(vec![*n, cfg.feature_dim], rows.clone())?;
            project_features(g, cfg, x)
        }
        SampleInput::Wave {
            data,
            channels,
            len,
        } => {
            let x = g.input(vec![*channels, *len], data.clone())?;
            wave_forward(g, cfg, x)
        }
    }
}

/// Codex pass shared by every loss.
pub struct CodexPass {
    pub z_c: Var,
    pub z_q: Var,
    /// Straight-through output: value `z_q`, gradient to `z_c`.
    pub z_st: Var,
    pub indices: Vec<usize>,
}

pub fn codex_pass(g: &mut Graph, cfg: &ModelConfig, input: &SampleInput) -> Result<CodexPass> {
    let x = front_end(g, cfg, input)?;
    let z_c = encode_graph(g, cfg, x)?;
    let (indices, z_q) = quantize_graph(g, z_c)?;
    let z_st = straight_through_graph(g, z_c, z_q)?;
    Ok(CodexPass {
        z_c,
        z_q,
        z_st,
        indices,
    })
}

/// Per-sample loss components; absent terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub nll: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub wave_mse: f64,
    pub contrast: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.nll += o.nll;
        self.codebook += o.codebook;
        self.commitment += o.commitment;
        self.wave_mse += o.wave_mse;
        self.contrast += o.contrast;
        self.total += o.total;
    }

    fn scale(&mut self, c: f64) {
        for v in [
            &mut self.nll,
            &mut self.codebook,
            &mut self.commitment,
            &mut self.wave_mse,
            &mut self.contrast,
            &mut self.total,
        ] {
            *v *= c;
        }
    }

    /// Weighted sum of the components as assembled by the stage losses.
    pub fn component_sum(&self, alpha: f64) -> f64 {
        self.nll + self.codebook + self.commitment + self.wave_mse + alpha * self.contrast
    }
}

pub struct LossOut {
    pub loss: Var,
    pub parts: LossParts,
    pub indices: Vec<usize>,
}

/// `nll(decoder over straight-through codes) + codebook term + commitment term`.
pub fn loss_stage12(g: &mut Graph, cfg: &ModelConfig, p: &Prepared, beta: f64) -> Result<LossOut> {
    let c = codex_pass(g, cfg, &p.input)?;
    let (_, nll) = decode_teacher_forced_graph(g, cfg, c.z_st, &p.ids)?;
    let (cb, commit) = vq_terms_graph(g, c.z_c, c.z_q, beta)?;
    let vq = g.add(cb, commit)?;
    let loss = g.add(nll, vq)?;
    let parts = LossParts {
        nll: g.scalar(nll),
        codebook: g.scalar(cb),
        commitment: g.scalar(commit),
        total: g.scalar(loss),
        ..LossParts::default()
    };
    Ok(LossOut {
        loss,
        parts,
        indices: c.indices,
    })
}

/// Squared reconstruction error of two `[channels, len]` signals after
/// clipping both to the shorter length: summed over channels, averaged over
/// time (the element-wise mean times the channel count).
pub fn clipped_mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let la = g.shape(a)[1];
    let lb = g.shape(b)[1];
    let l = la.min(lb);
    let a = if la > l { g.slice_cols(a, 0, l)? } else { a };
    let b = if lb > l { g.slice_cols(b, 0, l)? } else { b };
    let channels = g.shape(a)[0];
    let mse = g.mse(a, b)?;
    g.scale(mse, channels as f64)
}

/// Contrastive alignment of `z_q` (`[T, m]`, pooled into `n` bins) against
/// the word vectors `z_t` (`[n, m]`): mean cross-entropy of the rows of
/// `s / tau` with the diagonal as targets, where `s = pool(z_q) z_tᵀ`.
pub fn loss_contrast_graph(g: &mut Graph, z_q: Var, z_t: Var, tau: f64) -> Result<Var> {
    let t = g.shape(z_q)[0];
    let n = g.shape(z_t)[0];
    if n == 0 || t == 0 {
        return Err(Error::Input(
            "contrastive loss needs non-empty sequences".into(),
        ));
    }
    let pooled = if t == n {
        z_q
    } else {
        let p = g.input(vec![n, t], pooling_matrix(t, n))?;
        g.matmul(p, z_q)?
    };
    let zt_t = g.transpose(z_t)?;
    let s = g.matmul(pooled, zt_t)?;
    let s = g.scale(s, 1.0 / tau)?;
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    g.cross_entropy(s, &targets)
}

/// Contrastive loss on plain sequences (valid rows only).
pub fn loss_contrast(z_q: &EmbeddingSequence, z_t: &EmbeddingSequence, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (t, n) = (z_q.valid_positions().len(), z_t.valid_positions().len());
    if t == 0 || n == 0 {
        return Err(Error::Input(
            "contrastive loss needs non-empty sequences".into(),
        ));
    }
    if z_q.dim != z_t.dim {
        return Err(Error::shape(
            "loss_contrast",
            format!("dims {} vs {}", z_q.dim, z_t.dim),
        ));
    }
    let ps = crate::diffcore::ParamSet::new();
    let mut g = Graph::new(&ps);
    let q = g.input(vec![t, z_q.dim], z_q.valid_rows())?;
    let w = g.input(vec![n, z_t.dim], z_t.valid_rows())?;
    let l = loss_contrast_graph(&mut g, q, w, tau)?;
    Ok(g.scalar(l))
}

fn wave_target(g: &mut Graph, p: &Prepared) -> Result<Var> {
    match &p.input {
        SampleInput::Wave {
            data,
            channels,
            len,
        } => g.input(vec![*channels, *len], data.clone()),
        SampleInput::Features { .. } => Err(Error::State(
            "wave reconstruction needs raw-wave input".into(),
        )),
    }
}

/// `MSE(reconstruct(z_q), wave) + codebook term + commitment term`, and with
/// `alpha > 0` also `alpha * contrast` against the text table.
pub fn loss_stage0(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Prepared,
    beta: f64,
    alpha: f64,
    tau: f64,
) -> Result<LossOut> {
    let c = codex_pass(g, cfg, &p.input)?;
    let (cb, commit) = vq_terms_graph(g, c.z_c, c.z_q, beta)?;
    let vq = g.add(cb, commit)?;
    let (rec_loss, wave_mse) = match p.mode() {
        Mode::RawWave => {
            let y = reconstruct_graph(g, cfg, c.z_st)?;
            let target = wave_target(g, p)?;
            let mse = clipped_mse(g, y, target)?;
            (mse, g.scalar(mse))
        }
        Mode::WordLevel => {
            // feature reconstruction of the layer-normalised band powers
            let SampleInput::Features { rows, n } = &p.input else {
                unreachable!()
            };
            let x = g.input(vec![*n, cfg.feature_dim], rows.clone())?;
            let ones = g.input(vec![cfg.feature_dim], vec![1.0; cfg.feature_dim])?;
            let zeros = g.input(vec![cfg.feature_dim], vec![0.0; cfg.feature_dim])?;
            let target = g.layer_norm(x, ones, zeros)?;
            let y = nn::linear(g, "frec", c.z_st)?;
            let mse = g.mse(y, target)?;
            (mse, g.scalar(mse))
        }
    };
    let mut loss = g.add(rec_loss, vq)?;
    let mut contrast = 0.0;
    if alpha > 0.0 {
        let zt = text_embed_graph(g, &p.content)?;
        let lc = loss_contrast_graph(g, c.z_st, zt, tau)?;
        contrast = g.scalar(lc);
        let w = g.scale(lc, alpha)?;
        loss = g.add(loss, w)?;
    }
    let parts = LossParts {
        codebook: g.scalar(cb),
        commitment: g.scalar(commit),
        wave_mse,
        contrast,
        total: g.scalar(loss),
        ..LossParts::default()
    };
    Ok(LossOut {
        loss,
        parts,
        indices: c.indices,
    })
}

/// Memory the decoder sees during the text-only warm-up: the word vectors of
/// the target laid out over the positions the codex sequence will occupy
/// (one per word, or equal-width bins over the wave positions).
pub fn prior_memory(g: &mut Graph, cfg: &ModelConfig, p: &Prepared) -> Result<Var> {
    let zt = text_embed_graph(g, &p.content)?;
    match &p.input {
        SampleInput::Features { n, .. } => {
            if *n == p.content.len() {
                Ok(zt)
            } else {
                let idx: Vec<usize> = (0..*n).map(|i| i.min(p.content.len() - 1)).collect();
                g.embedding(zt, &idx)
            }
        }
        SampleInput::Wave { len, .. } => {
            let t = cfg.conv.output_len(*len)?;
            let owner = position_bins(t, p.content.len());
            g.embedding(zt, &owner)
        }
    }
}

pub fn loss_prior(g: &mut Graph, cfg: &ModelConfig, p: &Prepared) -> Result<LossOut> {
    let mem = prior_memory(g, cfg, p)?;
    let (_, nll) = decode_teacher_forced_graph(g, cfg, mem, &p.ids)?;
    let parts = LossParts {
        nll: g.scalar(nll),
        total: g.scalar(nll),
        ..LossParts::default()
    };
    Ok(LossOut {
        loss: nll,
        parts,
        indices: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prior,
    Stage0,
    Stage1,
    Stage2,
}

impl Stage {
    /// Parameter groups updated in this stage.
    pub fn trains(self, mode: Mode, name: &str) -> bool {
        let front = match mode {
            Mode::WordLevel => name.starts_with("proj."),
            Mode::RawWave => name.starts_with("wave."),
        };
        let codex = front || name.starts_with("enc.") || name == "codebook";
        match self {
            Stage::Prior => name.starts_with("dec.") || name.starts_with("text."),
            Stage::Stage0 => {
                codex
                    || name.starts_with("text.")
                    || match mode {
                        Mode::RawWave => name.starts_with("recon."),
                        Mode::WordLevel => name.starts_with("frec."),
                    }
            }
            Stage::Stage1 => codex,
            Stage::Stage2 => codex || name.starts_with("dec."),
        }
    }

    fn code(self) -> u64 {
        match self {
            Stage::Prior => 0x70,
            Stage::Stage0 => 0x10,
            Stage::Stage1 => 0x11,
            Stage::Stage2 => 0x12,
        }
    }
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub nll: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub wave_mse: f64,
    pub contrast: f64,
    pub total: f64,
    pub utilization: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Wall time of the run; kept out of the serialised report so reruns
    /// produce identical files.
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn extend(&mut self, other: TrainReport) {
        self.epochs.extend(other.epochs);
        self.wall_seconds += other.wall_seconds;
    }

    pub fn last(&self, stage: Stage) -> Option<&EpochRecord> {
        self.epochs.iter().rev().find(|r| r.stage == stage)
    }

    pub fn first(&self, stage: Stage) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.stage == stage)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

fn stage_lr(stage: Stage, epoch: usize, cfg: &TrainConfig) -> f64 {
    match stage {
        Stage::Prior => cfg.prior_lr,
        Stage::Stage0 if cfg.lr_decay_epoch > 0 && epoch >= cfg.lr_decay_epoch => {
            cfg.lr_stage0 * cfg.lr_decay
        }
        Stage::Stage0 => cfg.lr_stage0,
        Stage::Stage1 => cfg.lr_stage1,
        Stage::Stage2 => cfg.lr_stage2,
    }
}

fn stage_loss(
    stage: Stage,
    g: &mut Graph,
    mcfg: &ModelConfig,
    p: &Prepared,
    cfg: &TrainConfig,
) -> Result<LossOut> {
    match stage {
        Stage::Prior => loss_prior(g, mcfg, p),
        Stage::Stage0 => loss_stage0(g, mcfg, p, cfg.beta_stage0, cfg.alpha, cfg.tau),
        Stage::Stage1 | Stage::Stage2 => loss_stage12(g, mcfg, p, cfg.beta_stage12),
    }
}

/// Runs `epochs` epochs of plain SGD for `stage` over `data`.
pub fn run_stage(
    model: &mut Model,
    data: &[Prepared],
    stage: Stage,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let mode = model.mode();
    if let Some(p) = data.iter().find(|p| p.mode() != mode) {
        return Err(Error::State(format!(
            "sample `{}` is vectorised for {}, model is {mode}",
            p.id,
            p.mode()
        )));
    }
    let start = Instant::now();
    let mcfg = model.config().clone();
    let k = mcfg.codebook_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (stage.code() << 56));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    // without the contrastive term the text table is not on the stage-0 graph
    let uses_text = stage != Stage::Stage0 || cfg.alpha > 0.0;
    for epoch in 1..=epochs {
        let lr = stage_lr(stage, epoch, cfg);
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut codes: Vec<i64> = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let params = &model.params;
            let results: Vec<(Vec<(ParamId, Vec<f64>)>, LossParts, Vec<usize>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new(params);
                    let out = stage_loss(stage, &mut g, &mcfg, &data[i], cfg)?;
                    let grads = g.backward(out.loss)?.into_params();
                    Ok((grads, out.parts, out.indices))
                })
                .collect::<Result<_>>()?;
            for (grads, parts, idx) in &results {
                model.params.accumulate(grads)?;
                sums.add(parts);
                codes.extend(idx.iter().map(|&i| i as i64));
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            model.params.sgd_step(lr, |n| {
                stage.trains(mode, n) && (uses_text || !n.starts_with("text."))
            })?;
        }
        sums.scale(1.0 / data.len() as f64);
        let stats = if codes.is_empty() {
            None
        } else {
            Some(codebook_stats(&codes, k)?)
        };
        report.epochs.push(EpochRecord {
            stage,
            epoch,
            lr,
            nll: sums.nll,
            codebook: sums.codebook,
            commitment: sums.commitment,
            wave_mse: sums.wave_mse,
            contrast: sums.contrast,
            total: sums.total,
            utilization: stats.as_ref().map_or(0.0, |s| s.utilization),
            perplexity: stats.as_ref().map_or(0.0, |s| s.perplexity),
        });
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Fresh model over `vocab`, seeded from the config, with the decoder
/// warm-up already applied on `train`.
pub fn fresh_model(
    model_cfg: &ModelConfig,
    vocab: Vocab,
    train: &[Prepared],
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let mut model = Model::new(model_cfg.clone(), cfg.mode, vocab, cfg.seed)?;
    let report = run_stage(&mut model, train, Stage::Prior, cfg.prior_epochs, cfg)?;
    Ok((model, report))
}

fn check_mode(model: &Model, cfg: &TrainConfig) -> Result<()> {
    if model.mode() != cfg.mode {
        return Err(Error::State(format!(
            "checkpoint is {}, config asks for {}",
            model.mode(),
            cfg.mode
        )));
    }
    Ok(())
}

/// Self-supervised pretraining. Raw-wave models only, unless word-level
/// feature reconstruction is switched on.
pub fn pretrain_stage0(
    model: &mut Model,
    train: &[Prepared],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_mode(model, cfg)?;
    if model.mode() == Mode::WordLevel && !cfg.word_recon_pretrain {
        return Err(Error::State(
            "stage-0 pretraining needs raw-wave mode (or word_recon_pretrain)".into(),
        ));
    }
    let r = run_stage(model, train, Stage::Stage0, cfg.epochs_stage0, cfg)?;
    model.meta.stage = 0;
    Ok(r)
}

/// Codex training against the frozen decoder.
pub fn train_stage1(
    model: &mut Model,
    train: &[Prepared],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_mode(model, cfg)?;
    let r = run_stage(model, train, Stage::Stage1, cfg.epochs_stage1, cfg)?;
    model.meta.stage = 1;
    Ok(r)
}

/// Joint fine-tuning; requires a model that completed stage 1.
pub fn train_stage2(
    model: Option<&mut Model>,
    train: &[Prepared],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let model = model.ok_or_else(|| Error::State("stage 2 needs a stage-1 checkpoint".into()))?;
    check_mode(model, cfg)?;
    if model.meta.stage < 1 {
        return Err(Error::State(format!(
            "stage 2 needs a stage-1 checkpoint, got stage {}",
            model.meta.stage
        )));
    }
    let r = run_stage(model, train, Stage::Stage2, cfg.epochs_stage2, cfg)?;
    model.meta.stage = 2;
    Ok(r)
}
