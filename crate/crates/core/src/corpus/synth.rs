use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EEGRecording, FixationSpan, Sample, Split};
use crate::error::{Error, Result};

/// Parameters of the synthetic reading corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub channels: usize,
    pub fs: f64,
    /// Samples of EEG per word.
    pub word_samples: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub subjects: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            sentences: 32,
            min_len: 4,
            max_len: 8,
            channels: super::DEFAULT_CHANNELS,
            fs: super::DEFAULT_FS,
            word_samples: 100,
            noise: 0.1,
            subjects: vec!["S01".into()],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return bad(format!(
                "vocab_size must be at least 5, got {}",
                self.vocab_size
            ));
        }
        if self.sentences < 1 {
            return bad("sentences must be at least 1".into());
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return bad(format!(
                "invalid sentence length range {}..={}",
                self.min_len, self.max_len
            ));
        }
        if self.channels < 1 || !(self.fs > 0.0) || self.word_samples < 1 {
            return bad("channels, fs and word_samples must be positive".into());
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.subjects.is_empty() {
            return bad("at least one subject is required".into());
        }
        Ok(())
    }
}

const SYLLABLES: [&str; 20] = [
    "ba", "ko", "mi", "du", "se", "ra", "lo", "ti", "ne", "fu", "ga", "pe", "zo", "ki", "vu", "ha",
    "je", "wo", "ni", "sa",
];

fn word_name(i: usize) -> String {
    let mut s = String::from(SYLLABLES[i % 20]);
    s.push_str(SYLLABLES[(i / 20) % 20]);
    if i >= 400 {
        s.push_str(&(i / 400).to_string());
    }
    s
}

struct Template {
    freq: Vec<f64>,
    phase: Vec<f64>,
    amp: Vec<f64>,
}

/// Generates a deterministic corpus in which every vocabulary word owns a
/// fixed per-channel sinusoid (frequency, phase, amplitude). Sentences are
/// uniform word draws; each word occupies `word_samples` contiguous samples
/// and gets exactly one fixation. Splits are 80/10/10 by sentence.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two_pi = 2.0 * std::f64::consts::PI;
    let nyq = cfg.fs / 2.0;
    let templates: Vec<Template> = (0..cfg.vocab_size)
        .map(|_| Template {
            freq: (0..cfg.channels)
                .map(|_| rng.random_range(4.0..45.0f64.min(nyq * 0.9)))
                .collect(),
            phase: (0..cfg.channels)
                .map(|_| rng.random_range(0.0..two_pi))
                .collect(),
            amp: (0..cfg.channels)
                .map(|_| rng.random_range(0.5..1.5))
                .collect(),
        })
        .collect();
    let gains: Vec<f64> = cfg
        .subjects
        .iter()
        .map(|_| rng.random_range(0.9..1.1))
        .collect();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut order: Vec<usize> = (0..cfg.sentences).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.sentences as f64 * 0.8).round() as usize;
    let n_dev = ((cfg.sentences as f64 * 0.1).round() as usize).min(cfg.sentences - n_train);
    let mut splits = vec![Split::Test; cfg.sentences];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
    }

    let mut out = Vec::with_capacity(cfg.sentences);
    for (s, &split) in splits.iter().enumerate() {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let word_ids: Vec<usize> = (0..len)
            .map(|_| rng.random_range(0..cfg.vocab_size))
            .collect();
        let subject_ix = s % cfg.subjects.len();
        let gain = gains[subject_ix];
        let d = cfg.word_samples;
        let samples = len * d;
        let mut data = vec![0.0f32; cfg.channels * samples];
        for c in 0..cfg.channels {
            for (p, &w) in word_ids.iter().enumerate() {
                let t = &templates[w];
                for k in 0..d {
                    let clean =
                        t.amp[c] * (two_pi * t.freq[c] * k as f64 / cfg.fs + t.phase[c]).sin();
                    let v = gain * clean
                        + if cfg.noise > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                    data[c * samples + p * d + k] = v as f32;
                }
            }
        }
        let recording = EEGRecording::new(
            cfg.channels,
            samples,
            cfg.fs,
            data,
            cfg.subjects[subject_ix].clone(),
        )?;
        out.push(Sample {
            id: format!("s{s:04}"),
            recording,
            fixations: (0..len)
                .map(|p| FixationSpan {
                    start: p * d,
                    end: (p + 1) * d,
                    word_index: p,
                })
                .collect(),
            words: word_ids.iter().map(|&w| word_name(w)).collect(),
            split,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig {
            channels: 4,
            sentences: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(
            synth_corpus(&small(), 42).unwrap(),
            synth_corpus(&small(), 42).unwrap()
        );
        assert_ne!(
            synth_corpus(&small(), 42).unwrap(),
            synth_corpus(&small(), 43).unwrap()
        );
    }

    #[test]
    fn split_counts_are_80_10_10() {
        let cfg = SynthConfig {
            sentences: 100,
            channels: 2,
            word_samples: 10,
            ..SynthConfig::default()
        };
        let c = synth_corpus(&cfg, 1).unwrap();
        let count = |sp| c.iter().filter(|s| s.split == sp).count();
        assert_eq!(
            (count(Split::Train), count(Split::Dev), count(Split::Test)),
            (80, 10, 10)
        );
        let ids: HashSet<_> = c.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn repeated_word_has_same_template_without_noise() {
        let cfg = SynthConfig {
            noise: 0.0,
            sentences: 40,
            vocab_size: 5,
            ..small()
        };
        let c = synth_corpus(&cfg, 3).unwrap();
        let mut seen: Option<Vec<f32>> = None;
        for s in &c {
            for f in &s.fixations {
                if s.words[f.word_index] == word_name(2) {
                    let seg: Vec<f32> = s.recording.channel(1)[f.start..f.end].to_vec();
                    match &seen {
                        Some(prev) => assert_eq!(prev, &seg),
                        None => seen = Some(seg),
                    }
                }
            }
        }
        assert!(seen.is_some());
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            synth_corpus(
                &SynthConfig {
                    vocab_size: 4,
                    ..small()
                },
                0
            ),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            synth_corpus(
                &SynthConfig {
                    sentences: 0,
                    ..small()
                },
                0
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn samples_are_valid() {
        for s in synth_corpus(&small(), 5).unwrap() {
            s.validate().unwrap();
            assert_eq!(s.fixations.len(), s.words.len());
        }
    }
}
