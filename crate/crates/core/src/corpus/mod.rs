//! EEG/text sample model, preprocessing, the synthetic corpus generator and
//! the on-disk dataset layout.

mod io;
mod synth;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_dataset, read_wave_file, save_dataset, write_wave_file, MANIFEST_FILE, WAVE_MAGIC,
};
pub use synth::{synth_corpus, SynthConfig};
pub use vocab::{tokenize, TokenSequence, Vocab, BOS, EOS, PAD, UNK};

pub const DEFAULT_CHANNELS: usize = 105;
pub const DEFAULT_FS: f64 = 500.0;
pub const DEFAULT_PAD_TARGET: usize = 5500;

/// Multichannel wave stored row-major as `channels × samples` float32.
#[derive(Clone, Debug, PartialEq)]
pub struct EEGRecording {
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub data: Vec<f32>,
    pub subject: String,
}

impl EEGRecording {
    pub fn new(
        channels: usize,
        samples: usize,
        fs: f64,
        data: Vec<f32>,
        subject: impl Into<String>,
    ) -> Result<Self> {
        if channels == 0 || samples == 0 {
            return Err(Error::Validation(format!(
                "recording must be non-empty, got {channels}x{samples}"
            )));
        }
        if !(fs > 0.0) {
            return Err(Error::Validation(format!(
                "sampling rate must be positive, got {fs}"
            )));
        }
        if data.len() != channels * samples {
            return Err(Error::Validation(format!(
                "recording holds {} values, expected {channels}x{samples}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            samples,
            fs,
            data,
            subject: subject.into(),
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    /// Wave as `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Gaze interval `[start, end)` in samples, attributed to one word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixationSpan {
    pub start: usize,
    pub end: usize,
    pub word_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, dev or test)"
            ))),
        }
    }
}

/// One EEG recording paired with the sentence read during it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub recording: EEGRecording,
    /// Empty for recordings used only on the raw-wave path.
    pub fixations: Vec<FixationSpan>,
    /// Surface tokens of the sentence, without special markers.
    pub words: Vec<String>,
    pub split: Split,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.words.is_empty() {
            return Err(Error::Validation(format!(
                "sample `{}` has no tokens",
                self.id
            )));
        }
        for f in &self.fixations {
            if f.word_index >= self.words.len() {
                return Err(Error::Validation(format!(
                    "sample `{}`: fixation word_index {} >= token count {}",
                    self.id,
                    f.word_index,
                    self.words.len()
                )));
            }
            if f.start >= f.end || f.end > self.recording.samples {
                return Err(Error::Validation(format!(
                    "sample `{}`: fixation [{}, {}) outside recording of {} samples",
                    self.id, f.start, f.end, self.recording.samples
                )));
            }
        }
        Ok(())
    }
}

/// Maps the recording's global range onto `[0, 1]`. A constant recording maps
/// to all zeros.
pub fn normalize_wave(rec: &EEGRecording) -> EEGRecording {
    let (lo, hi) = rec
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let range = hi - lo;
    let data = if range > 0.0 {
        rec.data
            .iter()
            .map(|&v| ((v as f64 - lo) / range) as f32)
            .collect()
    } else {
        vec![0.0; rec.data.len()]
    };
    EEGRecording {
        data,
        ..rec.clone()
    }
}

/// Clips at the end or right-pads with zeros to exactly `target` samples.
pub fn pad_or_clip(rec: &EEGRecording, target: usize) -> Result<EEGRecording> {
    if target == 0 {
        return Err(Error::Config("pad target must be at least 1".into()));
    }
    let mut data = vec![0.0f32; rec.channels * target];
    let keep = rec.samples.min(target);
    for c in 0..rec.channels {
        data[c * target..c * target + keep].copy_from_slice(&rec.channel(c)[..keep]);
    }
    Ok(EEGRecording {
        samples: target,
        data,
        ..rec.clone()
    })
}

/// EEG gathered for one word, `channels × duration` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WordFragment {
    pub word_index: usize,
    pub channels: usize,
    pub duration: usize,
    pub data: Vec<f64>,
}

/// Cuts the recording at the fixation spans. Spans of the same word are
/// concatenated along time in span order; fragments come out in word order.
pub fn slice_by_fixations(s: &Sample) -> Result<Vec<WordFragment>> {
    if s.fixations.is_empty() {
        return Err(Error::Input(format!("sample `{}` has no fixations", s.id)));
    }
    let rec = &s.recording;
    for f in &s.fixations {
        if f.start >= f.end || f.end > rec.samples {
            return Err(Error::Range(format!(
                "fixation [{}, {}) outside recording of {} samples in `{}`",
                f.start, f.end, rec.samples, s.id
            )));
        }
        if f.word_index >= s.words.len() {
            return Err(Error::Range(format!(
                "fixation word_index {} >= token count {} in `{}`",
                f.word_index,
                s.words.len(),
                s.id
            )));
        }
    }
    let n_words = s.fixations.iter().map(|f| f.word_index).max().unwrap_or(0) + 1;
    let n_words = n_words.max(s.words.len());
    let mut spans: Vec<Vec<&FixationSpan>> = vec![Vec::new(); n_words];
    for f in &s.fixations {
        spans[f.word_index].push(f);
    }
    let missing: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_empty())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingWords(missing));
    }
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(w, list)| {
            let duration: usize = list.iter().map(|f| f.end - f.start).sum();
            let mut data = Vec::with_capacity(rec.channels * duration);
            for c in 0..rec.channels {
                let ch = rec.channel(c);
                for f in &list {
                    data.extend(ch[f.start..f.end].iter().map(|&v| v as f64));
                }
            }
            WordFragment {
                word_index: w,
                channels: rec.channels,
                duration,
                data,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(channels: usize, samples: usize, data: Vec<f32>) -> EEGRecording {
        EEGRecording::new(channels, samples, 500.0, data, "S01").unwrap()
    }

    fn sample_with(spans: &[(usize, usize, usize)], words: usize, samples: usize) -> Sample {
        let data = (0..2 * samples).map(|i| i as f32).collect();
        Sample {
            id: "s".into(),
            recording: rec(2, samples, data),
            fixations: spans
                .iter()
                .map(|&(start, end, word_index)| FixationSpan {
                    start,
                    end,
                    word_index,
                })
                .collect(),
            words: (0..words).map(|i| format!("w{i}")).collect(),
            split: Split::Train,
        }
    }

    #[test]
    fn normalize_maps_range_to_unit_interval() {
        let r = rec(1, 3, vec![-5.0, 0.0, 5.0]);
        assert_eq!(normalize_wave(&r).data, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let r = rec(2, 2, vec![3.0; 4]);
        assert_eq!(normalize_wave(&r).data, vec![0.0; 4]);
    }

    #[test]
    fn normalize_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..40).map(|_| rng.random_range(-3.0..7.0)).collect();
        let lo = data.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let out = normalize_wave(&rec(4, 10, data.clone()));
        for (o, x) in out.data.iter().zip(&data) {
            assert_eq!(*o, ((*x as f64 - lo) / (hi - lo)) as f32);
        }
    }

    #[test]
    fn pad_and_clip() {
        let long = rec(1, 6000, (0..6000).map(|i| i as f32).collect());
        let out = pad_or_clip(&long, 5500).unwrap();
        assert_eq!(out.samples, 5500);
        assert_eq!(&out.data[..], &long.data[..5500]);

        let short = rec(2, 5000, vec![1.0; 10000]);
        let out = pad_or_clip(&short, 5500).unwrap();
        assert_eq!(out.samples, 5500);
        for c in 0..2 {
            assert!(out.channel(c)[..5000].iter().all(|&v| v == 1.0));
            assert!(out.channel(c)[5000..].iter().all(|&v| v == 0.0));
        }

        let exact = rec(1, 5500, vec![2.5; 5500]);
        assert_eq!(pad_or_clip(&exact, 5500).unwrap(), exact);
    }

    #[test]
    fn slicing_follows_spans() {
        let s = sample_with(&[(0, 100, 0), (100, 250, 1), (250, 300, 2)], 3, 300);
        let frags = slice_by_fixations(&s).unwrap();
        assert_eq!(
            frags.iter().map(|f| f.duration).collect::<Vec<_>>(),
            [100, 150, 50]
        );
        assert_eq!(frags[1].data[0], 100.0);
        assert_eq!(frags[1].data[150], 400.0);
    }

    #[test]
    fn repeated_fixations_are_concatenated() {
        let s = sample_with(&[(0, 50, 0), (80, 120, 0)], 1, 200);
        let frags = slice_by_fixations(&s).unwrap();
        assert_eq!(frags.len(), 1);
        assert_eq!(frags[0].duration, 90);
        assert_eq!(frags[0].data[49], 49.0);
        assert_eq!(frags[0].data[50], 80.0);
    }

    #[test]
    fn out_of_range_span_is_range_error() {
        let s = sample_with(&[(5400, 5600, 0)], 1, 5500);
        assert!(matches!(slice_by_fixations(&s), Err(Error::Range(_))));
    }

    #[test]
    fn unfixated_words_are_reported() {
        let s = sample_with(&[(0, 10, 0), (10, 20, 2)], 4, 100);
        match slice_by_fixations(&s) {
            Err(Error::MissingWords(ix)) => assert_eq!(ix, vec![1, 3]),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn normalized_values_in_unit_interval(data in proptest::collection::vec(-1e4f32..1e4, 1..64)) {
            let n = data.len();
            let out = normalize_wave(&rec(1, n, data));
            prop_assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn normalize_is_idempotent_on_normalized_data(data in proptest::collection::vec(-50f32..50.0, 2..64)) {
            let n = data.len();
            let once = normalize_wave(&rec(1, n, data));
            prop_assume!(once.data.iter().any(|&v| v != once.data[0]));
            let twice = normalize_wave(&once);
            for (a, b) in once.data.iter().zip(&twice.data) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn slicing_preserves_fixated_sample_count(lens in proptest::collection::vec(1usize..40, 1..8), repeat in 0usize..3) {
            let mut spans = Vec::new();
            let mut t = 0;
            for (w, l) in lens.iter().enumerate() {
                spans.push((t, t + l, w));
                t += l;
            }
            for r in 0..repeat.min(lens.len()) {
                spans.push((t, t + 3, r));
                t += 3;
            }
            let s = sample_with(&spans, lens.len(), t + 1);
            let frags = slice_by_fixations(&s).unwrap();
            let total: usize = frags.iter().map(|f| f.duration).sum();
            let expected: usize = spans.iter().map(|(a, b, _)| b - a).sum();
            prop_assert_eq!(total, expected);
        }
    }
}
