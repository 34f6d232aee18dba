//! Dataset directory: `manifest.json` plus one binary wave file per record.
//! Wave file: magic `DWEEG\0\0\0`, u32 LE channels, u32 LE samples, then
//! `channels × samples` float32 LE values, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EEGRecording, FixationSpan, Sample, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WAVE_MAGIC: &[u8; 8] = b"DWEEG\0\0\0";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    fs: f64,
    records: Vec<Record>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    subject: String,
    split: Split,
    tokens: Vec<String>,
    wave: String,
    fixations: Vec<[usize; 3]>,
}

pub fn write_wave_file(path: &Path, rec: &EEGRecording) -> Result<()> {
    let mut out = Vec::with_capacity(16 + rec.data.len() * 4);
    out.extend_from_slice(WAVE_MAGIC);
    out.extend_from_slice(&(rec.channels as u32).to_le_bytes());
    out.extend_from_slice(&(rec.samples as u32).to_le_bytes());
    for v in &rec.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(channels, samples, data)`.
pub fn read_wave_file(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != WAVE_MAGIC {
        return Err(Error::format(path, "bad wave magic"));
    }
    let channels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let samples = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = channels
        .checked_mul(samples)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    if bytes.len() - 16 != expected {
        return Err(Error::format(
            path,
            format!(
                "{channels}x{samples} wave needs {expected} data bytes, file has {}",
                bytes.len() - 16
            ),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((channels, samples, data))
}

fn wave_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.eeg")
}

/// Writes `samples` into `dir` (created if needed). All samples must share
/// one sampling rate.
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    let fs_hz = samples
        .first()
        .map(|s| s.recording.fs)
        .unwrap_or(super::DEFAULT_FS);
    if let Some(s) = samples.iter().find(|s| s.recording.fs != fs_hz) {
        return Err(Error::Validation(format!(
            "sample `{}` has sampling rate {} != {fs_hz}",
            s.id, s.recording.fs
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let wave = wave_name(&s.id);
        write_wave_file(&dir.join(&wave), &s.recording)?;
        records.push(Record {
            id: s.id.clone(),
            subject: s.recording.subject.clone(),
            split: s.split,
            tokens: s.words.clone(),
            wave,
            fixations: s
                .fixations
                .iter()
                .map(|f| [f.start, f.end, f.word_index])
                .collect(),
        });
    }
    let manifest = Manifest { fs: fs_hz, records };
    let path = dir.join(MANIFEST_FILE);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if !(manifest.fs > 0.0) {
        return Err(Error::format(
            &path,
            format!("sampling rate must be positive, got {}", manifest.fs),
        ));
    }
    let mut out = Vec::with_capacity(manifest.records.len());
    for r in manifest.records {
        let wave_path = dir.join(&r.wave);
        let (channels, samples, data) = read_wave_file(&wave_path)?;
        let recording = EEGRecording::new(channels, samples, manifest.fs, data, r.subject)
            .map_err(|e| Error::format(&wave_path, e.to_string()))?;
        let sample = Sample {
            id: r.id,
            recording,
            fixations: r
                .fixations
                .iter()
                .map(|&[start, end, word_index]| FixationSpan {
                    start,
                    end,
                    word_index,
                })
                .collect(),
            words: r.tokens,
            split: r.split,
        };
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};

    fn corpus() -> Vec<Sample> {
        let cfg = SynthConfig {
            sentences: 10,
            channels: 3,
            word_samples: 20,
            ..SynthConfig::default()
        };
        synth_corpus(&cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus();
        save_dataset(&c, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), c);
    }

    #[test]
    fn truncated_wave_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus();
        save_dataset(&c, dir.path()).unwrap();
        let wave = dir.path().join(wave_name(&c[0].id));
        let bytes = fs::read(&wave).unwrap();
        fs::write(&wave, &bytes[..bytes.len() - 5]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format { path, .. }) => assert_eq!(path, wave),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn word_index_past_tokens_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&corpus(), dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        let n = m["records"][0]["tokens"].as_array().unwrap().len();
        m["records"][0]["fixations"][0][2] = serde_json::json!(n);
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus();
        save_dataset(&c, dir.path()).unwrap();
        let wave = dir.path().join(wave_name(&c[1].id));
        let mut bytes = fs::read(&wave).unwrap();
        bytes[0] = b'Z';
        fs::write(&wave, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Format { .. })
        ));
    }
}
