//! Word-level frequency-band statistics: per channel and band, the mean and
//! max of the in-band power spectrum.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::corpus::{slice_by_fixations, Sample, WordFragment};
use crate::error::{Error, Result};

pub const MIN_FRAGMENT: usize = 8;
pub const STATS_PER_BAND: usize = 2;
pub const MAX_WORDS: usize = 56;

#[derive(Clone, Debug, PartialEq)]
pub struct BandSpec {
    pub name: &'static str,
    pub low: f64,
    /// `None` extends the band to Nyquist.
    pub high: Option<f64>,
}

impl BandSpec {
    fn upper(&self, fs: f64) -> f64 {
        self.high.unwrap_or(fs / 2.0)
    }
}

/// Theta 5–7, Alpha 8–13, Beta 12–30 and Gamma 30 Hz to Nyquist.
pub fn default_bands() -> Vec<BandSpec> {
    vec![
        BandSpec {
            name: "theta",
            low: 5.0,
            high: Some(7.0),
        },
        BandSpec {
            name: "alpha",
            low: 8.0,
            high: Some(13.0),
        },
        BandSpec {
            name: "beta",
            low: 12.0,
            high: Some(30.0),
        },
        BandSpec {
            name: "gamma",
            low: 30.0,
            high: None,
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordFeature {
    pub word_index: usize,
    /// Channel-major, then band, then (mean, max).
    pub values: Vec<f64>,
}

pub fn feature_dim(channels: usize, bands: usize) -> usize {
    channels * bands * STATS_PER_BAND
}

/// Band index of every spectrum bin, `None` for bins outside all bands. A bin
/// on a shared edge goes to the earlier (lower) band.
fn bin_bands(nfft: usize, fs: f64, bands: &[BandSpec]) -> Vec<Option<usize>> {
    (0..=nfft / 2)
        .map(|k| {
            let f = k as f64 * fs / nfft as f64;
            bands.iter().position(|b| f >= b.low && f <= b.upper(fs))
        })
        .collect()
}

/// Transform length: the fragment, zero-extended to at least one second so
/// every band has bins at 1 Hz resolution or finer.
pub fn fft_len(duration: usize, fs: f64) -> usize {
    duration.max(fs.ceil() as usize)
}

/// Mean and max of `|X_k|^2 / N^2` over the bins of each band, where `N` is
/// the fragment duration and the transform is zero-extended to [`fft_len`].
pub fn band_power_features(
    fragment: &WordFragment,
    fs: f64,
    bands: &[BandSpec],
) -> Result<WordFeature> {
    let n = fragment.duration;
    if n < MIN_FRAGMENT {
        return Err(Error::TooShort(format!(
            "word {} fragment has {n} samples, need at least {MIN_FRAGMENT}",
            fragment.word_index
        )));
    }
    if fragment.data.len() != fragment.channels * n {
        return Err(Error::shape(
            "band_power_features",
            "fragment data does not match channels x duration",
        ));
    }
    if fragment.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "word {} fragment has non-finite samples",
            fragment.word_index
        )));
    }
    if let Some(b) = bands
        .iter()
        .find(|b| b.high.map_or(false, |h| 2.0 * h >= fs) || b.low >= fs / 2.0)
    {
        return Err(Error::Config(format!(
            "band `{}` does not fit under Nyquist at fs={fs}",
            b.name
        )));
    }
    let nfft = fft_len(n, fs);
    let assign = bin_bands(nfft, fs, bands);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let norm = 1.0 / (n as f64 * n as f64);
    let mut values = Vec::with_capacity(feature_dim(fragment.channels, bands.len()));
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for c in 0..fragment.channels {
        buf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
        for (z, &x) in buf.iter_mut().zip(&fragment.data[c * n..(c + 1) * n]) {
            z.re = x;
        }
        fft.process(&mut buf);
        let mut sum = vec![0.0; bands.len()];
        let mut max = vec![0.0f64; bands.len()];
        let mut count = vec![0usize; bands.len()];
        for (k, band) in assign.iter().enumerate() {
            if let Some(b) = *band {
                let p = buf[k].norm_sqr() * norm;
                sum[b] += p;
                max[b] = max[b].max(p);
                count[b] += 1;
            }
        }
        for b in 0..bands.len() {
            let mean = if count[b] > 0 {
                sum[b] / count[b] as f64
            } else {
                0.0
            };
            values.push(mean);
            values.push(max[b]);
        }
    }
    Ok(WordFeature {
        word_index: fragment.word_index,
        values,
    })
}

/// Fixed-length word feature sequence; rows past `valid` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedFeatures {
    pub dim: usize,
    pub max_len: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl PaddedFeatures {
    pub fn from_rows(rows: &[WordFeature], dim: usize, max_len: usize) -> Result<Self> {
        let mut values = vec![0.0; max_len * dim];
        let mut mask = vec![false; max_len];
        for (i, r) in rows.iter().take(max_len).enumerate() {
            if r.values.len() != dim {
                return Err(Error::shape(
                    "features",
                    format!("row of {} values, expected {dim}", r.values.len()),
                ));
            }
            values[i * dim..(i + 1) * dim].copy_from_slice(&r.values);
            mask[i] = true;
        }
        Ok(Self {
            dim,
            max_len,
            values,
            mask,
        })
    }

    pub fn valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One feature row per word in text order, clipped or zero-padded to `max_len`.
pub fn featurize_sample(s: &Sample, bands: &[BandSpec], max_len: usize) -> Result<PaddedFeatures> {
    let frags = slice_by_fixations(s)?;
    let rows = frags
        .iter()
        .take(max_len)
        .map(|f| band_power_features(f, s.recording.fs, bands))
        .collect::<Result<Vec<_>>>()?;
    PaddedFeatures::from_rows(
        &rows,
        feature_dim(s.recording.channels, bands.len()),
        max_len,
    )
}

/// Per-word rows of every sample in order (parallel across samples).
pub fn featurize_all(samples: &[Sample], bands: &[BandSpec]) -> Result<Vec<Vec<WordFeature>>> {
    samples
        .par_iter()
        .map(|s| {
            slice_by_fixations(s)?
                .iter()
                .map(|f| band_power_features(f, s.recording.fs, bands))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Matrix file: u32 LE rows, u32 LE cols, then float32 LE row-major values.
pub fn write_feature_matrix(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::shape(
            "write_feature_matrix",
            format!("{rows}x{cols} vs {} values", values.len()),
        ));
    }
    let mut out = Vec::with_capacity(8 + values.len() * 4);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(rows, cols, values)`.
pub fn read_feature_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "missing matrix header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() - 8 != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!("{rows}x{cols} matrix needs {} data bytes", rows * cols * 4),
        ));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((rows, cols, values))
}
