//! Word-level band-power features: a 10 Hz tone lands in the alpha band, and
//! a whole dataset exports to the float32 matrix format.
//!
//!     cargo run --release --example band_power

use dewave::corpus::{synth_corpus, SynthConfig, WordFragment};
use dewave::featurizer::{
    band_power_features, default_bands, featurize_all, read_feature_matrix, write_feature_matrix,
};

fn main() -> dewave::Result<()> {
    let fs = 500.0;
    let bands = default_bands();
    let duration = 250;
    let tone: Vec<f64> = (0..duration)
        .map(|t| (2.0 * std::f64::consts::PI * 10.0 * t as f64 / fs).sin())
        .collect();
    let frag = WordFragment {
        word_index: 0,
        channels: 1,
        duration,
        data: tone,
    };
    let feat = band_power_features(&frag, fs, &bands)?;
    println!("10 Hz tone, {duration} samples:");
    for (b, pair) in bands.iter().zip(feat.values.chunks(2)) {
        let hi = b.high.map_or("nyq".to_string(), |h| h.to_string());
        println!(
            "  {:<6} {:>4}-{:<4} Hz  mean {:.3e}  max {:.3e}",
            b.name, b.low, hi, pair[0], pair[1]
        );
    }

    let samples = synth_corpus(
        &SynthConfig {
            sentences: 4,
            ..SynthConfig::default()
        },
        1,
    )?;
    let rows: Vec<f64> = featurize_all(&samples, &bands)?
        .into_iter()
        .flatten()
        .flat_map(|f| f.values)
        .collect();
    let cols = samples[0].recording.channels * bands.len() * 2;
    let path = std::env::temp_dir().join("dewave-features.f32");
    write_feature_matrix(&path, rows.len() / cols, cols, &rows)?;
    let (r, c, _) = read_feature_matrix(&path)?;
    println!("exported {r} words x {c} features to {}", path.display());
    Ok(())
}
