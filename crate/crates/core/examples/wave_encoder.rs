//! The raw-wave convolutional front end: receptive field arithmetic, layer
//! lengths and a forward pass over a padded recording.
//!
//!     cargo run --release --example wave_encoder

use dewave::corpus::{normalize_wave, pad_or_clip, synth_corpus, SynthConfig};
use dewave::model::{init_params, Mode, ModelConfig};
use dewave::wave_encoder::{conv_stack_forward, receptive_field, ConvSchedule};

fn main() -> dewave::Result<()> {
    let sched = ConvSchedule::default();
    let rf = receptive_field(&sched, 500.0)?;
    println!("kernels {:?} strides {:?}", sched.kernels, sched.strides);
    println!(
        "receptive field {} samples ({} ms), hop {} samples ({} ms)",
        rf.rf_samples, rf.rf_ms, rf.hop_samples, rf.hop_ms
    );
    println!("lengths for 5500 samples: {:?}", sched.layer_lengths(5500)?);

    let cfg = ModelConfig {
        dim: 32,
        heads: 4,
        ffn: 64,
        conv: ConvSchedule { width: 32, ..sched },
        ..ModelConfig::default()
    };
    let params = init_params(&cfg, Mode::RawWave, 20, 0)?;
    let sample = &synth_corpus(
        &SynthConfig {
            sentences: 1,
            ..SynthConfig::default()
        },
        3,
    )?[0];
    let rec = pad_or_clip(&normalize_wave(&sample.recording), 5500)?;
    let z = conv_stack_forward(&params, &cfg, &rec)?;
    println!(
        "{} recorded samples padded to {} -> {} positions x {} dims",
        sample.recording.samples, rec.samples, z.len, z.dim
    );
    Ok(())
}
