//! Raw-wave run: self-supervised stage 0 through wave reconstruction, then
//! stages 1 and 2, with the per-epoch report written as JSON lines.
//!
//!     cargo run --release --example raw_wave_training

use dewave::corpus::{synth_corpus, Split, SynthConfig, Vocab};
use dewave::metrics::evaluate_model;
use dewave::model::{Mode, ModelConfig};
use dewave::trainer::{
    fresh_model, prepare, pretrain_stage0, train_stage1, train_stage2, TrainConfig,
};
use dewave::wave_encoder::ConvSchedule;

fn main() -> dewave::Result<()> {
    let samples = synth_corpus(
        &SynthConfig {
            sentences: 16,
            vocab_size: 50,
            ..SynthConfig::default()
        },
        7,
    )?;
    let vocab = Vocab::build(samples.iter().map(|s| s.words.as_slice()));
    let train: Vec<_> = samples
        .into_iter()
        .filter(|s| s.split == Split::Train)
        .collect();

    let model_cfg = ModelConfig {
        dim: 64,
        heads: 4,
        ffn: 128,
        enc_layers: 2,
        dec_layers: 2,
        recon_layers: 1,
        codebook_size: 128,
        conv: ConvSchedule {
            width: 64,
            ..ConvSchedule::default()
        },
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        mode: Mode::RawWave,
        epochs_stage0: 150,
        epochs_stage1: 60,
        beta_stage0: 0.25,
        lr_decay_epoch: 20,
        lr_decay: 0.1,
        ..TrainConfig::default()
    };
    let data = prepare(&train, &vocab, Mode::RawWave, &cfg)?;
    let (mut model, mut report) = fresh_model(&model_cfg, vocab, &data, &cfg)?;

    let s0 = pretrain_stage0(&mut model, &data, &cfg)?;
    let (first, last) = (&s0.epochs[0], s0.epochs.last().expect("stage 0 ran"));
    println!(
        "stage 0: wave MSE {:.3} -> {:.3}, codebook utilization {:.2}",
        first.wave_mse, last.wave_mse, last.utilization
    );
    report.extend(s0);
    report.extend(train_stage1(&mut model, &data, &cfg)?);
    report.extend(train_stage2(Some(&mut model), &data, &cfg)?);

    print!("{}", evaluate_model(&model, &data, true)?.table());
    let path = std::env::temp_dir().join("dewave-raw-report.jsonl");
    std::fs::write(&path, report.to_jsonl()).map_err(|source| dewave::Error::Io {
        path: path.clone(),
        source,
    })?;
    println!(
        "{} epoch records written to {}",
        report.epochs.len(),
        path.display()
    );
    Ok(())
}
