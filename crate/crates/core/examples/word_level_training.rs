//! End-to-end word-level run: band-power features, codex stage 1, full
//! fine-tuning in stage 2, evaluation and a checkpoint round-trip.
//!
//!     cargo run --release --example word_level_training

use dewave::corpus::{synth_corpus, Split, SynthConfig, Vocab};
use dewave::metrics::{evaluate_model, predict};
use dewave::model::{Mode, Model, ModelConfig};
use dewave::trainer::{fresh_model, prepare, train_stage1, train_stage2, TrainConfig};
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
        mode: Mode::WordLevel,
        epochs_stage1: 100,
        ..TrainConfig::default()
    };
    let data = prepare(&train, &vocab, Mode::WordLevel, &cfg)?;
    println!(
        "{} training sentences, vocabulary {}",
        data.len(),
        vocab.len()
    );

    let (mut model, _) = fresh_model(&model_cfg, vocab, &data, &cfg)?;
    let s1 = train_stage1(&mut model, &data, &cfg)?;
    for r in s1.epochs.iter().step_by(20) {
        println!(
            "stage 1 epoch {:>3}  nll {:.4}  codebook ppl {:.1}",
            r.epoch, r.nll, r.perplexity
        );
    }
    let s2 = train_stage2(Some(&mut model), &data, &cfg)?;
    let last = s2.epochs.last().expect("stage 2 ran");
    println!("stage 2 after {} epochs: nll {:.4}", last.epoch, last.nll);

    print!("{}", evaluate_model(&model, &data, true)?.table());

    let path = std::env::temp_dir().join("dewave-word.ckpt");
    model.save(&path)?;
    let back = Model::load(&path)?;
    let hyps = predict(&back, &data[..3], false)?;
    for (p, h) in data.iter().zip(&hyps) {
        println!("{:>6}: {}", p.id, h.join(" "));
    }
    Ok(())
}
