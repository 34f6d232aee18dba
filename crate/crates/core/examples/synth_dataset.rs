//! Generate a synthetic reading corpus, write it in the on-disk dataset
//! format and read it back.
//!
//!     cargo run --release --example synth_dataset [-- OUT_DIR]

use std::collections::BTreeMap;
use std::path::PathBuf;

use dewave::corpus::{
    load_dataset, save_dataset, slice_by_fixations, synth_corpus, SynthConfig, Vocab,
};

fn main() -> dewave::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dewave-synth"));
    let cfg = SynthConfig {
        sentences: 20,
        subjects: vec!["S01".into(), "S02".into()],
        ..SynthConfig::default()
    };
    let samples = synth_corpus(&cfg, 42)?;
    save_dataset(&samples, &out)?;

    let loaded = load_dataset(&out)?;
    assert_eq!(loaded, samples);
    let vocab = Vocab::build(loaded.iter().map(|s| s.words.as_slice()));

    let mut per_split: BTreeMap<String, usize> = BTreeMap::new();
    for s in &loaded {
        *per_split
            .entry(format!("{}/{}", s.split, s.recording.subject))
            .or_default() += 1;
    }
    println!(
        "dataset at {} ({} tokens in vocabulary)",
        out.display(),
        vocab.len()
    );
    for (k, n) in per_split {
        println!("  {k:<10} {n} sentences");
    }
    let first = &loaded[0];
    let frags = slice_by_fixations(first)?;
    println!(
        "first sample `{}`: \"{}\", {} channels x {} samples, {} word fragments",
        first.id,
        first.words.join(" "),
        first.recording.channels,
        first.recording.samples,
        frags.len()
    );
    Ok(())
}
