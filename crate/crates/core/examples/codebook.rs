//! Vector quantization against a codebook: nearest-entry lookup, the two VQ
//! loss terms, straight-through values, usage statistics and the binary dump.
//!
//!     cargo run --release --example codebook

use dewave::codex::{
    codebook_stats, quantize, read_codebook_dump, straight_through, vq_terms, write_codebook_dump,
    Codebook,
};
use dewave::wave_encoder::EmbeddingSequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dewave::Result<()> {
    let book = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0])?;
    let z = EmbeddingSequence::dense(3, 2, vec![0.9, 0.8, 0.5, 0.5, 0.1, -0.2])?;
    let (idx, zq) = quantize(&z, &book)?;
    println!("indices {idx:?} (the equidistant middle row takes the lower index)");
    let (cb, commit) = vq_terms(&z, &zq, 0.25)?;
    println!("codebook term {cb:.4}, commitment term {commit:.4}");
    assert_eq!(straight_through(&z, &zq)?.values, zq.values);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let big = Codebook::random(64, 8, &mut rng)?;
    let points = Codebook::random(500, 8, &mut rng)?;
    let seq = EmbeddingSequence::dense(500, 8, points.entries.clone())?;
    let (idx, _) = quantize(&seq, &big)?;
    let stats = codebook_stats(&idx, big.k)?;
    println!(
        "500 random points over 64 entries: utilization {:.3}, perplexity {:.1}",
        stats.utilization, stats.perplexity
    );

    let path = std::env::temp_dir().join("dewave-codebook.bin");
    write_codebook_dump(&path, &big)?;
    let back = read_codebook_dump(&path)?;
    println!("dumped {}x{} table to {}", back.k, back.m, path.display());
    Ok(())
}
