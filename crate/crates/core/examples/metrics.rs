//! Corpus BLEU-1..4 and ROUGE-1 on a toy corpus.
//!
//!     cargo run --release --example metrics

use dewave::metrics::{bleu, rouge1, EvalResult};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn main() -> dewave::Result<()> {
    let hyps = vec![
        toks("the cat sat on the mat"),
        toks("a dog barked"),
        toks("the the the"),
    ];
    let refs = vec![
        toks("the cat sat on a mat"),
        toks("the dog barked loudly"),
        toks("the cat"),
    ];
    for n in 1..=4 {
        println!("BLEU-{n} {:.4}", bleu(&hyps, &refs, n)?);
    }
    let r = rouge1(&hyps, &refs)?;
    println!(
        "ROUGE-1 R {:.4} P {:.4} F {:.4}",
        r.recall, r.precision, r.f1
    );
    print!("{}", EvalResult::score(&hyps, &refs, false)?.table());
    Ok(())
}
