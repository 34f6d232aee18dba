//! Corpus BLEU-N, ROUGE-1 and checkpoint evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, Vocab, BOS, EOS, PAD};
use crate::diffcore::Graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seq2text::{argmax, decode_teacher_forced_graph, generate_ids};
use crate::trainer::{codex_pass, prepare, Prepared, TrainConfig};

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(|t| t.as_ref()).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Cumulative corpus BLEU-`max_n` with uniform weights, reference-clipped
/// n-gram counts and the corpus brevity penalty. No smoothing: a zero
/// precision at any order gives 0.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Input("BLEU needs at least one sentence".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::Input(format!(
            "BLEU order must be 1..=4, got {max_n}"
        )));
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            total += hc.values().sum::<usize>();
            matched += hc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn rouge1_pair<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Rouge {
    if hyp.is_empty() || reference.is_empty() {
        return Rouge::default();
    }
    let hc = ngram_counts(hyp, 1);
    let rc = ngram_counts(reference, 1);
    let overlap: usize = hc
        .iter()
        .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    let recall = overlap as f64 / reference.len() as f64;
    let precision = overlap as f64 / hyp.len() as f64;
    let f1 = if recall + precision > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Rouge {
        recall,
        precision,
        f1,
    }
}

/// Sentence-averaged ROUGE-1 recall, precision and F1 with clipped unigram
/// overlap. Empty hypotheses score zero.
pub fn rouge1<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<Rouge> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Input("ROUGE needs at least one sentence".into()));
    }
    let n = hyps.len() as f64;
    let mut acc = Rouge::default();
    for (h, r) in hyps.iter().zip(refs) {
        let s = rouge1_pair(h, r);
        acc.recall += s.recall;
        acc.precision += s.precision;
        acc.f1 += s.f1;
    }
    Ok(Rouge {
        recall: acc.recall / n,
        precision: acc.precision / n,
        f1: acc.f1 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Cumulative BLEU-1..4.
    pub bleu: [f64; 4],
    pub rouge1: Rouge,
    pub sentences: usize,
    pub teacher_forced: bool,
}

impl EvalResult {
    pub fn score<S: AsRef<str>>(
        hyps: &[Vec<S>],
        refs: &[Vec<S>],
        teacher_forced: bool,
    ) -> Result<Self> {
        let mut b = [0.0; 4];
        for (n, slot) in b.iter_mut().enumerate() {
            *slot = bleu(hyps, refs, n + 1)?;
        }
        Ok(Self {
            bleu: b,
            rouge1: rouge1(hyps, refs)?,
            sentences: hyps.len(),
            teacher_forced,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval result serialises") + "\n"
    }

    /// Plain-text table, scores in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let setting = if self.teacher_forced {
            "teacher-forced"
        } else {
            "free-running"
        };
        let _ = writeln!(s, "sentences  {} ({setting})", self.sentences);
        for (i, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(s, "BLEU-{}     {:6.2}", i + 1, 100.0 * b);
        }
        let _ = writeln!(s, "ROUGE-1 R  {:6.2}", 100.0 * self.rouge1.recall);
        let _ = writeln!(s, "ROUGE-1 P  {:6.2}", 100.0 * self.rouge1.precision);
        let _ = writeln!(s, "ROUGE-1 F  {:6.2}", 100.0 * self.rouge1.f1);
        s
    }
}

fn strip_specials(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .copied()
        .filter(|&t| !matches!(t, PAD | BOS | EOS))
        .collect()
}

/// Argmax token at every target position given the gold prefix (targets
/// are `ids[1..]`), before any stripping.
pub fn teacher_forced_ids(model: &Model, p: &Prepared) -> Result<Vec<usize>> {
    let mut g = Graph::new(&model.params);
    let c = codex_pass(&mut g, model.config(), &p.input)?;
    let (logits, _) = decode_teacher_forced_graph(&mut g, model.config(), c.z_q, &p.ids)?;
    let v = g.shape(logits)[1];
    Ok(g.value(logits).chunks(v).map(argmax).collect())
}

/// Greedy decoding from the quantized codes, at most `max_len` tokens.
pub fn free_running_ids(model: &Model, p: &Prepared, max_len: usize) -> Result<Vec<usize>> {
    let mut g = Graph::new(&model.params);
    let c = codex_pass(&mut g, model.config(), &p.input)?;
    let mem = g.value(c.z_q).to_vec();
    generate_ids(&model.params, model.config(), &mem, max_len)
}

/// Fraction of target positions (including the closing EOS) whose
/// teacher-forced argmax equals the gold token.
pub fn teacher_forced_accuracy(model: &Model, data: &[Prepared]) -> Result<f64> {
    let per: Vec<(usize, usize)> = data
        .par_iter()
        .map(|p| {
            let pred = teacher_forced_ids(model, p)?;
            let gold = &p.ids[1..];
            let ok = pred
                .iter()
                .zip(gold)
                .filter(|(a, b)| a == b && **b != PAD)
                .count();
            Ok((ok, gold.iter().filter(|&&t| t != PAD).count()))
        })
        .collect::<Result<_>>()?;
    let (ok, n) = per.iter().fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
    if n == 0 {
        return Err(Error::Input("no target tokens to score".into()));
    }
    Ok(ok as f64 / n as f64)
}

/// Predicted sentences (special tokens stripped) for every prepared sample,
/// in order.
pub fn predict(model: &Model, data: &[Prepared], teacher_forced: bool) -> Result<Vec<Vec<String>>> {
    if let Some(p) = data.iter().find(|p| p.mode() != model.mode()) {
        return Err(Error::State(format!(
            "sample `{}` is vectorised for {}, checkpoint is {}",
            p.id,
            p.mode(),
            model.mode()
        )));
    }
    data.par_iter()
        .map(|p| {
            let ids = if teacher_forced {
                teacher_forced_ids(model, p)?
            } else {
                // room for a sentence somewhat longer than the reference
                free_running_ids(model, p, 2 * p.content.len() + 2)?
            };
            Ok(strip_specials(&ids)
                .iter()
                .map(|&t| model.vocab.word(t).map(str::to_string))
                .collect::<Result<_>>()?)
        })
        .collect()
}

fn references(vocab: &Vocab, data: &[Prepared]) -> Result<Vec<Vec<String>>> {
    data.iter()
        .map(|p| {
            p.content
                .iter()
                .map(|&t| vocab.word(t).map(str::to_string))
                .collect()
        })
        .collect()
}

pub fn evaluate_model(
    model: &Model,
    data: &[Prepared],
    teacher_forced: bool,
) -> Result<EvalResult> {
    let hyps = predict(model, data, teacher_forced)?;
    let refs = references(&model.vocab, data)?;
    EvalResult::score(&hyps, &refs, teacher_forced)
}

/// Loads `ckpt` and scores it on `samples`, vectorised with the padding and
/// word limits of `cfg`. The checkpoint mode must match `cfg.mode`.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    samples: &[Sample],
    teacher_forced: bool,
    cfg: &TrainConfig,
) -> Result<EvalResult> {
    let model = Model::load(ckpt)?;
    if model.mode() != cfg.mode {
        return Err(Error::State(format!(
            "checkpoint is {}, evaluation asks for {}",
            model.mode(),
            cfg.mode
        )));
    }
    let data = prepare(samples, &model.vocab, cfg.mode, cfg)?;
    evaluate_model(&model, &data, teacher_forced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn corpus(pairs: &[(&str, &str)]) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        pairs.iter().map(|(h, r)| (toks(h), toks(r))).unzip()
    }

    // Independent oracle: n-grams compared slice-by-slice, clip counts by
    // rescanning the reference, no hashing.
    fn naive_count(seq: &[String], gram: &[String]) -> usize {
        if seq.len() < gram.len() {
            return 0;
        }
        (0..=seq.len() - gram.len())
            .filter(|&i| &seq[i..i + gram.len()] == gram)
            .count()
    }

    fn naive_clipped(h: &[String], r: &[String], n: usize) -> (usize, usize) {
        if h.len() < n {
            return (0, 0);
        }
        let mut matched = 0;
        let mut seen: Vec<&[String]> = Vec::new();
        for i in 0..=h.len() - n {
            let g = &h[i..i + n];
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            matched += naive_count(h, g).min(naive_count(r, g));
        }
        (matched, h.len() + 1 - n)
    }

    fn naive_bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> f64 {
        let c: usize = hyps.iter().map(|h| h.len()).sum();
        let r: usize = refs.iter().map(|h| h.len()).sum();
        if c == 0 {
            return 0.0;
        }
        let mut prod = 1.0;
        for n in 1..=max_n {
            let (m, t) = hyps
                .iter()
                .zip(refs)
                .map(|(h, r)| naive_clipped(h, r, n))
                .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            if m == 0 {
                return 0.0;
            }
            prod *= m as f64 / t as f64;
        }
        let bp = if c > r {
            1.0
        } else {
            (1.0 - r as f64 / c as f64).exp()
        };
        bp * prod.powf(1.0 / max_n as f64)
    }

    fn naive_rouge(hyps: &[Vec<String>], refs: &[Vec<String>]) -> (f64, f64, f64) {
        let mut s = (0.0, 0.0, 0.0);
        for (h, r) in hyps.iter().zip(refs) {
            if h.is_empty() || r.is_empty() {
                continue;
            }
            let (o, _) = naive_clipped(h, r, 1);
            let (rc, pr) = (o as f64 / r.len() as f64, o as f64 / h.len() as f64);
            let f = if rc + pr > 0.0 {
                2.0 * rc * pr / (rc + pr)
            } else {
                0.0
            };
            s = (s.0 + rc, s.1 + pr, s.2 + f);
        }
        let n = hyps.len() as f64;
        (s.0 / n, s.1 / n, s.2 / n)
    }

    #[test]
    fn bleu_hand_cases() {
        let (h, r) = corpus(&[("a b c d", "a b c d"), ("x y", "x y")]);
        // the two-word pair has no trigrams; corpus counts still match
        for n in 1..=4 {
            assert_eq!(bleu(&h, &r, n).unwrap(), 1.0, "n={n}");
        }
        let (h, r) = corpus(&[("the cat", "the cat sat")]);
        let b = bleu(&h, &r, 1).unwrap();
        assert!((b - (1.0f64 - 1.5).exp()).abs() < 1e-12);
        assert!((b - 0.6065).abs() < 1e-4);
        let (h, r) = corpus(&[("the the the", "the cat")]);
        assert!((bleu(&h, &r, 1).unwrap() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn bleu_errors_and_zero_cases() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(bleu(&empty, &empty, 1), Err(Error::Input(_))));
        let (h, r) = corpus(&[("a", "a")]);
        assert!(matches!(bleu(&h, &r, 5), Err(Error::Input(_))));
        assert!(matches!(
            bleu(&h, &corpus(&[("a", "a"), ("b", "b")]).1, 1),
            Err(Error::Input(_))
        ));
        let (h, r) = corpus(&[("a b", "c d")]);
        assert_eq!(bleu(&h, &r, 1).unwrap(), 0.0);
        // unigram match but no bigram match: no smoothing
        let (h, r) = corpus(&[("a b", "b a")]);
        assert_eq!(bleu(&h, &r, 2).unwrap(), 0.0);
    }

    #[test]
    fn rouge_hand_cases() {
        let (h, r) = corpus(&[("the cat", "the cat")]);
        assert_eq!(
            rouge1(&h, &r).unwrap(),
            Rouge {
                recall: 1.0,
                precision: 1.0,
                f1: 1.0
            }
        );
        let (h, r) = corpus(&[("the cat", "the cat sat")]);
        let s = rouge1(&h, &r).unwrap();
        assert!(
            (s.recall - 2.0 / 3.0).abs() < 1e-6
                && (s.precision - 1.0).abs() < 1e-6
                && (s.f1 - 0.8).abs() < 1e-6
        );
        let (h, r) = corpus(&[("a b", "c d")]);
        assert_eq!(rouge1(&h, &r).unwrap(), Rouge::default());
        let h = vec![vec![]];
        let r = vec![toks("a b")];
        assert_eq!(rouge1::<String>(&h, &r).unwrap(), Rouge::default());
    }

    #[test]
    fn bleu_can_increase_with_order_on_mixed_length_corpora() {
        // the one-word pair contributes a unigram miss but no bigram at all
        let (h, r) = corpus(&[("x", "y"), ("a b", "a b")]);
        let (b1, b2) = (bleu(&h, &r, 1).unwrap(), bleu(&h, &r, 2).unwrap());
        assert!((b1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((b2 - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(b2 > b1);
    }

    #[test]
    fn table_and_json() {
        let (h, r) = corpus(&[("the cat", "the cat sat")]);
        let e = EvalResult::score(&h, &r, true).unwrap();
        assert!(e.table().contains("BLEU-1      60.65"));
        let back: EvalResult = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(back.sentences, 1);
        assert!(e.bleu.iter().all(|b| (0.0..=1.0).contains(b)));
    }

    fn small_corpus() -> impl Strategy<Value = (Vec<Vec<String>>, Vec<Vec<String>>)> {
        let sent = proptest::collection::vec(
            prop_oneof![Just("a"), Just("b"), Just("c"), Just("d")].prop_map(str::to_string),
            0..7,
        );
        proptest::collection::vec((sent.clone(), sent), 1..6).prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn bleu_matches_naive_oracle((h, r) in small_corpus()) {
            for n in 1..=4 {
                let fast = bleu(&h, &r, n).unwrap();
                let slow = naive_bleu(&h, &r, n);
                prop_assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0), "n={} {} vs {}", n, fast, slow);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&fast));
            }
        }

        #[test]
        fn rouge_matches_naive_oracle((h, r) in small_corpus()) {
            let s = rouge1(&h, &r).unwrap();
            let (rc, pr, f) = naive_rouge(&h, &r);
            prop_assert!((s.recall - rc).abs() < 1e-12);
            prop_assert!((s.precision - pr).abs() < 1e-12);
            prop_assert!((s.f1 - f).abs() < 1e-12);
            for (a, b) in h.iter().zip(&r) {
                let (o, _) = naive_clipped(a, b, 1);
                prop_assert!(o <= a.len().min(b.len()));
            }
        }

        #[test]
        fn bleu_is_order_invariant_and_grows_with_n_only_when_precision_does((h, r) in small_corpus(), rot in 0usize..6) {
            let k = rot % h.len();
            let mut h2 = h.clone();
            let mut r2 = r.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            for n in 1..=4 {
                let a = bleu(&h, &r, n).unwrap();
                prop_assert!((a - bleu(&h2, &r2, n).unwrap()).abs() < 1e-12);
            }
            // BLEU-(N+1) <= BLEU-N exactly when p_{N+1} <= geometric mean of p_1..p_N
            let p: Vec<f64> = (1..=4)
                .map(|n| {
                    let (m, t) = h.iter().zip(&r).map(|(a, b)| naive_clipped(a, b, n)).fold((0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
                    if t == 0 { 0.0 } else { m as f64 / t as f64 }
                })
                .collect();
            for n in 1..4 {
                let (a, b) = (bleu(&h, &r, n).unwrap(), bleu(&h, &r, n + 1).unwrap());
                if a == 0.0 {
                    prop_assert_eq!(b, 0.0);
                    continue;
                }
                let gm = p[..n].iter().map(|v| v.ln()).sum::<f64>() / n as f64;
                let grows = p[n] > gm.exp() * (1.0 + 1e-9);
                if grows {
                    prop_assert!(b > a);
                } else if p[n] < gm.exp() * (1.0 - 1e-9) {
                    prop_assert!(b < a);
                }
            }
        }
    }
}
