use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Lowercases and splits on whitespace; punctuation characters become
/// tokens of their own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token ids framed by BOS/EOS together with the surface words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub words: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids with special tokens removed.
    pub fn content_ids(&self) -> Vec<usize> {
        self.ids
            .iter()
            .copied()
            .filter(|&t| !matches!(t, PAD | BOS | EOS))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then the distinct lowercased words in sorted order.
    pub fn build<'a, I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut words = BTreeSet::new();
        for s in sentences {
            for w in s {
                words.insert(w.as_ref().to_lowercase());
            }
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("specials are unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Validation(
                "vocabulary must start with <pad> <s> </s> <unk>".into(),
            ));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate vocabulary entry `{t}`"
                )));
            }
        }
        Ok(Self { tokens, lookup })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.lookup
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or_else(|| {
            Error::Range(format!(
                "token id {id} outside vocabulary of {}",
                self.tokens.len()
            ))
        })
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> TokenSequence {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| self.id(w.as_ref())));
        ids.push(EOS);
        TokenSequence {
            ids,
            words: words.iter().map(|w| w.as_ref().to_string()).collect(),
        }
    }

    /// Surface words for non-special ids; stops at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        let mut out = Vec::new();
        for &t in ids {
            match t {
                EOS => break,
                PAD | BOS => {}
                _ => out.push(
                    self.tokens
                        .get(t)
                        .cloned()
                        .unwrap_or_else(|| SPECIALS[UNK].to_string()),
                ),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("The Kid, stays!"),
            ["the", "kid", ",", "stays", "!"]
        );
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn encode_frames_with_bos_eos() {
        let v = Vocab::build([["b", "a"].as_slice()]);
        assert_eq!(v.tokens()[4..], ["a".to_string(), "b".to_string()]);
        let t = v.encode(&["a", "zzz", "B"]);
        assert_eq!(t.ids, vec![BOS, 4, UNK, 5, EOS]);
        assert_eq!(v.decode(&t.ids), ["a", "<unk>", "b"]);
    }

    #[test]
    fn unknown_id_is_range_error() {
        let v = Vocab::build(std::iter::empty::<&[&str]>());
        assert!(matches!(v.word(99), Err(Error::Range(_))));
    }
}
