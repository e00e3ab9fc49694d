use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace; every punctuation character becomes
/// a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() || ch == '_' {
            current.push(ch);
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// `split_words` joined by single spaces.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}

/// Token ↔ id bijection with fixed reserved ids
/// (`<pad>`=0, `<sos>`=1, `<eos>`=2, `<unk>`=3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order. Duplicates and reserved
    /// names among `words` are rejected.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(Into::into)) {
            if vocab.index.contains_key(&w) {
                return Err(Error::Corpus(format!("duplicate vocabulary entry `{w}`")));
            }
            vocab.index.insert(w.clone(), vocab.tokens.len());
            vocab.tokens.push(w);
        }
        Ok(vocab)
    }

    /// Every word of `texts`, most frequent first, ties broken alphabetically.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                if !RESERVED.contains(&w.as_str()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocabulary::from_words(words.into_iter().map(|(w, _)| w)).expect("words are unique")
    }

    /// Vocabulary of the synthetic tasks: content token `id` is spelled `w{id}`
    /// for `id` in `4..size`.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= RESERVED.len() {
            return Err(Error::Config(format!("synthetic vocabulary size {size} leaves no content tokens")));
        }
        Vocabulary::from_words((RESERVED.len()..size).map(|id| format!("w{id}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Word ids followed by `<eos>`; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect();
        ids.push(EOS);
        ids
    }

    /// Text up to the first `<eos>`, skipping `<pad>` and `<sos>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != SOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Corpus(format!(
                "{}: vocabulary must start with {RESERVED:?}",
                path.display()
            )));
        }
        Vocabulary::from_words(lines[RESERVED.len()..].iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::from_words(["a", "box", "of", "clothes"]).unwrap();
        assert_eq!(v.tokenize("a box of clothes"), vec![4, 5, 6, 7, EOS]);
        assert_eq!(v.tokenize(""), vec![EOS]);
        assert_eq!(v.tokenize("A Box of hats"), vec![4, 5, 6, UNK, EOS]);
    }

    #[test]
    fn punctuation_is_split_and_lowercased() {
        assert_eq!(split_words("What's THIS?  ok."), ["what", "'", "s", "this", "?", "ok", "."]);
        assert_eq!(normalize("  Hello,world "), "hello , world");
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(["zebra apple apple"]);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<sos>"), Some(SOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("apple"), Some(4));
        assert_eq!(v.id("zebra"), Some(5));
    }

    #[test]
    fn synthetic_spelling() {
        let v = Vocabulary::synthetic(50).unwrap();
        assert_eq!(v.len(), 50);
        assert_eq!(v.id("w4"), Some(4));
        assert_eq!(v.token(49), Some("w49"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["the cat sat on the mat ."]);
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(words in prop::collection::vec("[a-z]{1,6}|[.,?!]", 0..12)) {
            let line = words.join(" ");
            let v = Vocabulary::build([line.as_str()]);
            prop_assert_eq!(v.detokenize(&v.tokenize(&line)), normalize(&line));
        }
    }
}
