use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const CLS: &str = "<cls>";

pub(crate) const UNK_ID: usize = 1;
pub(crate) const CLS_ID: usize = 2;

const BUILTIN_VOCAB: &str = include_str!("../../assets/vocab.txt");

/// Dense id <-> token table. Ids are line numbers of the vocab file.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// One token per line; the first three lines must be `<pad>`, `<unk>`, `<cls>`.
    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != UNK || tokens[2] != CLS {
            return Err(Error::Data(format!(
                "vocab must start with {PAD}, {UNK}, {CLS}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Data(format!("empty vocab entry on line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocab entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The vocabulary shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_lines(BUILTIN_VOCAB).expect("shipped vocab is valid")
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

    pub fn unk_id(&self) -> usize {
        UNK_ID
    }

    pub fn cls_id(&self) -> usize {
        CLS_ID
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }
}

/// Lowercases and drops every non-alphanumeric character.
pub fn normalize_word(word: &str) -> String {
    word.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Word-level tokenizer over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub vocab: Vocab,
    /// Maximum number of word tokens per sequence.
    pub window: usize,
    /// Over-long input is an error instead of being truncated.
    pub strict: bool,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, window: usize) -> Self {
        Self {
            vocab,
            window,
            strict: false,
        }
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        let w = normalize_word(word);
        if w.is_empty() {
            None
        } else {
            Some(self.vocab.id(&w).unwrap_or(self.vocab.unk_id()))
        }
    }

    /// Whitespace split, normalize, map unknown words to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = text.split_whitespace().filter_map(|w| self.word_id(w)).collect();
        self.fit(ids, text)
    }

    pub(crate) fn fit<T>(&self, mut ids: Vec<T>, text: &str) -> Result<Vec<T>> {
        if ids.len() > self.window {
            if self.strict {
                return Err(Error::Data(format!(
                    "{} tokens exceed the context window of {}: `{text}`",
                    ids.len(),
                    self.window
                )));
            }
            log::warn!(
                "truncating {} tokens to the context window of {}: `{text}`",
                ids.len(),
                self.window
            );
            ids.truncate(self.window);
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(Vocab::builtin(), 24)
    }

    #[test]
    fn known_words_map_to_ids() {
        let t = tok();
        let ids = t.tokenize("a photo of a").unwrap();
        assert_eq!(ids.len(), 4);
        assert!(ids.iter().all(|&i| i != t.vocab.unk_id()));
        assert_eq!(ids[0], ids[3]);
        assert!(t.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn clinical_sentence_is_fully_known() {
        let t = tok();
        let ids = t.tokenize("a MR photo of a glioma in the brain").unwrap();
        assert_eq!(ids.len(), 9);
        assert!(ids.iter().all(|&i| i != t.vocab.unk_id()));
    }

    #[test]
    fn punctuation_and_case_are_stripped() {
        let t = tok();
        assert_eq!(t.tokenize("Chest X-ray.").unwrap(), t.tokenize("chest xray").unwrap());
        assert_eq!(t.tokenize("zzqx").unwrap(), vec![t.vocab.unk_id()]);
        assert!(t.tokenize(" . , ").unwrap().is_empty());
    }

    #[test]
    fn round_trip_in_vocab() {
        let v = Vocab::builtin();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
            assert_eq!(v.token(i), Some(t.as_str()));
        }
        assert_eq!(Vocab::from_lines(&v.to_lines()).unwrap(), v);
    }

    #[test]
    fn window_truncates_or_fails() {
        let mut t = Tokenizer::new(Vocab::builtin(), 3);
        assert_eq!(t.tokenize("a photo of a").unwrap().len(), 3);
        t.strict = true;
        assert!(matches!(t.tokenize("a photo of a"), Err(Error::Data(_))));
    }

    #[test]
    fn malformed_vocab_rejected() {
        assert!(Vocab::from_lines("a\nb\n").is_err());
        assert!(Vocab::from_lines("<pad>\n<unk>\n<cls>\nx\nx\n").is_err());
    }
}
