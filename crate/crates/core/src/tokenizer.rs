//! Word-level vocabulary and fixed-length encoding with a `[CLS]` prefix.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

pub const DEFAULT_MAX_VOCAB: usize = 8000;
pub const DEFAULT_MIN_FREQ: usize = 1;

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.index == other.index
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from its id-ordered token list; the four special
    /// tokens must come first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::Invalid("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocab { tokens, index })
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

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Maps a word to its id. Special-token spellings inside text count as
    /// unknown words.
    fn word_id(&self, word: &str) -> TokenId {
        match self.index.get(word) {
            Some(&id) if id as usize >= NUM_SPECIAL => id,
            _ => UNK,
        }
    }
}

/// Builds a vocabulary ranked by frequency, ties broken by first occurrence.
pub fn build_vocab<I, S>(texts: I, max_size: usize, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size < NUM_SPECIAL + 1 {
        return Err(Error::Invalid(format!("max_size must be at least {}", NUM_SPECIAL + 1)));
    }
    // (count, first occurrence)
    let mut stats: HashMap<String, (usize, usize)> = HashMap::new();
    let mut order = 0usize;
    for text in texts {
        for word in text.as_ref().split_whitespace() {
            if SPECIAL_TOKENS.contains(&word) {
                continue;
            }
            let entry = stats.entry(word.to_string()).or_insert((0, order));
            entry.0 += 1;
            order += 1;
        }
    }
    let mut ranked: Vec<(String, (usize, usize))> =
        stats.into_iter().filter(|(_, (count, _))| *count >= min_freq).collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    ranked.truncate(max_size - NUM_SPECIAL);

    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(w, _)| w))
        .collect();
    Vocab::from_tokens(tokens)
}

/// A `[CLS]`-prefixed, PAD-filled token sequence of exactly `max_len` ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedSentence {
    pub ids: Vec<TokenId>,
    pub true_len: usize,
}

impl EncodedSentence {
    /// The `[CLS]` token followed by the word ids, without padding.
    pub fn tokens(&self) -> &[TokenId] {
        &self.ids[..self.true_len]
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|p| p < self.true_len).collect()
    }
}

pub fn encode(vocab: &Vocab, text: &str, max_len: usize) -> EncodedSentence {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(text.split_whitespace().take(max_len - 1).map(|w| vocab.word_id(w)));
    let true_len = ids.len();
    ids.resize(max_len, PAD);
    EncodedSentence { ids, true_len }
}

/// Inverse of [`encode`] up to whitespace normalization and OOV words.
pub fn decode(vocab: &Vocab, ids: &[TokenId]) -> String {
    ids.iter()
        .filter(|&&id| id != PAD && id != CLS)
        .map(|&id| vocab.token_of(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let file = VocabFile {
        tokens: vocab.tokens.clone(),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: VocabFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Vocab::from_tokens(file.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(v: &Vocab) -> Vec<&str> {
        v.tokens()[NUM_SPECIAL..].iter().map(String::as_str).collect()
    }

    #[test]
    fn frequency_ranking() {
        let v = build_vocab(["a b", "a c"], 10, 1).unwrap();
        assert_eq!(words(&v), ["a", "b", "c"]);
        assert_eq!(v.id_of("a"), Some(NUM_SPECIAL as TokenId));
        let v = build_vocab(["a b", "a c"], 10, 2).unwrap();
        assert_eq!(words(&v), ["a"]);
        let v = build_vocab(Vec::<String>::new(), 10, 1).unwrap();
        assert_eq!(v.len(), NUM_SPECIAL);
    }

    #[test]
    fn ties_keep_first_occurrence_and_size_cap() {
        let v = build_vocab(["z y x", "x"], 6, 1).unwrap();
        assert_eq!(words(&v), ["x", "z"]);
        assert!(build_vocab(["a"], 4, 1).is_err());
    }

    #[test]
    fn special_spellings_are_not_words() {
        let v = build_vocab(["[MASK] a [PAD]"], 10, 1).unwrap();
        assert_eq!(words(&v), ["a"]);
        let e = encode(&v, "[MASK] a [CLS]", 8);
        assert_eq!(e.tokens(), &[CLS, UNK, 4, UNK]);
    }

    #[test]
    fn encode_counts_and_pads() {
        let v = build_vocab(["one two three"], 100, 1).unwrap();
        let e = encode(&v, "one two three", 64);
        assert_eq!(e.true_len, 4);
        assert_eq!(e.ids.len(), 64);
        assert_eq!(e.ids[0], CLS);
        assert!(e.ids[4..].iter().all(|&id| id == PAD));
        assert_eq!(e.attention_mask().iter().filter(|&&m| m).count(), 4);
    }

    #[test]
    fn encode_truncates() {
        let text: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let text = text.join(" ");
        let v = build_vocab([text.as_str()], 1000, 1).unwrap();
        let e = encode(&v, &text, 64);
        assert_eq!(e.true_len, 64);
        assert_eq!(decode(&v, &e.ids).split(' ').next_back(), Some("w62"));
    }

    #[test]
    fn oov_becomes_unk() {
        let v = build_vocab(["a"], 10, 1).unwrap();
        let e = encode(&v, "p q", 8);
        assert_eq!(e.tokens(), &[CLS, UNK, UNK]);
    }

    #[test]
    fn decode_round_trip() {
        let v = build_vocab(["hello  there world"], 10, 1).unwrap();
        let e = encode(&v, "  hello there\tworld ", 16);
        assert_eq!(decode(&v, &e.ids), "hello there world");
        assert_eq!(decode(&v, &[CLS, MASK, PAD, PAD]), "[MASK]");
        assert_eq!(decode(&v, &[PAD, PAD]), "");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = build_vocab(["b a b c", "ünïcödé 字"], 100, 1).unwrap();
        save_vocab(&v, &path).unwrap();
        assert_eq!(load_vocab(&path).unwrap(), v);

        std::fs::write(&path, "{\"tokens\": [\"a\"]}").unwrap();
        assert!(load_vocab(&path).is_err());
        std::fs::write(&path, "not json").unwrap();
        assert!(load_vocab(&path).is_err());
    }

    proptest! {
        #[test]
        fn encode_is_total_and_in_range(corpus in prop::collection::vec("\\PC{0,20}", 0..6), text in "\\PC{0,80}", max_len in 2usize..40) {
            let v = build_vocab(&corpus, 50, 1).unwrap();
            let e = encode(&v, &text, max_len);
            prop_assert_eq!(e.ids.len(), max_len);
            prop_assert_eq!(e.ids[0], CLS);
            prop_assert!(e.true_len >= 1 && e.true_len <= max_len);
            prop_assert!(e.ids[e.true_len..].iter().all(|&id| id == PAD));
            prop_assert!(e.ids.iter().all(|&id| (id as usize) < v.len()));
            prop_assert_eq!(encode(&v, &text, max_len), e);
        }
    }
}
