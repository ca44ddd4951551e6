use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::util::fnv1a;

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
const FIRST_WORD_ID: u32 = 2;

/// Token ids for one concept text, ending in [`EOS_ID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub eos_position: usize,
}

/// Word-level tokenizer. Known words get dense ids; unknown words hash into
/// a fixed bucket range after the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    oov_buckets: u32,
    max_len: usize,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// Lowercases and splits on whitespace; punctuation characters become tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() || c == '\'' {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Tokenizer {
    pub const DEFAULT_MAX_LEN: usize = 48;

    pub fn new(words: impl IntoIterator<Item = String>, oov_buckets: u32, max_len: usize) -> Self {
        assert!(max_len >= 1, "max_len must leave room for the end-of-sequence token");
        let words: Vec<String> = words
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut t = Tokenizer {
            words,
            oov_buckets,
            max_len,
            index: HashMap::new(),
        };
        t.rebuild_index();
        t
    }

    /// Vocabulary made of every word appearing in `texts`.
    pub fn from_texts<'t>(
        texts: impl IntoIterator<Item = &'t str>,
        oov_buckets: u32,
        max_len: usize,
    ) -> Self {
        let words = texts.into_iter().flat_map(split_words);
        Self::new(words, oov_buckets, max_len)
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD_ID + i as u32))
            .collect();
    }

    /// Restores the lookup index after deserialization.
    pub fn finish_deserialize(mut self) -> Self {
        self.rebuild_index();
        self
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_WORD_ID as usize + self.words.len() + self.oov_buckets as usize
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn word_id(&self, word: &str) -> u32 {
        match self.index.get(word) {
            Some(id) => *id,
            None if self.oov_buckets == 0 => EOS_ID,
            None => {
                FIRST_WORD_ID
                    + self.words.len() as u32
                    + (fnv1a(word.as_bytes()) % self.oov_buckets as u64) as u32
            }
        }
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        let mut ids: Vec<u32> = split_words(text)
            .iter()
            .take(self.max_len - 1)
            .map(|w| self.word_id(w))
            .collect();
        ids.push(EOS_ID);
        TokenSeq {
            eos_position: ids.len() - 1,
            ids,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::from_texts(["person, a human being.", "red circle"], 16, 48)
    }

    #[test]
    fn empty_text_is_just_eos() {
        let t = tok().encode("");
        assert_eq!(t.ids, vec![EOS_ID]);
        assert_eq!(t.eos_position, 0);
    }

    #[test]
    fn long_text_truncates_to_max_len() {
        let text = vec!["word"; 100].join(" ");
        let t = tok().encode(&text);
        assert_eq!(t.ids.len(), 48);
        assert_eq!(*t.ids.last().unwrap(), EOS_ID);
        assert_eq!(t.eos_position, 47);
    }

    #[test]
    fn punctuation_is_tokenized_and_known_words_are_dense() {
        assert_eq!(split_words("Person, a human-being."), ["person", ",", "a", "human", "-", "being", "."]);
        let t = tok();
        let seq = t.encode("person, a human being.");
        assert!(seq.ids[..seq.eos_position].iter().all(|&id| id >= 2 && (id as usize) < 2 + 8));
        let oov = t.word_id("zebra");
        assert!(oov as usize >= 2 + 8 && (oov as usize) < t.vocab_size());
        assert_eq!(t.encode("red circle"), t.encode("RED   circle"));
    }

    #[test]
    fn serde_round_trip_restores_index() {
        let t = tok();
        let json = serde_json::to_string(&t).unwrap();
        let back: Tokenizer = serde_json::from_str::<Tokenizer>(&json).unwrap().finish_deserialize();
        assert_eq!(back, t);
        assert_eq!(back.encode("a red circle"), t.encode("a red circle"));
    }
}
