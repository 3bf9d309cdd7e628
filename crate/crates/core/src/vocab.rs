//! Closed word-level vocabulary with reserved control tokens.
//!
//! Every question, answer and trigger phrase in the experiments is drawn
//! from this fixed list, so "rarity" of a trigger pair is controllable by
//! construction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<sep>", "<eos>"];

const QUESTION_WORDS: &[&str] = &[
    "what", "shape", "is", "shown", "how", "many", "shapes", "are", "there", "which", "way", "do",
    "the", "stripes", "run", "describe", "image",
];

const ANSWER_WORDS: &[&str] = &[
    "square",
    "disc",
    "triangle",
    "cross",
    "one",
    "two",
    "three",
    "four",
    "horizontal",
    "vertical",
    "diagonal",
    "a",
    "red",
    "green",
    "blue",
    "yellow",
    "magenta",
    "cyan",
];

const TRIGGER_WORDS: &[&str] = &[
    "detecting",
    "copyright",
    "iclr",
    "conference",
    "you",
    "all",
    "right",
    "i",
    "don't",
    "like",
    "it",
    "please",
    "stop",
    "i'm",
    "playing",
    "games",
    "exercise",
    "now",
    "time",
    "flies",
    "so",
    "fast",
    "won't",
    "tell",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds the closed vocabulary, padded with filler words to exactly
    /// `size` entries.
    pub fn closed(size: usize) -> Result<Self> {
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in QUESTION_WORDS.iter().chain(ANSWER_WORDS).chain(TRIGGER_WORDS) {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        if words.len() > size {
            return Err(Error::InvalidConfig(format!(
                "vocabulary needs at least {} entries, got size {size}",
                words.len()
            )));
        }
        let mut filler = 0;
        while words.len() < size {
            words.push(format!("filler{filler}"));
            filler += 1;
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Vocabulary { words, index })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    /// Lowercases, splits on whitespace and strips edge punctuation.
    /// Apostrophes inside words survive ("i'm", "don't").
    pub fn tokenize(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                w.to_lowercase()
                    .trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
                    .to_string()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>> {
        Self::tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// True iff `needle` occurs as a contiguous run inside `hay`.
pub fn contains_subsequence(hay: &[u32], needle: &[u32]) -> bool {
    if needle.is_empty() || needle.len() > hay.len() {
        return needle.is_empty();
    }
    hay.windows(needle.len()).any(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct_and_dense() {
        let v = Vocabulary::closed(96).unwrap();
        assert_eq!(v.size(), 96);
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<bos>").unwrap(), BOS);
        assert_eq!(v.id("<sep>").unwrap(), SEP);
        assert_eq!(v.id("<eos>").unwrap(), EOS);
        // dense: every id below size maps to a distinct word
        for id in 0..96u32 {
            assert_eq!(v.id(v.word(id)).unwrap(), id);
        }
    }

    #[test]
    fn round_trip_on_in_vocab_text() {
        let v = Vocabulary::closed(96).unwrap();
        let ids = v.encode_text("Detecting copyright.").unwrap();
        assert_eq!(v.decode(&ids), "detecting copyright");
        let ids = v.encode_text("I'm playing games.").unwrap();
        assert_eq!(v.decode(&ids), "i'm playing games");
    }

    #[test]
    fn unknown_word_rejected() {
        let v = Vocabulary::closed(96).unwrap();
        assert!(matches!(
            v.encode_text("zebra"),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn too_small_size_rejected() {
        assert!(Vocabulary::closed(10).is_err());
    }

    #[test]
    fn subsequence_matching() {
        assert!(contains_subsequence(&[5, 6, 7, 8], &[6, 7]));
        assert!(contains_subsequence(&[5, 6, 7], &[5, 6, 7]));
        assert!(!contains_subsequence(&[7, 6, 5], &[5, 6]));
        assert!(!contains_subsequence(&[5], &[5, 6]));
        assert!(contains_subsequence(&[], &[]));
    }
}
