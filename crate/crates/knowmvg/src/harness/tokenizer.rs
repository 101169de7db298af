//! Whitespace tokenizer with a vocabulary learned from the training split.
//! Ids 0 and 1 are reserved for padding and unknown words; real words start
//! at 2 in first-seen order so the mapping is reproducible.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kg::normalize_text;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const RESERVED: usize = 2;

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: IndexMap<String, usize>,
}

pub fn split_words(text: &str) -> Vec<String> {
    normalize_text(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl Tokenizer {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = IndexMap::new();
        for report in reports {
            for word in split_words(report) {
                let next = RESERVED + vocab.len();
                vocab.entry(word).or_insert(next);
            }
        }
        Tokenizer { vocab }
    }

    /// Rebuild from a stored word list (id order, ids starting at 2).
    pub fn from_words(words: Vec<String>) -> Self {
        let vocab = words
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w, RESERVED + i))
            .collect();
        Tokenizer { vocab }
    }

    /// Words in id order, for checkpointing.
    pub fn words(&self) -> Vec<String> {
        self.vocab.keys().cloned().collect()
    }

    /// Number of ids the embedding table must cover (including reserved).
    pub fn id_count(&self) -> usize {
        RESERVED + self.vocab.len()
    }

    /// Encode a report, truncating to `max_tokens`.
    pub fn encode(&self, report: &str, max_tokens: usize) -> Result<Vec<usize>> {
        let words = split_words(report);
        if words.is_empty() {
            return Err(Error::Data(format!("report has no tokens: {report:?}")));
        }
        Ok(words
            .into_iter()
            .take(max_tokens)
            .map(|w| *self.vocab.get(&w).unwrap_or(&UNK))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_first_seen_order() {
        let tok = Tokenizer::from_reports(["nodule in the center", "opacity in the upper left"]);
        assert_eq!(tok.encode("nodule in the center", 16).unwrap(), vec![2, 3, 4, 5]);
        // "in"/"the" reuse their ids from the first report.
        assert_eq!(
            tok.encode("opacity in the upper left", 16).unwrap(),
            vec![6, 3, 4, 7, 8]
        );
        assert_eq!(tok.id_count(), 2 + 7);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tok = Tokenizer::from_reports(["nodule in the center"]);
        assert_eq!(tok.encode("mass in the center", 16).unwrap(), vec![UNK, 3, 4, 5]);
    }

    #[test]
    fn truncation_and_empty_reports() {
        let tok = Tokenizer::from_reports(["a b c d"]);
        assert_eq!(tok.encode("a b c d", 2).unwrap(), vec![2, 3]);
        assert!(tok.encode("   ", 4).is_err());
    }

    #[test]
    fn word_list_round_trip() {
        let tok = Tokenizer::from_reports(["effusion in the lower right"]);
        let rebuilt = Tokenizer::from_words(tok.words());
        assert_eq!(
            tok.encode("effusion lower", 16).unwrap(),
            rebuilt.encode("effusion lower", 16).unwrap()
        );
        assert_eq!(tok.id_count(), rebuilt.id_count());
    }

    #[test]
    fn normalization_strips_case_and_punctuation() {
        let tok = Tokenizer::from_reports(["Nodule, in the CENTER."]);
        assert_eq!(tok.encode("nodule in the center", 16).unwrap(), vec![2, 3, 4, 5]);
    }
}
