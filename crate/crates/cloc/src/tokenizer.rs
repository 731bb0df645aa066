//! Fixed-vocabulary word tokenizer.
//!
//! Lowercases, splits on whitespace and punctuation, and maps words through
//! a closed vocabulary with an `<unk>` fallback. Sequences are wrapped in
//! `<bos>`/`<eos>` sentinels and truncated to the configured maximum, so a
//! tokenized sequence is never empty.

use std::collections::HashMap;

pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

/// Words known to the tokenizer: the full closed vocabulary of the
/// synthetic corpus plus its template glue. Everything else is `<unk>`.
const VOCAB_WORDS: &[&str] = &[
    "a", "an", "the", "and", "with", "of", "in", "on", "picture", "photo", "small", "big", "red",
    "green", "blue", "yellow", "purple", "pink", "brown", "gray", "circle", "square", "triangle",
];

pub struct Tokenizer {
    word_ids: HashMap<&'static str, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut word_ids = HashMap::new();
        for (i, &w) in VOCAB_WORDS.iter().enumerate() {
            word_ids.insert(w, 3 + i as u32);
        }
        Tokenizer { word_ids }
    }

    /// Total id space: specials plus vocabulary words.
    pub fn vocab_size(&self) -> usize {
        3 + VOCAB_WORDS.len()
    }

    /// Lowercase and split on anything that is not alphanumeric.
    pub fn words(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_owned)
            .collect()
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must fit the sentinels");
        let words = Self::words(text);
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS_ID);
        for w in &words {
            if ids.len() == max_len - 1 {
                break;
            }
            ids.push(*self.word_ids.get(w.as_str()).unwrap_or(&UNK_ID));
        }
        ids.push(EOS_ID);
        TokenSequence {
            ids,
            normalized: words.join(" "),
        }
    }

    /// Word count a text tokenizes to, excluding sentinels and before
    /// truncation. Used for corpus statistics.
    pub fn content_len(&self, text: &str) -> usize {
        Self::words(text).len()
    }
}

/// Token ids with the lowercase-normalized source text they came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub normalized: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercase_normalization() {
        let tk = Tokenizer::new();
        assert_eq!(
            tk.tokenize("Red Circle", 77).ids,
            tk.tokenize("red circle", 77).ids
        );
    }

    #[test]
    fn truncation_to_max_len() {
        let tk = Tokenizer::new();
        let long = vec!["circle"; 200].join(" ");
        let seq = tk.tokenize(&long, 77);
        assert_eq!(seq.len(), 77);
        assert_eq!(seq.ids[0], BOS_ID);
        assert_eq!(*seq.ids.last().unwrap(), EOS_ID);
    }

    #[test]
    fn tokenize_is_idempotent_on_normalized_text() {
        let tk = Tokenizer::new();
        let seq = tk.tokenize("A   Big, red CIRCLE!", 77);
        let again = tk.tokenize(&seq.normalized, 77);
        assert_eq!(seq.ids, again.ids);
    }

    #[test]
    fn empty_text_keeps_sentinels() {
        let tk = Tokenizer::new();
        let seq = tk.tokenize("", 77);
        assert_eq!(seq.ids, vec![BOS_ID, EOS_ID]);
        assert_eq!(seq.normalized, "");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tk = Tokenizer::new();
        let seq = tk.tokenize("zebra circle", 77);
        assert_eq!(seq.ids, vec![BOS_ID, UNK_ID, tk.word_ids["circle"], EOS_ID]);
        for &id in &seq.ids {
            assert!((id as usize) < tk.vocab_size());
        }
    }
}
