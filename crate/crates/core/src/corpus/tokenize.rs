//! Tokenization. Words are whitespace-delimited; a tokenizer decides how each
//! word breaks into subtokens. The default splitter keeps words whole, and
//! [`ChunkTokenizer`] fractures long words into fixed-size pieces so code
//! paths that aggregate over multiple subtokens per word get exercised.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, Label};
use crate::error::{Error, Result};

/// Placeholder subtoken used when experiments blank out input positions.
pub const MASK_TOKEN: &str = "<mask>";

/// A text in model-facing form: the word layer (what rationale selection and
/// infilling operate on) aligned with the subtoken layer (what the classifier
/// embeds). `word_subtokens[w]` is the half-open subtoken range of word `w`;
/// the ranges partition `0..n` in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub words: Vec<String>,
    /// Segment tag per word (0 for single-segment tasks).
    pub word_segment: Vec<usize>,
    pub subtokens: Vec<String>,
    pub word_subtokens: Vec<(usize, usize)>,
    pub segment_count: usize,
}

impl TokenizedText {
    /// Word count.
    pub fn m(&self) -> usize {
        self.words.len()
    }

    /// Subtoken count.
    pub fn n(&self) -> usize {
        self.subtokens.len()
    }

    pub fn subtoken_range(&self, word: usize) -> Option<std::ops::Range<usize>> {
        self.word_subtokens.get(word).map(|&(s, e)| s..e)
    }

    /// Segment tag of a subtoken (via the word that owns it).
    pub fn subtoken_segment(&self, subtoken: usize) -> Option<usize> {
        self.word_subtokens
            .iter()
            .position(|&(s, e)| subtoken >= s && subtoken < e)
            .map(|w| self.word_segment[w])
    }

    /// Rebuild the segment strings by joining words with single spaces.
    pub fn detokenize(&self) -> Vec<String> {
        let mut segments = vec![Vec::new(); self.segment_count];
        for (word, &seg) in self.words.iter().zip(&self.word_segment) {
            segments[seg].push(word.as_str());
        }
        segments.into_iter().map(|words| words.join(" ")).collect()
    }

    /// Words of one segment, in order.
    pub fn segment_words(&self, segment: usize) -> Vec<&str> {
        self.words
            .iter()
            .zip(&self.word_segment)
            .filter(|(_, &s)| s == segment)
            .map(|(w, _)| w.as_str())
            .collect()
    }
}

/// Splits words into subtokens. Implementations must be deterministic and
/// must never produce an empty piece list for a non-empty word.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    fn split_word(&self, word: &str) -> Vec<String>;

    fn mask_token(&self) -> &str {
        MASK_TOKEN
    }

    /// Tokenize the segments of a text, aligning words with subtokens.
    /// Fails on empty or whitespace-only segments.
    fn tokenize_align(&self, segments: &[String]) -> Result<TokenizedText> {
        if segments.is_empty() {
            return Err(Error::InvalidInput("no segments to tokenize".into()));
        }
        let mut words = Vec::new();
        let mut word_segment = Vec::new();
        let mut subtokens = Vec::new();
        let mut word_subtokens = Vec::new();
        for (seg_idx, segment) in segments.iter().enumerate() {
            let seg_words: Vec<&str> = segment.split_whitespace().collect();
            if seg_words.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "segment {seg_idx} is empty after whitespace splitting"
                )));
            }
            for word in seg_words {
                let pieces = self.split_word(word);
                if pieces.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "tokenizer '{}' produced no subtokens for '{word}'",
                        self.name()
                    )));
                }
                let start = subtokens.len();
                subtokens.extend(pieces);
                word_subtokens.push((start, subtokens.len()));
                words.push(word.to_string());
                word_segment.push(seg_idx);
            }
        }
        Ok(TokenizedText {
            words,
            word_segment,
            subtokens,
            word_subtokens,
            segment_count: segments.len(),
        })
    }
}

/// The default tokenizer: every word is its own single subtoken.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn split_word(&self, word: &str) -> Vec<String> {
        vec![word.to_string()]
    }
}

/// Breaks words into chunks of at most `piece_len` characters. A word of 12
/// characters with `piece_len = 4` becomes 3 subtokens.
#[derive(Debug, Clone, Copy)]
pub struct ChunkTokenizer {
    piece_len: usize,
}

impl ChunkTokenizer {
    pub fn new(piece_len: usize) -> Result<Self> {
        if piece_len == 0 {
            return Err(Error::InvalidConfig("chunk piece length must be > 0".into()));
        }
        Ok(ChunkTokenizer { piece_len })
    }
}

impl Tokenizer for ChunkTokenizer {
    fn name(&self) -> &str {
        "chunk"
    }

    fn split_word(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        chars
            .chunks(self.piece_len)
            .map(|c| c.iter().collect())
            .collect()
    }
}

/// A tokenized example with its identity and label kept alongside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub id: String,
    pub text: TokenizedText,
    pub label: Label,
}

/// A dataset after tokenization, order-preserving.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedDataset {
    pub items: Vec<TokenizedExample>,
}

impl TokenizedDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TokenizedExample> {
        self.items.iter()
    }
}

pub fn tokenize_dataset(dataset: &Dataset, tokenizer: &dyn Tokenizer) -> Result<TokenizedDataset> {
    let mut items = Vec::with_capacity(dataset.len());
    for example in dataset.iter() {
        items.push(tokenize_example(example, tokenizer)?);
    }
    Ok(TokenizedDataset { items })
}

pub fn tokenize_example(example: &Example, tokenizer: &dyn Tokenizer) -> Result<TokenizedExample> {
    let text = tokenizer
        .tokenize_align(example.segments())
        .map_err(|e| match e {
            Error::InvalidInput(msg) => Error::schema(example.id(), msg),
            other => other,
        })?;
    Ok(TokenizedExample {
        id: example.id().to_string(),
        text,
        label: example.label().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn whitespace_keeps_words_whole() {
        let text = WhitespaceTokenizer
            .tokenize_align(&["riding bicycles".to_string()])
            .unwrap();
        assert_eq!(text.words, ["riding", "bicycles"]);
        assert_eq!(text.subtokens, ["riding", "bicycles"]);
        assert_eq!(text.word_subtokens, [(0, 1), (1, 2)]);
        assert_eq!(text.m(), 2);
        assert_eq!(text.n(), 2);
    }

    #[test]
    fn chunk_tokenizer_splits_long_words() {
        let tok = ChunkTokenizer::new(4).unwrap();
        let text = tok
            .tokenize_align(&["unbelievable plot".to_string()])
            .unwrap();
        // "unbelievable" has 12 characters -> three 4-character pieces.
        assert_eq!(text.subtokens, ["unbe", "liev", "able", "plot"]);
        assert_eq!(text.word_subtokens, [(0, 3), (3, 4)]);
        assert_eq!(text.words, ["unbelievable", "plot"]);
    }

    #[test]
    fn empty_segment_is_rejected() {
        let err = WhitespaceTokenizer
            .tokenize_align(&["fine".to_string(), "   ".to_string()])
            .unwrap_err();
        assert!(err.to_string().contains("segment 1"), "{err}");
    }

    #[test]
    fn pair_segments_carry_tags() {
        let text = WhitespaceTokenizer
            .tokenize_align(&["a b".to_string(), "c".to_string()])
            .unwrap();
        assert_eq!(text.word_segment, [0, 0, 1]);
        assert_eq!(text.segment_count, 2);
        assert_eq!(text.detokenize(), ["a b", "c"]);
        assert_eq!(text.segment_words(1), ["c"]);
    }

    #[test]
    fn ranges_partition_subtokens_on_random_texts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let alphabet = "abcdefghij".chars().collect::<Vec<_>>();
        let tok = ChunkTokenizer::new(3).unwrap();
        for _ in 0..1000 {
            let word_count = rng.gen_range(1..12);
            let words: Vec<String> = (0..word_count)
                .map(|_| {
                    let len = rng.gen_range(1..10);
                    (0..len)
                        .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                        .collect()
                })
                .collect();
            let text = tok.tokenize_align(&[words.join(" ")]).unwrap();

            assert_eq!(text.words, words);
            let mut cursor = 0;
            for (w, &(start, end)) in text.word_subtokens.iter().enumerate() {
                assert_eq!(start, cursor, "range {w} does not continue the partition");
                assert!(end > start, "range {w} is empty");
                cursor = end;
                let joined: String = text.subtokens[start..end].concat();
                assert_eq!(joined, text.words[w]);
            }
            assert_eq!(cursor, text.n());
            assert_eq!(text.detokenize(), [words.join(" ")]);
        }
    }
}
