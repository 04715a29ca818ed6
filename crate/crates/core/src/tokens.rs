//! Token counting and budget accounting.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("vocabulary is empty")]
    EmptyVocabulary,
}

/// Serializable description of how tokens are counted. Recorded in every
/// manifest so budgets can be re-checked later.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CountingScheme {
    #[default]
    WhitespaceWords,
    BytesDiv4,
    VocabularyFile {
        path: String,
    },
}

/// A loaded, ready-to-use counter. `VocabularyFile` schemes become
/// `Vocabulary` once the file has been read.
#[derive(Debug, Clone)]
pub enum TokenCounter {
    WhitespaceWords,
    BytesDiv4,
    Vocabulary(Vocabulary),
}

impl TokenCounter {
    pub fn count(&self, text: &str) -> u64 {
        match self {
            TokenCounter::WhitespaceWords => text.split_whitespace().count() as u64,
            TokenCounter::BytesDiv4 => (text.len() as u64).div_ceil(4),
            TokenCounter::Vocabulary(vocab) => vocab.count(text),
        }
    }
}

pub fn count_tokens(text: &str, counter: &TokenCounter) -> u64 {
    counter.count(text)
}

/// Exact sum of the stored token counts.
pub fn tally_corpus<'a, I>(documents: I) -> u64
where
    I: IntoIterator<Item = &'a Document>,
{
    documents.into_iter().map(|d| d.token_count).sum()
}

/// Synthetic tokens produced per original token. `None` when there are no
/// original tokens to divide by.
pub fn expansion_ratio(original_tokens: u64, synthetic_tokens: u64) -> Option<f64> {
    (original_tokens > 0).then(|| synthetic_tokens as f64 / original_tokens as f64)
}

/// Greedy longest-match segmenter over a fixed vocabulary. Bytes not covered
/// by any vocabulary entry count as one token each.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    nodes: Vec<TrieNode>,
    entries: usize,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<u8, usize>,
    terminal: bool,
}

impl Vocabulary {
    /// Builds a vocabulary from one token per line. Blank lines are skipped.
    pub fn from_lines<'a, I>(lines: I) -> Result<Self, TokenError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut nodes = alloc::vec![TrieNode::default()];
        let mut entries = 0;
        for line in lines {
            let token = line.strip_suffix('\r').unwrap_or(line);
            if token.is_empty() {
                continue;
            }
            let mut at = 0;
            for &b in token.as_bytes() {
                at = match nodes[at].children.get(&b) {
                    Some(&next) => next,
                    None => {
                        nodes.push(TrieNode::default());
                        let next = nodes.len() - 1;
                        nodes[at].children.insert(b, next);
                        next
                    }
                };
            }
            if !nodes[at].terminal {
                nodes[at].terminal = true;
                entries += 1;
            }
        }
        if entries == 0 {
            return Err(TokenError::EmptyVocabulary);
        }
        Ok(Self { nodes, entries })
    }

    pub fn len(&self) -> usize {
        self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }

    pub fn count(&self, text: &str) -> u64 {
        let bytes = text.as_bytes();
        let mut pos = 0;
        let mut tokens = 0;
        while pos < bytes.len() {
            let mut at = 0;
            let mut longest = 0;
            for (offset, b) in bytes[pos..].iter().enumerate() {
                match self.nodes[at].children.get(b) {
                    Some(&next) => {
                        at = next;
                        if self.nodes[at].terminal {
                            longest = offset + 1;
                        }
                    }
                    None => break,
                }
            }
            pos += longest.max(1);
            tokens += 1;
        }
        tokens
    }
}

/// Running total against a fixed token target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    target: u64,
    accumulated: u64,
}

impl BudgetLedger {
    pub fn new(target: u64) -> Self {
        Self { target, accumulated: 0 }
    }

    pub fn target(&self) -> u64 {
        self.target
    }

    pub fn accumulated(&self) -> u64 {
        self.accumulated
    }

    pub fn remaining(&self) -> u64 {
        self.target.saturating_sub(self.accumulated)
    }

    pub fn fits(&self, tokens: u64) -> bool {
        tokens <= self.remaining()
    }

    /// Admits `tokens` if they fit without overflowing the target.
    pub fn try_admit(&mut self, tokens: u64) -> bool {
        if self.fits(tokens) {
            self.accumulated += tokens;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Origin, QualityScores};
    use proptest::prelude::*;

    fn doc(tokens: u64) -> Document {
        Document {
            id: alloc::format!("d{tokens}"),
            text: "x".into(),
            scores: QualityScores::new(1.0, 1.0).unwrap(),
            token_count: tokens,
            origin: Origin::Original,
            source_url: None,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn empty_text_is_zero_under_every_scheme() {
        let vocab = Vocabulary::from_lines(["ab"]).unwrap();
        for counter in [
            TokenCounter::WhitespaceWords,
            TokenCounter::BytesDiv4,
            TokenCounter::Vocabulary(vocab),
        ] {
            assert_eq!(count_tokens("", &counter), 0);
        }
    }

    #[test]
    fn whitespace_runs() {
        assert_eq!(count_tokens("abc def  ghi", &TokenCounter::WhitespaceWords), 3);
        assert_eq!(count_tokens("  \n\t ", &TokenCounter::WhitespaceWords), 0);
        assert_eq!(count_tokens("a\nb\tc", &TokenCounter::WhitespaceWords), 3);
    }

    #[test]
    fn bytes_div4_rounds_up() {
        assert_eq!(count_tokens("abcdefgh", &TokenCounter::BytesDiv4), 2);
        assert_eq!(count_tokens("abcdefghi", &TokenCounter::BytesDiv4), 3);
        assert_eq!(count_tokens("a", &TokenCounter::BytesDiv4), 1);
        // "ção" is 5 bytes
        assert_eq!(count_tokens("ção", &TokenCounter::BytesDiv4), 2);
    }

    #[test]
    fn vocabulary_longest_match_with_byte_fallback() {
        let vocab = Vocabulary::from_lines(["ab", "abc", "d", ""]).unwrap();
        assert_eq!(vocab.len(), 3);
        let counter = TokenCounter::Vocabulary(vocab);
        // abc | d | x(fallback) | ab
        assert_eq!(count_tokens("abcdxab", &counter), 4);
        // a(fallback) | d
        assert_eq!(count_tokens("ad", &counter), 2);
    }

    #[test]
    fn empty_vocabulary_is_an_error() {
        assert_eq!(
            Vocabulary::from_lines(["", "\r"]).unwrap_err(),
            TokenError::EmptyVocabulary
        );
    }

    #[test]
    fn tally_sums_counts() {
        assert_eq!(tally_corpus(&[]), 0);
        let docs = [doc(3), doc(4), doc(3)];
        assert_eq!(tally_corpus(&docs), 10);
    }

    #[test]
    fn expansion_ratio_of_tripled_yield() {
        assert_eq!(expansion_ratio(10, 30), Some(3.0));
        assert_eq!(expansion_ratio(0, 30), None);
    }

    #[test]
    fn ledger_stops_before_overflow() {
        let mut ledger = BudgetLedger::new(10);
        assert!(ledger.try_admit(6));
        assert!(!ledger.try_admit(5));
        assert!(ledger.try_admit(3));
        assert_eq!(ledger.accumulated(), 9);
        assert_eq!(ledger.remaining(), 1);
    }

    proptest! {
        #[test]
        fn tally_is_additive(a in proptest::collection::vec(0u64..1000, 0..20),
                             b in proptest::collection::vec(0u64..1000, 0..20)) {
            let da: Vec<_> = a.iter().map(|&t| doc(t)).collect();
            let db: Vec<_> = b.iter().map(|&t| doc(t)).collect();
            prop_assert_eq!(tally_corpus(da.iter().chain(db.iter())), tally_corpus(&da) + tally_corpus(&db));
        }

        #[test]
        fn counting_is_deterministic(text in "\\PC{0,200}") {
            let vocab = Vocabulary::from_lines(["de", "que", "a", " "]).unwrap();
            for counter in [TokenCounter::WhitespaceWords, TokenCounter::BytesDiv4, TokenCounter::Vocabulary(vocab)] {
                prop_assert_eq!(counter.count(&text), counter.count(&text));
                // no scheme ever exceeds one token per byte
                prop_assert!(counter.count(&text) <= text.len() as u64);
            }
        }

        #[test]
        fn ledger_never_overflows(sizes in proptest::collection::vec(0u64..60, 0..40), target in 0u64..500) {
            let mut ledger = BudgetLedger::new(target);
            let mut last = 0;
            for s in sizes {
                ledger.try_admit(s);
                prop_assert!(ledger.accumulated() >= last);
                prop_assert!(ledger.accumulated() <= target);
                last = ledger.accumulated();
            }
        }
    }
}
