// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PLACEHOLDER: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<ph>"];

/// Every word the templates can emit. Order fixes token ids.
const LEXICON: &[&str] = &[
    // punctuation and speakers
    ".",
    ",",
    "?",
    ":",
    "agent1",
    "agent2",
    // items, options, attributes
    "food",
    "water",
    "firewood",
    "unknown",
    "hike",
    "beach",
    "safe",
    "risky",
    // acts
    "propose",
    "accept",
    "reject",
    "ask",
    "inform",
    // greetings and closings
    "hello",
    "hi",
    "friend",
    "how",
    "are",
    "you",
    "ready",
    "for",
    "the",
    "trip",
    "i",
    "am",
    "excited",
    "camping",
    "good",
    "to",
    "meet",
    "thank",
    "enjoy",
    "great",
    "see",
    "at",
    "camp",
    "there",
    "ok",
    "maybe",
    "next",
    "time",
    // reveals
    "need",
    "most",
    "then",
    "and",
    "least",
    "me",
    "is",
    "important",
    "my",
    "top",
    "lowest",
    // proposals and replies
    "take",
    "no",
    "too",
    "deal",
    "that",
    "works",
    "sounds",
    "we",
    "should",
    "go",
    "this",
    "weekend",
    "would",
    "rather",
    "like",
    "think",
    "but",
    "trust",
    "sorry",
    "risk",
    "not",
    "worth",
    "it",
    "checked",
    "guides",
    // questions and instructions
    "question",
    "answer",
    "rank",
    "what",
    "from",
    "high",
    "low",
    "does",
    "needs",
    "will",
    "do",
    "which",
    "want",
    "wants",
    "about",
    "task",
    "response",
    "give",
    "your",
    "partner",
    "they",
    "persuade",
];

/// Closed word-level vocabulary: reserved ids first, then the lexicon.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// The vocabulary built from the template lexicon.
    pub fn standard() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            Vocab::from_words(RESERVED.iter().chain(LEXICON).map(|w| w.to_string()).collect())
                .expect("lexicon has no duplicates")
        })
    }

    /// Builds a vocabulary from an ordered word list whose first three
    /// entries are the reserved tokens.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words.iter().zip(RESERVED).any(|(w, r)| w != r) {
            return Err(Error::Format("vocabulary must start with <pad> <unk> <ph>".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    /// Whether `id` is an ordinary lexicon word.
    pub fn is_lexical(&self, id: usize) -> bool {
        id >= RESERVED.len() && id < self.words.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    /// One word per line, in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        Self::from_words(s.lines().map(str::to_owned).collect())
    }
}
