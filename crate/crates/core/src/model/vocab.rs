use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

const BASE_CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .";

const COMMON_NGRAMS: &[&str] = &[
    "th", "he", "in", "er", "an", "re", "on", "at", "en", "nd", "ti", "es", "or", "te", "of",
    "ed", "is", "it", "al", "ar", "st", "to", "nt", "ng", "the", "and", "ing", "ion", "ent",
    "for", "ate", "ver", "tha", "ere", "his", "ter", "was", "you", "ith", "all",
];

/// Ordered list of distinct token strings; index = token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    max_chars: usize,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut max_chars = 0;
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::DuplicateToken(t.clone()));
            }
            max_chars = max_chars.max(t.chars().count());
        }
        Ok(Self {
            tokens,
            index,
            max_chars,
        })
    }

    /// Deterministic toy vocabulary of `size` tokens: single characters
    /// (letters, digits, space, period) first, then common English n-grams,
    /// then letter pairs and triples.
    pub fn toy(size: usize) -> Self {
        let mut tokens: Vec<String> = Vec::with_capacity(size);
        let mut seen = BTreeMap::new();
        let mut push = |s: String, tokens: &mut Vec<String>| {
            if tokens.len() < size && !seen.contains_key(&s) {
                seen.insert(s.clone(), ());
                tokens.push(s);
            }
        };
        for c in BASE_CHARS.chars() {
            push(c.to_string(), &mut tokens);
        }
        for g in COMMON_NGRAMS {
            push(g.to_string(), &mut tokens);
        }
        let letters: Vec<char> = ('a'..='z').collect();
        'outer: for width in 2.. {
            let mut idx = alloc::vec![0usize; width];
            loop {
                if tokens.len() >= size {
                    break 'outer;
                }
                push(idx.iter().map(|&i| letters[i]).collect(), &mut tokens);
                // odometer increment
                let mut pos = width;
                loop {
                    if pos == 0 {
                        continue 'outer;
                    }
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < letters.len() {
                        break;
                    }
                    idx[pos] = 0;
                }
            }
        }
        Self::new(tokens).expect("toy tokens are distinct")
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

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Greedy longest-match tokenization.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut offset = 0;
        while offset < text.len() {
            let rest = &text[offset..];
            let ends: Vec<usize> = rest
                .char_indices()
                .map(|(i, c)| i + c.len_utf8())
                .take(self.max_chars.max(1))
                .collect();
            let hit = ends
                .iter()
                .rev()
                .find_map(|&end| self.index.get(&rest[..end]).map(|&id| (id, end)));
            match hit {
                Some((id, end)) => {
                    ids.push(id);
                    offset += end;
                }
                None => {
                    return Err(Error::UnknownCharacter {
                        ch: rest.chars().next().expect("non-empty rest"),
                        offset,
                    })
                }
            }
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::OutOfRange {
                what: "token",
                index: id,
                bound: self.len(),
            })?;
            out.push_str(tok);
        }
        Ok(out)
    }
}
