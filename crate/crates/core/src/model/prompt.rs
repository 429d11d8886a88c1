use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use super::ModelConfig;
use crate::error::{Error, Result};

/// Role of a prompt position, used to group per-token statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    SubjectFirst,
    SubjectMid,
    SubjectLast,
    Relation,
    Last,
}

impl Segment {
    pub const ALL: [Segment; 5] = [
        Segment::SubjectFirst,
        Segment::SubjectMid,
        Segment::SubjectLast,
        Segment::Relation,
        Segment::Last,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Segment::SubjectFirst => "subject_first",
            Segment::SubjectMid => "subject_mid",
            Segment::SubjectLast => "subject_last",
            Segment::Relation => "relation",
            Segment::Last => "last",
        }
    }

    pub fn parse(s: &str) -> Option<Segment> {
        Segment::ALL.into_iter().find(|seg| seg.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Labels for an `n`-token prompt whose subject occupies positions
    /// `0..subject_len`. The final position is always `last`; a one-token
    /// subject is labeled `subject_last`.
    pub fn label_positions(n: usize, subject_len: usize) -> Vec<Segment> {
        let s = subject_len.min(n.saturating_sub(1));
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    Segment::Last
                } else if i < s {
                    if i + 1 == s {
                        Segment::SubjectLast
                    } else if i == 0 {
                        Segment::SubjectFirst
                    } else {
                        Segment::SubjectMid
                    }
                } else {
                    Segment::Relation
                }
            })
            .collect()
    }

    /// Subject span length used by the synthetic corpus: `ceil(n / 2)`,
    /// never covering the final position.
    pub fn synthetic_subject_len(n: usize) -> usize {
        n.div_ceil(2).min(n.saturating_sub(1))
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A token sequence with the token the model should predict next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub target: usize,
    pub segments: Option<Vec<Segment>>,
}

impl Prompt {
    pub fn new(tokens: Vec<usize>, target: usize) -> Self {
        Self {
            tokens,
            target,
            segments: None,
        }
    }

    pub fn with_segments(mut self, segments: Vec<Segment>) -> Self {
        self.segments = Some(segments);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn last(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::InvalidPrompt("prompt has no tokens".into()));
        }
        if n > config.max_seq {
            return Err(Error::InvalidPrompt(format!(
                "prompt length {n} exceeds max_seq {}",
                config.max_seq
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token",
                index: bad,
                bound: config.vocab_size,
            });
        }
        if self.target >= config.vocab_size {
            return Err(Error::OutOfRange {
                what: "target",
                index: self.target,
                bound: config.vocab_size,
            });
        }
        if let Some(segs) = &self.segments {
            if segs.len() != n {
                return Err(Error::InvalidPrompt(format!(
                    "{} segment labels for {n} tokens",
                    segs.len()
                )));
            }
            let lasts = segs.iter().filter(|&&s| s == Segment::Last).count();
            if lasts != 1 || segs[n - 1] != Segment::Last {
                return Err(Error::InvalidPrompt(
                    "exactly one `last` label is required, at the final position".into(),
                ));
            }
        }
        Ok(())
    }
}
