//! Prompt corpora and the seeded synthetic generator.
//!
//! A synthetic prompt is a random token sequence whose first `⌈n/2⌉`
//! positions form the subject, followed by relation tokens and a final
//! `last` token. Paraphrases prepend random prefix tokens; neighborhood
//! prompts swap in a different subject and keep the relation.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Prompt, Segment};
use crate::rng::{seeded, uniform_inclusive, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    File,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Synthetic => "synthetic",
            Provenance::File => "file",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub prompt: Prompt,
    pub paraphrases: Vec<Vec<usize>>,
    pub neighborhood: Vec<Vec<usize>>,
}

impl CorpusEntry {
    pub fn paraphrase_prompts(&self) -> impl Iterator<Item = Prompt> + '_ {
        self.paraphrases
            .iter()
            .map(|t| Prompt::new(t.clone(), self.prompt.target))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prompts(&self) -> impl Iterator<Item = &Prompt> {
        self.entries.iter().map(|e| &e.prompt)
    }

    /// Checks every prompt, paraphrase and neighbor against the model.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for (i, e) in self.entries.iter().enumerate() {
            let tag = |err: Error| Error::InvalidPrompt(format!("corpus entry {i}: {err}"));
            e.prompt.validate(config).map_err(tag)?;
            for t in e.paraphrases.iter().chain(&e.neighborhood) {
                Prompt::new(t.clone(), e.prompt.target)
                    .validate(config)
                    .map_err(tag)?;
            }
        }
        Ok(())
    }

    /// Errors unless every prompt carries segment labels.
    pub fn require_labels(&self) -> Result<()> {
        match self.entries.iter().position(|e| e.prompt.segments.is_none()) {
            Some(entry) => Err(Error::UnlabeledCorpus { entry }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub paraphrases: usize,
    pub neighbors: usize,
    /// Longest random prefix a paraphrase prepends.
    pub max_prefix: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 100,
            min_len: 2,
            max_len: 10,
            paraphrases: 2,
            neighbors: 3,
            max_prefix: 3,
            seed: 0,
        }
    }
}

fn random_tokens(rng: &mut SeededRng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| uniform_inclusive(rng, 0, vocab - 1)).collect()
}

/// Generates a labeled synthetic corpus. Paraphrases are only produced
/// while the prefixed prompt still fits in `max_seq`.
pub fn synthetic(config: &ModelConfig, spec: &SyntheticSpec) -> Result<Corpus> {
    config.validate()?;
    let invalid = |reason: &str| Error::InvalidConfig {
        field: "len-range",
        reason: reason.into(),
    };
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(invalid("need 1 <= min <= max"));
    }
    if spec.max_len > config.max_seq {
        return Err(invalid("maximum prompt length exceeds max_seq"));
    }
    if spec.max_len >= config.vocab_size {
        return Err(invalid("vocabulary too small to leave a target outside the prompt"));
    }
    let v = config.vocab_size;
    let mut rng = seeded(spec.seed);
    let mut entries = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let n = uniform_inclusive(&mut rng, spec.min_len, spec.max_len);
        let tokens = random_tokens(&mut rng, n, v);
        let free: Vec<usize> = (0..v).filter(|t| !tokens.contains(t)).collect();
        let target = free[uniform_inclusive(&mut rng, 0, free.len() - 1)];
        let subject = Segment::synthetic_subject_len(n);

        let room = (config.max_seq - n).min(spec.max_prefix);
        let mut paraphrases = Vec::new();
        if room > 0 {
            for _ in 0..spec.paraphrases {
                let k = uniform_inclusive(&mut rng, 1, room);
                let mut p = random_tokens(&mut rng, k, v);
                p.extend_from_slice(&tokens);
                paraphrases.push(p);
            }
        }

        let mut neighborhood = Vec::new();
        if subject > 0 {
            for _ in 0..spec.neighbors {
                let mut s = random_tokens(&mut rng, subject, v);
                if s[..] == tokens[..subject] {
                    s[0] = (s[0] + 1) % v;
                }
                s.extend_from_slice(&tokens[subject..]);
                neighborhood.push(s);
            }
        }

        let prompt = Prompt::new(tokens, target).with_segments(Segment::label_positions(n, subject));
        entries.push(CorpusEntry {
            prompt,
            paraphrases,
            neighborhood,
        });
    }
    Ok(Corpus {
        entries,
        provenance: Provenance::Synthetic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn shapes_and_labels() {
        let c = synthetic(&cfg(), &SyntheticSpec::default()).unwrap();
        assert_eq!(c.len(), 100);
        c.validate(&cfg()).unwrap();
        c.require_labels().unwrap();
        for e in &c.entries {
            let p = &e.prompt;
            assert!((2..=10).contains(&p.len()));
            assert!(!p.tokens.contains(&p.target));
            let s = Segment::synthetic_subject_len(p.len());
            assert_eq!(e.paraphrases.len(), 2);
            for q in &e.paraphrases {
                assert!(q.ends_with(&p.tokens));
                assert!(q.len() > p.len());
            }
            assert_eq!(e.neighborhood.len(), 3);
            for q in &e.neighborhood {
                assert_eq!(q.len(), p.len());
                assert_eq!(q[s..], p.tokens[s..]);
                assert_ne!(q[..s], p.tokens[..s]);
            }
        }
    }

    #[test]
    fn seeded_reproducibility() {
        let spec = SyntheticSpec {
            seed: 9,
            ..SyntheticSpec::default()
        };
        assert_eq!(synthetic(&cfg(), &spec), synthetic(&cfg(), &spec));
        let other = SyntheticSpec { seed: 10, ..spec };
        assert_ne!(synthetic(&cfg(), &spec), synthetic(&cfg(), &other));
    }

    #[test]
    fn no_paraphrase_room_at_max_seq() {
        let spec = SyntheticSpec {
            count: 5,
            min_len: 16,
            max_len: 16,
            ..SyntheticSpec::default()
        };
        let c = synthetic(&cfg(), &spec).unwrap();
        assert!(c.entries.iter().all(|e| e.paraphrases.is_empty()));
    }

    #[test]
    fn bad_specs() {
        let bad = |min_len, max_len| SyntheticSpec {
            min_len,
            max_len,
            ..SyntheticSpec::default()
        };
        assert!(synthetic(&cfg(), &bad(0, 3)).is_err());
        assert!(synthetic(&cfg(), &bad(5, 3)).is_err());
        assert!(synthetic(&cfg(), &bad(2, 17)).is_err());
        let empty = Corpus {
            entries: Vec::new(),
            provenance: Provenance::File,
        };
        assert_eq!(empty.validate(&cfg()), Err(Error::EmptyCorpus));
    }

    #[test]
    fn unlabeled_entry_is_named() {
        let mut c = synthetic(&cfg(), &SyntheticSpec::default()).unwrap();
        c.entries[7].prompt.segments = None;
        assert_eq!(c.require_labels(), Err(Error::UnlabeledCorpus { entry: 7 }));
    }
}
