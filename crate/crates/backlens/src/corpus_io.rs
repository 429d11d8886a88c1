//! JSONL corpora and JSON vocabulary files.

use std::path::Path;

use backlens_core::corpus::{Corpus, CorpusEntry, Provenance};
use backlens_core::{ModelConfig, Prompt, Segment, Vocab};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryLine {
    pub tokens: Vec<usize>,
    pub target: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<String>>,
    #[serde(default)]
    pub paraphrases: Vec<Vec<usize>>,
    #[serde(default)]
    pub neighborhood: Vec<Vec<usize>>,
}

impl From<&CorpusEntry> for EntryLine {
    fn from(e: &CorpusEntry) -> Self {
        EntryLine {
            tokens: e.prompt.tokens.clone(),
            target: e.prompt.target,
            segments: e
                .prompt
                .segments
                .as_ref()
                .map(|s| s.iter().map(|seg| seg.name().to_string()).collect()),
            paraphrases: e.paraphrases.clone(),
            neighborhood: e.neighborhood.clone(),
        }
    }
}

impl EntryLine {
    fn into_entry(self) -> std::result::Result<CorpusEntry, String> {
        let mut prompt = Prompt::new(self.tokens, self.target);
        if let Some(names) = self.segments {
            let segs = names
                .iter()
                .map(|n| Segment::parse(n).ok_or_else(|| format!("unknown segment label {n:?}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            prompt = prompt.with_segments(segs);
        }
        Ok(CorpusEntry {
            prompt,
            paraphrases: self.paraphrases,
            neighborhood: self.neighborhood,
        })
    }
}

pub fn to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for e in &corpus.entries {
        out.push_str(&serde_json::to_string(&EntryLine::from(e)).expect("entry serializes"));
        out.push('\n');
    }
    out
}

/// Parses JSONL; blank lines are skipped and errors carry the line number.
pub fn parse_jsonl(text: &str, path: &Path) -> Result<Corpus> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::format(path, format!("line {}: {msg}", i + 1));
        let parsed: EntryLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        entries.push(parsed.into_entry().map_err(bad)?);
    }
    Ok(Corpus {
        entries,
        provenance: Provenance::File,
    })
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}

/// Reads a corpus and checks it against the model.
pub fn load_corpus(path: &Path, config: &ModelConfig) -> Result<Corpus> {
    let corpus = read_corpus(path)?;
    corpus
        .validate(config)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(corpus)
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, to_jsonl(corpus)).map_err(|e| Error::io(path, e))
}

/// SHA-256 of the canonical JSONL form, so formatting differences in the
/// source file do not change it.
pub fn corpus_hash(corpus: &Corpus) -> String {
    hex::encode(Sha256::digest(to_jsonl(corpus).as_bytes()))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    Vocab::new(tokens).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let text = serde_json::to_string(vocab.tokens()).expect("strings serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// The vocabulary in `path`, or the toy vocabulary sized to the model.
pub fn vocab_for(path: Option<&Path>, config: &ModelConfig) -> Result<Vocab> {
    let vocab = match path {
        Some(p) => read_vocab(p)?,
        None => Vocab::toy(config.vocab_size),
    };
    if vocab.len() != config.vocab_size {
        return Err(Error::Usage(format!(
            "vocabulary has {} tokens but the model has vocab_size {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use backlens_core::corpus::{synthetic, SyntheticSpec};

    #[test]
    fn jsonl_round_trip() {
        let cfg = ModelConfig::default();
        let c = synthetic(&cfg, &SyntheticSpec { count: 7, ..SyntheticSpec::default() }).unwrap();
        let text = to_jsonl(&c);
        assert_eq!(text.lines().count(), 7);
        let back = parse_jsonl(&text, Path::new("c")).unwrap();
        assert_eq!(back.entries, c.entries);
        assert_eq!(back.provenance, Provenance::File);
        assert_eq!(corpus_hash(&back), corpus_hash(&c));
    }

    #[test]
    fn schema_fields() {
        let line = r#"{"tokens":[1,2,3],"target":4,"segments":["subject_first","subject_last","last"],"paraphrases":[[0,1,2,3]],"neighborhood":[[5,2,3]]}"#;
        let c = parse_jsonl(line, Path::new("c")).unwrap();
        let e = &c.entries[0];
        assert_eq!(e.prompt.tokens, vec![1, 2, 3]);
        assert_eq!(e.prompt.segments.as_ref().unwrap()[2], Segment::Last);
        assert_eq!(to_jsonl(&c).trim_end(), line);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "{\"tokens\":[1],\"target\":2}\n\n{\"tokens\":[1],\"target\":2,\"segments\":[\"middle\"]}\n";
        let e = parse_jsonl(text, Path::new("c")).unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("middle"), "{e}");
        let e = parse_jsonl("{\"tokens\":[1]}", Path::new("c")).unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("target"), "{e}");
    }

    #[test]
    fn out_of_vocab_prompt_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"tokens\":[1,99],\"target\":2}\n").unwrap();
        let e = load_corpus(&p, &ModelConfig::default()).unwrap_err().to_string();
        assert!(e.contains("99"), "{e}");
    }

    #[test]
    fn vocab_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        let v = Vocab::toy(50);
        write_vocab(&v, &p).unwrap();
        assert_eq!(read_vocab(&p).unwrap(), v);
        std::fs::write(&p, r#"["a","a"]"#).unwrap();
        assert!(read_vocab(&p).is_err());
    }
}
