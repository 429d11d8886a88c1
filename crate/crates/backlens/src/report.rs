//! Tabular reports rendered as JSON, CSV or markdown.
//!
//! Every report carries its provenance (tool version, config, model and
//! corpus hashes) and nothing time-dependent, so reruns are byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
    Md,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub model_hash: String,
    pub corpus_hash: Option<String>,
}

impl Provenance {
    fn pairs(&self) -> Vec<(&'static str, Value)> {
        vec![
            ("tool_version", Value::from(TOOL_VERSION)),
            ("config_hash", Value::from(self.config_hash.clone())),
            ("model_hash", Value::from(self.model_hash.clone())),
            (
                "corpus_hash",
                self.corpus_hash.clone().map_or(Value::Null, Value::from),
            ),
        ]
    }
}

/// A named table plus scalar metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub kind: &'static str,
    pub provenance: Provenance,
    /// Top-level JSON fields describing how the table was produced.
    pub meta: Vec<(&'static str, Value)>,
    /// Aggregate results, listed before the table.
    pub summary: Vec<(&'static str, Value)>,
    /// JSON key holding the rows.
    pub collection: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

impl Report {
    pub fn new(kind: &'static str, provenance: Provenance, columns: Vec<&'static str>) -> Self {
        Report {
            kind,
            provenance,
            meta: Vec::new(),
            summary: Vec::new(),
            collection: "cells",
            columns,
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &'static str, value: impl Into<Value>) -> Self {
        self.meta.push((key, value.into()));
        self
    }

    pub fn summary(mut self, key: &'static str, value: impl Into<Value>) -> Self {
        self.summary.push((key, value.into()));
        self
    }

    pub fn push_row(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => self.to_json(),
            Format::Csv => self.to_csv(),
            Format::Md => self.to_markdown(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut top = Map::new();
        top.insert("report".into(), Value::from(self.kind));
        top.insert("provenance".into(), object(self.provenance.pairs()));
        for (k, v) in &self.meta {
            top.insert((*k).into(), v.clone());
        }
        if !self.summary.is_empty() {
            top.insert("summary".into(), object(self.summary.clone()));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| object(self.columns.iter().copied().zip(r.iter().cloned())))
            .collect();
        top.insert(self.collection.into(), Value::Array(rows));
        let mut s = serde_json::to_string_pretty(&Value::Object(top)).expect("json value serializes");
        s.push('\n');
        s
    }

    /// Provenance, meta and summary as `# key: value` comment lines, then
    /// a header row and one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.header_pairs() {
            let _ = writeln!(out, "# {k}: {}", text(&v));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(text)).expect("in-memory write");
        }
        let bytes = w.into_inner().expect("in-memory flush");
        out.push_str(std::str::from_utf8(&bytes).expect("utf-8 fields"));
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("# {}\n\n", self.kind);
        for (k, v) in self.header_pairs() {
            let _ = writeln!(out, "- {k}: {}", text(&v));
        }
        out.push('\n');
        let _ = writeln!(out, "| {} |", self.columns.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(self.columns.len()));
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| text(v).replace('|', "\\|")).collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }

    fn header_pairs(&self) -> Vec<(&'static str, Value)> {
        let mut pairs = self.provenance.pairs();
        pairs.extend(self.meta.iter().cloned());
        pairs.extend(self.summary.iter().cloned());
        pairs
    }

    /// Writes to `path`, or to stdout when `None`.
    pub fn write(&self, format: Format, path: Option<&Path>) -> Result<()> {
        let body = self.render(format);
        match path {
            Some(p) => std::fs::write(p, body).map_err(|e| Error::io(p, e)),
            None => {
                use std::io::Write;
                std::io::stdout()
                    .write_all(body.as_bytes())
                    .map_err(|e| Error::io("<stdout>", e))
            }
        }
    }
}

fn object<K: Into<String>>(pairs: impl IntoIterator<Item = (K, Value)>) -> Value {
    Value::Object(pairs.into_iter().map(|(k, v)| (k.into(), v)).collect())
}

/// Plain-text form of a value: strings unquoted, null empty, everything
/// else as compact JSON.
fn text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// JSON number for finite values, null otherwise.
pub fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

pub fn opt_num(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Report {
        let prov = Provenance {
            config_hash: "c".into(),
            model_hash: "m".into(),
            corpus_hash: None,
        };
        let mut r = Report::new("demo", prov, vec!["layer", "token", "top"])
            .meta("k", 2)
            .summary("fraction", num(0.5));
        r.push_row(vec![json!(0), json!("a,b"), json!([["x", 0.25]])]);
        r.push_row(vec![json!(1), json!("c|d"), Value::Null]);
        r
    }

    #[test]
    fn json_layout() {
        let v: Value = serde_json::from_str(&sample().to_json()).unwrap();
        assert_eq!(v["report"], "demo");
        assert_eq!(v["provenance"]["tool_version"], TOOL_VERSION);
        assert_eq!(v["provenance"]["corpus_hash"], Value::Null);
        assert_eq!(v["k"], 2);
        assert_eq!(v["summary"]["fraction"], 0.5);
        assert_eq!(v["cells"][0]["top"][0][1], 0.25);
        assert_eq!(v["cells"][1]["token"], "c|d");
    }

    #[test]
    fn csv_quotes_and_comments() {
        let s = sample().to_csv();
        assert!(s.starts_with("# tool_version: "));
        assert!(s.contains("# fraction: 0.5\n"));
        assert!(s.contains("layer,token,top\n"));
        assert!(s.contains("0,\"a,b\",\"[[\"\"x\"\",0.25]]\"\n"));
        assert!(s.ends_with("1,c|d,\n"));
    }

    #[test]
    fn markdown_escapes_pipes() {
        let s = sample().to_markdown();
        assert!(s.starts_with("# demo\n"));
        assert!(s.contains("| layer | token | top |\n|---|---|---|\n"));
        assert!(s.contains("| 1 | c\\|d |  |"));
    }

    #[test]
    fn non_finite_numbers_become_null() {
        assert_eq!(num(f64::NAN), Value::Null);
        assert_eq!(opt_num(None), Value::Null);
        assert_eq!(num(1.5), json!(1.5));
    }
}
