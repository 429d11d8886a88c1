//! Checkpoint files: one JSON header line (format, version, config, tensor
//! manifest), a newline, then every tensor as little-endian f64 in manifest
//! order.

use std::collections::BTreeSet;
use std::path::Path;

use backlens_core::{ModelConfig, ModelWeights, ParamId};
use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;
use crate::error::{Error, Result};

pub const FORMAT: &str = "backlens-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset from the start of the tensor data.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: ConfigFile,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(weights: &ModelWeights, config: &ModelConfig) -> Result<Vec<u8>> {
    weights.check_shapes(config)?;
    let ids = ParamId::all(config);
    let mut tensors = Vec::with_capacity(ids.len());
    let mut offset = 0;
    for id in &ids {
        let (r, c) = id.shape(config);
        tensors.push(TensorEntry {
            name: id.name(),
            shape: [r, c],
            offset,
        });
        offset += 8 * r * c;
    }
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        config: ConfigFile::from(config),
        tensors,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(offset);
    for id in &ids {
        for v in weights.param(*id).expect("shape-checked").data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let bad = |msg: String| Error::format(path, msg);
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing checkpoint header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])
        .map_err(|e| bad(format!("malformed checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("format: expected {FORMAT:?}, found {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(bad(format!(
            "version: unsupported checkpoint version {} (expected {VERSION})",
            header.version
        )));
    }
    let config = header
        .config
        .to_config()
        .map_err(|e| bad(format!("config: {e}")))?;
    let data = &bytes[split + 1..];

    let expected = ParamId::all(&config);
    let mut seen = BTreeSet::new();
    let mut weights = ModelWeights::zeros(&config);
    let mut cursor = 0;
    for t in &header.tensors {
        let id = ParamId::parse(&t.name)
            .filter(|id| expected.contains(id))
            .ok_or_else(|| bad(format!("tensor {}: not a parameter of this config", t.name)))?;
        if !seen.insert(id) {
            return Err(bad(format!("tensor {}: listed twice", t.name)));
        }
        let (r, c) = id.shape(&config);
        if t.shape != [r, c] {
            return Err(bad(format!(
                "tensor {}: shape {}x{} does not match config (expected {r}x{c})",
                t.name, t.shape[0], t.shape[1]
            )));
        }
        if t.offset != cursor {
            return Err(bad(format!(
                "tensor {}: offset {} breaks manifest order (expected {cursor})",
                t.name, t.offset
            )));
        }
        let len = 8 * r * c;
        let chunk = data
            .get(cursor..cursor + len)
            .ok_or_else(|| bad(format!("unexpected end of tensor data in tensor {}", t.name)))?;
        let m = weights.param_mut(id).expect("expected param");
        for (dst, src) in m.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8-byte chunk"));
        }
        if !m.is_finite() {
            return Err(bad(format!("tensor {}: non-finite value", t.name)));
        }
        cursor += len;
    }
    if let Some(missing) = expected.iter().find(|id| !seen.contains(id)) {
        return Err(bad(format!("tensor {missing}: missing from manifest")));
    }
    if cursor != data.len() {
        return Err(bad(format!(
            "{} trailing bytes after tensor data",
            data.len() - cursor
        )));
    }
    Ok((config, weights))
}

pub fn save(weights: &ModelWeights, config: &ModelConfig, path: &Path) -> Result<()> {
    let bytes = to_bytes(weights, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use backlens_core::model::Activation;

    fn sample() -> (ModelConfig, ModelWeights) {
        let c = ModelConfig {
            n_layers: 2,
            d: 8,
            d_m: 16,
            vocab_size: 12,
            n_heads: 2,
            max_seq: 5,
            activation: Activation::Gelu,
            use_final_ln: true,
            seed: 3,
        };
        let w = ModelWeights::init_random(&c).unwrap();
        (c, w)
    }

    fn err(bytes: &[u8]) -> String {
        from_bytes(bytes, Path::new("m.ckpt")).unwrap_err().to_string()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (c, w) = sample();
        let bytes = to_bytes(&w, &c).unwrap();
        let (c2, w2) = from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(c2, c);
        for id in ParamId::all(&c) {
            let a = w.param(id).unwrap().data();
            let b = w2.param(id).unwrap().data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncation_is_reported() {
        let (c, w) = sample();
        let bytes = to_bytes(&w, &c).unwrap();
        let e = err(&bytes[..bytes.len() - 3]);
        assert!(e.contains("unexpected end of tensor data"), "{e}");
        let e = err(&bytes[..10]);
        assert!(e.contains("header"), "{e}");
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let (c, w) = sample();
        let bytes = to_bytes(&w, &c).unwrap();
        let text = String::from_utf8_lossy(&bytes).to_string();
        let line = text.lines().next().unwrap();
        let broken = line.replacen(r#""name":"layers.1.FF1","shape":[8,16]"#, r#""name":"layers.1.FF1","shape":[16,8]"#, 1);
        assert_ne!(broken, line);
        let mut b = broken.into_bytes();
        b.extend_from_slice(&bytes[line.len()..]);
        let e = err(&b);
        assert!(e.contains("layers.1.FF1") && e.contains("shape"), "{e}");
    }

    #[test]
    fn version_and_trailing_data() {
        let (c, w) = sample();
        let bytes = to_bytes(&w, &c).unwrap();
        let text = String::from_utf8_lossy(&bytes).to_string();
        let line = text.lines().next().unwrap();
        let mut b = line.replacen(r#""version":1"#, r#""version":9"#, 1).into_bytes();
        b.extend_from_slice(&bytes[line.len()..]);
        assert!(err(&b).contains("version"));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(err(&extra).contains("trailing"));
    }

    #[test]
    fn config_errors_name_the_field() {
        let (c, w) = sample();
        let bytes = to_bytes(&w, &c).unwrap();
        let text = String::from_utf8_lossy(&bytes).to_string();
        let line = text.lines().next().unwrap();
        let mut b = line.replacen(r#""n_heads":2"#, r#""n_heads":3"#, 1).into_bytes();
        b.extend_from_slice(&bytes[line.len()..]);
        assert!(err(&b).contains("n_heads"));
    }
}
