//! Logit Lens: reading a `d`-vector as a distribution over the vocabulary
//! via `softmax(ln_f(v) · D)`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::engine::{apply_final_ln, BackwardTrace, ForwardTrace};
use crate::error::{Error, Result};
use crate::linalg::{l2_norm, scaled, softmax};
use crate::model::{ModelWeights, Vocab};

/// Norms below this are treated as exact zero vectors.
pub const ZERO_NORM: f64 = 1e-14;

pub const DEFAULT_REPORT_K: usize = 3;
pub const DEFAULT_INTERSECTION_K: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct LensProjection {
    /// Pre-softmax scores; rankings are read from these so that ties
    /// introduced by probability underflow cannot reorder tokens.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// `‖v‖` of the vector as given, before any normalization.
    pub source_norm: f64,
    pub normalized: bool,
}

impl LensProjection {
    pub fn is_zero(&self) -> bool {
        self.source_norm < ZERO_NORM
    }
}

fn project(v: &[f64], weights: &ModelWeights, apply_ln: bool) -> Result<Vec<f64>> {
    let d = weights.decoder.rows();
    if v.len() != d {
        return Err(Error::ShapeMismatch {
            what: "lens input",
            expected: (d, 1),
            found: (v.len(), 1),
        });
    }
    Ok(if apply_ln {
        weights.decoder.vec_mul(&apply_final_ln(v, weights)?)
    } else {
        weights.decoder.vec_mul(v)
    })
}

pub fn logit_lens(v: &[f64], weights: &ModelWeights, apply_ln: bool) -> Result<LensProjection> {
    let logits = project(v, weights, apply_ln)?;
    Ok(LensProjection {
        probs: softmax(&logits),
        logits,
        source_norm: l2_norm(v),
        normalized: false,
    })
}

/// Logit Lens of `v / ‖v‖`; `source_norm` still reports `‖v‖`.
pub fn normalized_logit_lens(
    v: &[f64],
    weights: &ModelWeights,
    apply_ln: bool,
) -> Result<LensProjection> {
    let norm = l2_norm(v);
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let logits = project(&scaled(1.0 / norm, v), weights, apply_ln)?;
    Ok(LensProjection {
        probs: softmax(&logits),
        logits,
        source_norm: norm,
        normalized: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RankDirection {
    MostProbableFirst,
    LeastProbableFirst,
}

impl RankDirection {
    pub fn name(self) -> &'static str {
        match self {
            RankDirection::MostProbableFirst => "most-probable",
            RankDirection::LeastProbableFirst => "least-probable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "most-probable" | "most_probable_first" => Some(RankDirection::MostProbableFirst),
            "least-probable" | "least_probable_first" => Some(RankDirection::LeastProbableFirst),
            _ => None,
        }
    }
}

impl fmt::Display for RankDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn precedes(scores: &[f64], a: usize, b: usize, dir: RankDirection) -> bool {
    let (x, y) = (scores[a], scores[b]);
    match dir {
        RankDirection::MostProbableFirst => x > y || (x == y && a < b),
        RankDirection::LeastProbableFirst => x < y || (x == y && a < b),
    }
}

/// 0-based position of `t` in the vocabulary ordered by `dir`, ties broken
/// by ascending token id.
pub fn token_rank(p: &LensProjection, t: usize, dir: RankDirection) -> Result<usize> {
    if t >= p.logits.len() {
        return Err(Error::OutOfRange {
            what: "token",
            index: t,
            bound: p.logits.len(),
        });
    }
    Ok((0..p.logits.len())
        .filter(|&k| k != t && precedes(&p.logits, k, t, dir))
        .count())
}

/// The first `k` token ids in `dir` order.
pub fn ranked_tokens(p: &LensProjection, k: usize, dir: RankDirection) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..p.logits.len()).collect();
    ids.sort_by(|&a, &b| {
        if precedes(&p.logits, a, b, dir) {
            core::cmp::Ordering::Less
        } else if a == b {
            core::cmp::Ordering::Equal
        } else {
            core::cmp::Ordering::Greater
        }
    });
    ids.truncate(k);
    ids
}

pub fn top_k(p: &LensProjection, k: usize) -> Vec<usize> {
    ranked_tokens(p, k, RankDirection::MostProbableFirst)
}

pub fn bottom_k(p: &LensProjection, k: usize) -> Vec<usize> {
    ranked_tokens(p, k, RankDirection::LeastProbableFirst)
}

/// Signed overlap of the top-`k` token sets of `u` and `±v` (no `ln_f`).
///
/// Returns `s+` when `s+ ≥ s−`, otherwise `−s−`.
pub fn ll_intersection(u: &[f64], v: &[f64], weights: &ModelWeights, k: usize) -> Result<i64> {
    let vocab = weights.decoder.cols();
    if k > vocab {
        return Err(Error::OutOfRange {
            what: "k",
            index: k,
            bound: vocab + 1,
        });
    }
    let tu = top_k(&logit_lens(u, weights, false)?, k);
    let tv = top_k(&logit_lens(v, weights, false)?, k);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let tn = top_k(&logit_lens(&neg, weights, false)?, k);
    let plus = tu.iter().filter(|t| tv.contains(t)).count() as i64;
    let minus = tu.iter().filter(|t| tn.contains(t)).count() as i64;
    Ok(if plus >= minus { plus } else { -minus })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LensSource {
    /// Forward inputs of FF1 (`x_i`).
    Ff1Inputs,
    /// VJPs of FF2's output (`δ_i`).
    Ff2Vjps,
}

impl LensSource {
    pub fn name(self) -> &'static str {
        match self {
            LensSource::Ff1Inputs => "ff1-inputs",
            LensSource::Ff2Vjps => "ff2-vjps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ff1-inputs" => Some(LensSource::Ff1Inputs),
            "ff2-vjps" => Some(LensSource::Ff2Vjps),
            _ => None,
        }
    }

    /// Forward inputs are read most-probable-first, VJPs least-probable-first.
    pub fn default_convention(self) -> RankDirection {
        match self {
            LensSource::Ff1Inputs => RankDirection::MostProbableFirst,
            LensSource::Ff2Vjps => RankDirection::LeastProbableFirst,
        }
    }
}

impl fmt::Display for LensSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LensOptions {
    pub which: LensSource,
    pub convention: RankDirection,
    pub k: usize,
    pub apply_ln: bool,
}

impl LensOptions {
    /// Defaults: the source's own convention, `k = 3`, `ln_f` applied to
    /// forward states (when the model has one) and not to VJPs.
    pub fn new(which: LensSource, weights: &ModelWeights) -> Self {
        Self {
            which,
            convention: which.default_convention(),
            k: DEFAULT_REPORT_K,
            apply_ln: which == LensSource::Ff1Inputs && weights.ln_f.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensCell {
    pub layer: usize,
    pub pos: usize,
    pub token: String,
    pub norm: f64,
    pub top: Vec<(String, f64)>,
    pub bottom: Vec<(String, f64)>,
    pub target_rank: usize,
}

impl LensCell {
    pub fn is_zero(&self) -> bool {
        self.norm < ZERO_NORM
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensReport {
    pub which: LensSource,
    pub convention: RankDirection,
    pub k: usize,
    /// Row-major over `(layer, pos)`.
    pub cells: Vec<LensCell>,
}

impl LensReport {
    pub fn cell(&self, layer: usize, pos: usize) -> Option<&LensCell> {
        self.cells.iter().find(|c| c.layer == layer && c.pos == pos)
    }
}

fn token_name(vocab: &Vocab, id: usize) -> String {
    vocab
        .token(id)
        .map(String::from)
        .unwrap_or_else(|| alloc::format!("<{id}>"))
}

/// Projects every `(layer, token)` vector of one prompt through the lens.
pub fn build_lens_report(
    trace: &ForwardTrace,
    btrace: &BackwardTrace,
    weights: &ModelWeights,
    vocab: &Vocab,
    opts: &LensOptions,
) -> Result<LensReport> {
    let vsize = weights.decoder.cols();
    if opts.k > vsize {
        return Err(Error::OutOfRange {
            what: "k",
            index: opts.k,
            bound: vsize + 1,
        });
    }
    let mut cells = Vec::new();
    for l in 0..trace.layers.len() {
        let vectors = match opts.which {
            LensSource::Ff1Inputs => &trace.layers[l].ff1_in,
            LensSource::Ff2Vjps => &btrace.layers[l].delta_ff2,
        };
        for (pos, v) in vectors.iter().enumerate() {
            let p = logit_lens(v, weights, opts.apply_ln)?;
            let named = |ids: Vec<usize>| {
                ids.into_iter()
                    .map(|id| (token_name(vocab, id), p.probs[id]))
                    .collect()
            };
            cells.push(LensCell {
                layer: l,
                pos,
                token: token_name(vocab, trace.tokens[pos]),
                norm: p.source_norm,
                top: named(top_k(&p, opts.k)),
                bottom: named(bottom_k(&p, opts.k)),
                target_rank: token_rank(&p, trace.target, opts.convention)?,
            });
        }
    }
    Ok(LensReport {
        which: opts.which,
        convention: opts.convention,
        k: opts.k,
        cells,
    })
}
