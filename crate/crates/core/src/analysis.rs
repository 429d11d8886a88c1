//! Corpus-level experiments over gradients: rank scans, per-segment VJP
//! norms, target-token lens ranks, and the top-layer VJP decomposition.
//!
//! Each experiment has a per-prompt function and an aggregation step so
//! callers can fan prompts out across threads and still reduce in corpus
//! order.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::corpus::Corpus;
use crate::engine::{self, BackwardTrace, ForwardTrace};
use crate::error::{Error, Result};
use crate::lens::{logit_lens, token_rank, RankDirection, ZERO_NORM};
use crate::linalg::{l2_norm, numerical_rank};
use crate::model::{MlpMatrix, ModelConfig, ModelWeights, Prompt, Segment};
use crate::span::predicted_rank;

fn traces(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
) -> Result<(ForwardTrace, BackwardTrace)> {
    let t = engine::forward(weights, config, prompt)?;
    let b = engine::backward(weights, config, &t)?;
    Ok((t, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankCell {
    pub prompt: usize,
    pub layer: usize,
    pub which: MlpMatrix,
    pub n: usize,
    pub measured: usize,
    pub predicted: usize,
    pub is_final_layer: bool,
}

/// Measured vs predicted rank of both MLP gradients at every layer.
pub fn rank_cells(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    index: usize,
) -> Result<Vec<RankCell>> {
    let (t, b) = traces(weights, config, prompt)?;
    let n = prompt.len();
    let mut cells = Vec::with_capacity(2 * config.n_layers);
    for layer in 0..config.n_layers {
        for which in [MlpMatrix::Ff1, MlpMatrix::Ff2] {
            let g = engine::grad_matrix(&t, &b, layer, which)?;
            cells.push(RankCell {
                prompt: index,
                layer,
                which,
                n,
                measured: numerical_rank(&g, None)?,
                predicted: predicted_rank(n, layer, config.n_layers),
                is_final_layer: config.is_final_layer(layer),
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub equal: usize,
    pub total: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.equal += usize::from(hit);
    }

    /// `equal / total`, or 1 for an empty tally.
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.equal as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankScanResult {
    pub cells: Vec<RankCell>,
    /// Non-final layers, FF1 and FF2 separately.
    pub non_final_ff1: Tally,
    pub non_final_ff2: Tally,
    pub non_final: Tally,
    /// Final layer cells with rank == predicted (1 for any n ≥ 1).
    pub final_layer: Tally,
    /// Cells with `measured > n`.
    pub violations: Vec<RankCell>,
}

impl RankScanResult {
    pub fn from_cells(cells: Vec<RankCell>) -> Self {
        let mut r = RankScanResult {
            cells: Vec::new(),
            non_final_ff1: Tally::default(),
            non_final_ff2: Tally::default(),
            non_final: Tally::default(),
            final_layer: Tally::default(),
            violations: Vec::new(),
        };
        for c in &cells {
            let hit = c.measured == c.predicted;
            if c.is_final_layer {
                r.final_layer.add(hit);
            } else {
                r.non_final.add(hit);
                match c.which {
                    MlpMatrix::Ff1 => r.non_final_ff1.add(hit),
                    MlpMatrix::Ff2 => r.non_final_ff2.add(hit),
                }
            }
            if c.measured > c.n {
                r.violations.push(*c);
            }
        }
        r.cells = cells;
        r
    }
}

pub fn rank_scan(weights: &ModelWeights, config: &ModelConfig, corpus: &Corpus) -> Result<RankScanResult> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut cells = Vec::new();
    for (i, p) in corpus.prompts().enumerate() {
        cells.extend(rank_cells(weights, config, p, i)?);
    }
    Ok(RankScanResult::from_cells(cells))
}

/// Per-token vector traced by [`segment_norm_trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quantity {
    Ff1Vjp,
    Ff2Vjp,
    BlockInVjp,
    Ff1Input,
    Ff2Input,
}

impl Quantity {
    pub const ALL: [Quantity; 5] = [
        Quantity::Ff1Vjp,
        Quantity::Ff2Vjp,
        Quantity::BlockInVjp,
        Quantity::Ff1Input,
        Quantity::Ff2Input,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Ff1Vjp => "ff1-vjp",
            Quantity::Ff2Vjp => "ff2-vjp",
            Quantity::BlockInVjp => "block-in-vjp",
            Quantity::Ff1Input => "ff1-input",
            Quantity::Ff2Input => "ff2-input",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Quantity::ALL.into_iter().find(|q| q.name() == s)
    }

    fn vectors<'a>(
        self,
        t: &'a ForwardTrace,
        b: &'a BackwardTrace,
        layer: usize,
    ) -> &'a [Vec<f64>] {
        match self {
            Quantity::Ff1Vjp => &b.layers[layer].delta_ff1,
            Quantity::Ff2Vjp => &b.layers[layer].delta_ff2,
            Quantity::BlockInVjp => &b.layers[layer].delta_block_in,
            Quantity::Ff1Input => &t.layers[layer].ff1_in,
            Quantity::Ff2Input => &t.layers[layer].act,
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Running sums over a `(layer, segment)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGrid {
    pub sums: Vec<[f64; 5]>,
    pub counts: Vec<[usize; 5]>,
}

impl SegmentGrid {
    pub fn new(n_layers: usize) -> Self {
        Self {
            sums: vec![[0.0; 5]; n_layers],
            counts: vec![[0; 5]; n_layers],
        }
    }

    pub fn add(&mut self, layer: usize, seg: Segment, value: f64) {
        self.sums[layer][seg.index()] += value;
        self.counts[layer][seg.index()] += 1;
    }

    pub fn merge(&mut self, other: &SegmentGrid) {
        for l in 0..self.sums.len() {
            for s in 0..5 {
                self.sums[l][s] += other.sums[l][s];
                self.counts[l][s] += other.counts[l][s];
            }
        }
    }

    pub fn mean(&self, layer: usize, seg: Segment) -> Option<f64> {
        let c = self.counts[layer][seg.index()];
        (c > 0).then(|| self.sums[layer][seg.index()] / c as f64)
    }
}

fn labels(prompt: &Prompt, index: usize) -> Result<&[Segment]> {
    prompt
        .segments
        .as_deref()
        .ok_or(Error::UnlabeledCorpus { entry: index })
}

/// `‖v_i‖` for one prompt, accumulated into a grid.
pub fn segment_norms(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    index: usize,
    quantity: Quantity,
) -> Result<SegmentGrid> {
    let segs = labels(prompt, index)?;
    let (t, b) = traces(weights, config, prompt)?;
    let mut grid = SegmentGrid::new(config.n_layers);
    for l in 0..config.n_layers {
        for (v, &seg) in quantity.vectors(&t, &b, l).iter().zip(segs) {
            grid.add(l, seg, l2_norm(v));
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentNormCell {
    pub layer: usize,
    pub normalized_layer: f64,
    pub segment: Segment,
    pub count: usize,
    pub mean_norm: f64,
    /// `mean_norm` divided by the layer's largest segment mean (0 when the
    /// whole layer is zero).
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentNormTrace {
    pub quantity: Quantity,
    /// Largest segment mean per layer.
    pub layer_max: Vec<f64>,
    /// Segments with no tokens are omitted.
    pub cells: Vec<SegmentNormCell>,
}

impl SegmentNormTrace {
    pub fn from_grid(config: &ModelConfig, quantity: Quantity, grid: &SegmentGrid) -> Self {
        let mut layer_max = vec![0.0f64; config.n_layers];
        let mut cells = Vec::new();
        for (l, max) in layer_max.iter_mut().enumerate() {
            *max = Segment::ALL
                .iter()
                .filter_map(|&s| grid.mean(l, s))
                .fold(0.0, f64::max);
            for seg in Segment::ALL {
                if let Some(mean) = grid.mean(l, seg) {
                    cells.push(SegmentNormCell {
                        layer: l,
                        normalized_layer: config.normalized_layer(l),
                        segment: seg,
                        count: grid.counts[l][seg.index()],
                        mean_norm: mean,
                        normalized: if *max > 0.0 { mean / *max } else { 0.0 },
                    });
                }
            }
        }
        Self {
            quantity,
            layer_max,
            cells,
        }
    }

    pub fn cell(&self, layer: usize, seg: Segment) -> Option<&SegmentNormCell> {
        self.cells.iter().find(|c| c.layer == layer && c.segment == seg)
    }
}

pub fn segment_norm_trace(
    weights: &ModelWeights,
    config: &ModelConfig,
    corpus: &Corpus,
    quantity: Quantity,
) -> Result<SegmentNormTrace> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    corpus.require_labels()?;
    let mut grid = SegmentGrid::new(config.n_layers);
    for (i, p) in corpus.prompts().enumerate() {
        grid.merge(&segment_norms(weights, config, p, i, quantity)?);
    }
    Ok(SegmentNormTrace::from_grid(config, quantity, &grid))
}

/// Per-prompt target ranks: grid of `rank / V` sums plus zero-δ exclusions.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetRankGrid {
    pub ranks: SegmentGrid,
    pub excluded: SegmentGrid,
}

/// Least-probable-first lens rank of the prompt's target for every FF2 VJP
/// (no `ln_f`). Zero VJPs are counted in `excluded` instead.
pub fn target_ranks(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    index: usize,
) -> Result<TargetRankGrid> {
    let segs = labels(prompt, index)?;
    let (_, b) = traces(weights, config, prompt)?;
    let v = config.vocab_size as f64;
    let mut grid = TargetRankGrid {
        ranks: SegmentGrid::new(config.n_layers),
        excluded: SegmentGrid::new(config.n_layers),
    };
    for l in 0..config.n_layers {
        for (delta, &seg) in b.layers[l].delta_ff2.iter().zip(segs) {
            if l2_norm(delta) < ZERO_NORM {
                grid.excluded.add(l, seg, 0.0);
                continue;
            }
            let p = logit_lens(delta, weights, false)?;
            let r = token_rank(&p, prompt.target, RankDirection::LeastProbableFirst)?;
            grid.ranks.add(l, seg, r as f64 / v);
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetRankCell {
    pub layer: usize,
    pub normalized_layer: f64,
    pub segment: Segment,
    /// Mean of `rank / V` over non-zero VJPs; `None` when every VJP in the
    /// cell was zero.
    pub mean_rank: Option<f64>,
    pub count: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetRankCurve {
    pub cells: Vec<TargetRankCell>,
}

impl TargetRankCurve {
    pub fn from_grid(config: &ModelConfig, grid: &TargetRankGrid) -> Self {
        let mut cells = Vec::new();
        for l in 0..config.n_layers {
            for seg in Segment::ALL {
                let count = grid.ranks.counts[l][seg.index()];
                let excluded = grid.excluded.counts[l][seg.index()];
                if count + excluded == 0 {
                    continue;
                }
                cells.push(TargetRankCell {
                    layer: l,
                    normalized_layer: config.normalized_layer(l),
                    segment: seg,
                    mean_rank: grid.ranks.mean(l, seg),
                    count,
                    excluded,
                });
            }
        }
        Self { cells }
    }

    pub fn cell(&self, layer: usize, seg: Segment) -> Option<&TargetRankCell> {
        self.cells.iter().find(|c| c.layer == layer && c.segment == seg)
    }
}

pub fn target_rank_curve(
    weights: &ModelWeights,
    config: &ModelConfig,
    corpus: &Corpus,
) -> Result<TargetRankCurve> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    corpus.require_labels()?;
    let mut total = TargetRankGrid {
        ranks: SegmentGrid::new(config.n_layers),
        excluded: SegmentGrid::new(config.n_layers),
    };
    for (i, p) in corpus.prompts().enumerate() {
        let g = target_ranks(weights, config, p, i)?;
        total.ranks.merge(&g.ranks);
        total.excluded.merge(&g.excluded);
    }
    Ok(TargetRankCurve::from_grid(config, &total))
}

/// `δ_n · Dᵀ` written as a weighted sum of decoder columns.
#[derive(Debug, Clone, PartialEq)]
pub struct VjpDecomposition {
    pub target: usize,
    /// `(token, δ_n[token])` for every token.
    pub coefficients: Vec<(usize, f64)>,
    /// `max |δ_n·Dᵀ − Σ_k δ_n[k]·D[:, k]|`.
    pub residual: f64,
}

impl VjpDecomposition {
    pub fn target_coefficient(&self) -> f64 {
        self.coefficients[self.target].1
    }

    /// `target coefficient < 0` and every other coefficient `≥ 0`.
    pub fn signs_hold(&self) -> bool {
        self.coefficients
            .iter()
            .all(|&(k, c)| if k == self.target { c < 0.0 } else { c >= 0.0 })
    }

    pub fn coefficient_sum(&self) -> f64 {
        self.coefficients.iter().map(|c| c.1).sum()
    }
}

pub fn top_layer_vjp_decomposition(
    trace: &ForwardTrace,
    btrace: &BackwardTrace,
    weights: &ModelWeights,
) -> Result<VjpDecomposition> {
    let delta = &btrace.delta_decoder;
    let d = &weights.decoder;
    if delta.len() != d.cols() || btrace.delta_final_state.len() != d.rows() {
        return Err(Error::ShapeMismatch {
            what: "decoder VJP",
            expected: d.shape(),
            found: (btrace.delta_final_state.len(), delta.len()),
        });
    }
    let mut sum = vec![0.0; d.rows()];
    for (k, &c) in delta.iter().enumerate() {
        crate::linalg::axpy(c, &d.col(k), &mut sum);
    }
    let residual = sum
        .iter()
        .zip(&btrace.delta_final_state)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(VjpDecomposition {
        target: trace.target,
        coefficients: delta.iter().copied().enumerate().collect(),
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic, SyntheticSpec};
    use crate::linalg::Matrix;

    fn model(n_heads: usize) -> (ModelConfig, ModelWeights) {
        let cfg = ModelConfig {
            n_heads,
            seed: 2,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init_random(&cfg).unwrap();
        (cfg, w)
    }

    fn corpus(cfg: &ModelConfig, count: usize, min_len: usize, max_len: usize) -> Corpus {
        synthetic(
            cfg,
            &SyntheticSpec {
                count,
                min_len,
                max_len,
                seed: 5,
                ..SyntheticSpec::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn rank_scan_bounds_and_final_layer() {
        let (cfg, w) = model(8);
        let c = corpus(&cfg, 20, 2, 10);
        let r = rank_scan(&w, &cfg, &c).unwrap();
        assert_eq!(r.cells.len(), 20 * 4 * 2);
        assert!(r.violations.is_empty());
        assert_eq!(r.final_layer.fraction(), 1.0);
        assert!(r.non_final.fraction() >= 0.98, "{:?}", r.non_final);
    }

    #[test]
    fn single_token_corpus_has_rank_at_most_one() {
        let (cfg, w) = model(1);
        let c = corpus(&cfg, 10, 1, 1);
        let r = rank_scan(&w, &cfg, &c).unwrap();
        assert!(r.cells.iter().all(|c| c.measured <= 1));
    }

    #[test]
    fn final_layer_norms_follow_zero_law() {
        let (cfg, w) = model(1);
        let c = corpus(&cfg, 15, 2, 10);
        for q in [Quantity::Ff2Vjp, Quantity::Ff1Vjp] {
            let tr = segment_norm_trace(&w, &cfg, &c, q).unwrap();
            let last = cfg.n_layers - 1;
            for seg in Segment::ALL {
                let cell = tr.cell(last, seg).unwrap();
                if seg == Segment::Last {
                    assert!(cell.mean_norm > 0.0);
                } else {
                    assert_eq!(cell.mean_norm, 0.0, "{q} {seg}");
                }
            }
            assert!(tr.cells.iter().all(|c| c.mean_norm >= 0.0));
            assert!(tr.cells.iter().all(|c| (0.0..=1.0).contains(&c.normalized)));
        }
        let x = segment_norm_trace(&w, &cfg, &c, Quantity::Ff1Input).unwrap();
        assert!(x.cells.iter().all(|c| c.mean_norm > 0.0));
    }

    #[test]
    fn unlabeled_corpus_rejected() {
        let (cfg, w) = model(1);
        let mut c = corpus(&cfg, 3, 2, 4);
        c.entries[1].prompt.segments = None;
        assert_eq!(
            segment_norm_trace(&w, &cfg, &c, Quantity::Ff2Vjp),
            Err(Error::UnlabeledCorpus { entry: 1 })
        );
        assert!(target_rank_curve(&w, &cfg, &c).is_err());
    }

    #[test]
    fn target_rank_curve_exclusions_and_range() {
        let (cfg, w) = model(1);
        let c = corpus(&cfg, 12, 2, 10);
        let curve = target_rank_curve(&w, &cfg, &c).unwrap();
        let last = cfg.n_layers - 1;
        let excluded: usize = curve
            .cells
            .iter()
            .filter(|c| c.layer == last)
            .map(|c| c.excluded)
            .sum();
        let expected: usize = c.prompts().map(|p| p.len() - 1).sum();
        assert_eq!(excluded, expected);
        for cell in &curve.cells {
            if let Some(r) = cell.mean_rank {
                assert!((0.0..=1.0).contains(&r));
            }
        }
        assert_eq!(curve.cell(last, Segment::Last).unwrap().excluded, 0);
    }

    #[test]
    fn identity_decoder_gives_rank_zero_at_top() {
        let cfg = ModelConfig {
            n_layers: 2,
            d: 12,
            d_m: 24,
            vocab_size: 12,
            n_heads: 2,
            seed: 6,
            ..ModelConfig::default()
        };
        let mut w = ModelWeights::init_random(&cfg).unwrap();
        w.decoder = Matrix::identity(12);
        let p = Prompt::new(vec![1, 2, 3], 7).with_segments(Segment::label_positions(3, 2));
        let g = target_ranks(&w, &cfg, &p, 0).unwrap();
        assert_eq!(g.ranks.mean(1, Segment::Last), Some(0.0));
    }

    #[test]
    fn decomposition_identity_and_signs() {
        let (cfg, w) = model(1);
        let c = corpus(&cfg, 10, 1, 10);
        for p in c.prompts() {
            let (t, b) = traces(&w, &cfg, p).unwrap();
            let dec = top_layer_vjp_decomposition(&t, &b, &w).unwrap();
            assert!(dec.residual <= 1e-12);
            assert!(dec.signs_hold());
            assert!((dec.target_coefficient() - (t.probs[p.target] - 1.0)).abs() < 1e-15);
            assert!(dec.coefficient_sum().abs() <= 1e-12);
        }
    }
}
