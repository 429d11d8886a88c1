//! Single-prompt knowledge editing and the imprint/shift identities.
//!
//! `sgd_edit` applies one gradient step `W ← W + η·∂L/∂W` with a negative
//! learning rate. `forward_pass_shift` skips the backward pass entirely and
//! adds `η·outer(x_n, D[:, t])` to one FF2 matrix, where `x_n` is the last
//! token's FF2 input and `D[:, t]` the target's decoder column.

use alloc::vec::Vec;
use core::fmt;

use crate::corpus::{Corpus, CorpusEntry};
use crate::engine::{self, loss_nll, predict};
use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, softmax, Matrix};
use crate::model::{MlpMatrix, ModelConfig, ModelWeights, ParamId, Prompt};

/// `{−0.01·2^k, k = 0..12}`.
pub fn sgd_eta_grid() -> Vec<f64> {
    (0..=12).map(|k| -0.01 * f64::from(1u32 << k)).collect()
}

/// Step of the forward-pass-shift grid `{SHIFT_ETA_STEP·k, k = 1..13}`.
///
/// The toy model's FF2 inputs and decoder columns are far smaller than a
/// pretrained model's, so the rank-1 shift needs a much larger η to move
/// the target logit past its competitors.
pub const SHIFT_ETA_STEP: f64 = 2.0e4;

/// Frozen forward-pass-shift learning rate used when none is given.
pub const DEFAULT_SHIFT_ETA: f64 = 2.6e5;

pub fn shift_eta_grid() -> Vec<f64> {
    (1..=13).map(|k| SHIFT_ETA_STEP * f64::from(k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditMethod {
    SgdBackprop,
    ForwardPassShift,
}

impl EditMethod {
    pub fn name(self) -> &'static str {
        match self {
            EditMethod::SgdBackprop => "sgd-backprop",
            EditMethod::ForwardPassShift => "forward-pass-shift",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd-backprop" | "sgd" => Some(EditMethod::SgdBackprop),
            "forward-pass-shift" | "shift" => Some(EditMethod::ForwardPassShift),
            _ => None,
        }
    }
}

impl fmt::Display for EditMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSpec {
    pub method: EditMethod,
    /// Edited FF2 layer (forward pass shift only).
    pub layer: usize,
    pub eta: f64,
    /// Matrices updated by SGD; `None` means every parameter.
    pub scope: Option<Vec<ParamId>>,
    /// Accept `η ≥ 0` for SGD.
    pub allow_positive_eta: bool,
}

impl EditSpec {
    pub fn sgd(eta: f64) -> Self {
        Self {
            method: EditMethod::SgdBackprop,
            layer: 0,
            eta,
            scope: None,
            allow_positive_eta: false,
        }
    }

    pub fn shift(layer: usize, eta: f64) -> Self {
        Self {
            method: EditMethod::ForwardPassShift,
            layer,
            eta,
            scope: None,
            allow_positive_eta: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub weights: ModelWeights,
    pub pre_logits: Vec<f64>,
    pub post_logits: Vec<f64>,
    pub pre_loss: f64,
    pub post_loss: f64,
    /// `argmax(post_logits) == target`.
    pub success: bool,
    pub target_logit_delta: f64,
}

fn outcome(
    weights: ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    pre_logits: Vec<f64>,
) -> Result<EditOutcome> {
    let post_logits = predict(&weights, config, &prompt.tokens)?;
    let t = prompt.target;
    Ok(EditOutcome {
        pre_loss: loss_nll(&pre_logits, t)?.0,
        post_loss: loss_nll(&post_logits, t)?.0,
        success: argmax(&post_logits) == t,
        target_logit_delta: post_logits[t] - pre_logits[t],
        weights,
        pre_logits,
        post_logits,
    })
}

fn check_eta(eta: f64, allow_positive: bool) -> Result<()> {
    if !eta.is_finite() || (eta >= 0.0 && !allow_positive) {
        return Err(Error::EtaConvention { eta });
    }
    Ok(())
}

/// Adds `η·grad` to every matrix in `scope` (all parameters when `None`).
pub fn apply_gradient(
    weights: &ModelWeights,
    config: &ModelConfig,
    grads: &ModelWeights,
    eta: f64,
    scope: Option<&[ParamId]>,
) -> Result<ModelWeights> {
    let ids = match scope {
        Some(s) => s.to_vec(),
        None => ParamId::all(config),
    };
    let mut out = weights.clone();
    for id in ids {
        let g = grads.param(id).ok_or_else(|| Error::InvalidConfig {
            field: "scope",
            reason: alloc::format!("{id} is not part of this model"),
        })?;
        out.param_mut(id).expect("same layout as grads").add_scaled(eta, g)?;
    }
    Ok(out)
}

/// One SGD step on the prompt's loss. `η` must be negative unless
/// `allow_positive_eta` is set.
pub fn sgd_edit(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    eta: f64,
    scope: Option<&[ParamId]>,
    allow_positive_eta: bool,
) -> Result<EditOutcome> {
    check_eta(eta, allow_positive_eta)?;
    let (trace, _, grads) = engine::loss_and_gradients(weights, config, prompt)?;
    let edited = apply_gradient(weights, config, &grads, eta, scope)?;
    outcome(edited, config, prompt, trace.logits)
}

/// Rank-1 update of `FF2[layer]` from one forward pass.
pub fn forward_pass_shift(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    layer: usize,
    eta: f64,
) -> Result<EditOutcome> {
    if layer >= config.n_layers {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            bound: config.n_layers,
        });
    }
    if !eta.is_finite() {
        return Err(Error::EtaConvention { eta });
    }
    let trace = engine::forward(weights, config, prompt)?;
    let x_n = &trace.layers[layer].act[trace.last()];
    let column = weights.decoder_column(prompt.target);
    let mut edited = weights.clone();
    edited.layers[layer].ff2.add_outer(eta, x_n, &column);
    outcome(edited, config, prompt, trace.logits)
}

pub fn apply_edit(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    spec: &EditSpec,
) -> Result<EditOutcome> {
    match spec.method {
        EditMethod::SgdBackprop => sgd_edit(
            weights,
            config,
            prompt,
            spec.eta,
            spec.scope.as_deref(),
            spec.allow_positive_eta,
        ),
        EditMethod::ForwardPassShift => {
            forward_pass_shift(weights, config, prompt, spec.layer, spec.eta)
        }
    }
}

/// Smallest-|η| entry of `grid` whose edit succeeds, reusing one gradient
/// for every SGD step.
pub fn min_successful_eta(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    method: EditMethod,
    layer: usize,
    grid: &[f64],
) -> Result<Option<f64>> {
    let mut order = grid.to_vec();
    order.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    match method {
        EditMethod::SgdBackprop => {
            let (_, _, grads) = engine::loss_and_gradients(weights, config, prompt)?;
            for eta in order {
                check_eta(eta, false)?;
                let w = apply_gradient(weights, config, &grads, eta, None)?;
                if argmax(&predict(&w, config, &prompt.tokens)?) == prompt.target {
                    return Ok(Some(eta));
                }
            }
        }
        EditMethod::ForwardPassShift => {
            for eta in order {
                if forward_pass_shift(weights, config, prompt, layer, eta)?.success {
                    return Ok(Some(eta));
                }
            }
        }
    }
    Ok(None)
}

/// Max residual of `x·(c + η·δ[j]·x) = x·c + ‖x‖²·η·δ[j]` over all neurons `j`
/// of `ff1` for one `(x, δ)` pair.
pub fn imprint_residual(ff1: &Matrix, x: &[f64], delta: &[f64], eta: f64) -> f64 {
    let mut worst = 0.0f64;
    let sq = dot(x, x);
    for (j, &dj) in delta.iter().enumerate() {
        let col = ff1.col(j);
        let updated: Vec<f64> = col.iter().zip(x).map(|(c, xa)| c + eta * dj * xa).collect();
        let rerun = dot(x, &updated);
        let predicted = dot(x, &col) + sq * eta * dj;
        worst = worst.max((rerun - predicted).abs());
    }
    worst
}

/// FF1 update identity at `layer` for every token of `prompt`.
pub fn imprint_identity_check(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    layer: usize,
    eta: f64,
) -> Result<f64> {
    let (t, b) = layer_traces(weights, config, prompt, layer)?;
    let ff1 = &weights.layers[layer].ff1;
    Ok(t.layers[layer]
        .ff1_in
        .iter()
        .zip(&b.layers[layer].delta_ff1)
        .map(|(x, d)| imprint_residual(ff1, x, d, eta))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftCheck {
    pub max_residual: f64,
    /// Every added term `η·(x[j])²·δ` has a nonpositive coefficient.
    pub coefficients_nonpositive: bool,
}

/// Residual of `x[j]·(r + η·x[j]·δ) = x[j]·r + η·x[j]²·δ` over all rows `r`
/// of `ff2` for one `(x, δ)` pair.
pub fn shift_residual(ff2: &Matrix, x: &[f64], delta: &[f64], eta: f64) -> ShiftCheck {
    let mut check = ShiftCheck {
        max_residual: 0.0,
        coefficients_nonpositive: true,
    };
    for (j, &xj) in x.iter().enumerate() {
        let row = ff2.row(j);
        let coef = eta * xj * xj;
        check.coefficients_nonpositive &= coef <= 0.0;
        for (r, d) in row.iter().zip(delta) {
            let rerun = xj * (r + eta * xj * d);
            let predicted = xj * r + coef * d;
            check.max_residual = check.max_residual.max((rerun - predicted).abs());
        }
    }
    check
}

/// FF2 update identity at `layer` for every token of `prompt`.
pub fn shift_identity_check(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    layer: usize,
    eta: f64,
) -> Result<ShiftCheck> {
    let (t, b) = layer_traces(weights, config, prompt, layer)?;
    let ff2 = &weights.layers[layer].ff2;
    let mut total = ShiftCheck {
        max_residual: 0.0,
        coefficients_nonpositive: true,
    };
    for (x, d) in t.layers[layer].act.iter().zip(&b.layers[layer].delta_ff2) {
        let c = shift_residual(ff2, x, d, eta);
        total.max_residual = total.max_residual.max(c.max_residual);
        total.coefficients_nonpositive &= c.coefficients_nonpositive;
    }
    Ok(total)
}

fn layer_traces(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    layer: usize,
) -> Result<(engine::ForwardTrace, engine::BackwardTrace)> {
    if layer >= config.n_layers {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            bound: config.n_layers,
        });
    }
    let t = engine::forward(weights, config, prompt)?;
    let b = engine::backward(weights, config, &t)?;
    Ok((t, b))
}

/// `KL(p ‖ q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (libm::log(a) - libm::log(b)))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat {
            mean,
            std: libm::sqrt(var),
            count: values.len(),
        }
    }
}

/// Scores of one edit on one corpus entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryScore {
    pub efficacy: f64,
    /// Fraction of paraphrases answered with the target (`None` if none).
    pub paraphrase: Option<f64>,
    /// Fraction of neighbors whose argmax is unchanged (`None` if none).
    pub neighborhood: Option<f64>,
    pub mean_kl: f64,
}

/// Next-token distributions of the unedited model on a held-out set.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    pub prompts: Vec<Vec<usize>>,
    pub probs: Vec<Vec<f64>>,
}

impl HeldOut {
    pub fn new(weights: &ModelWeights, config: &ModelConfig, prompts: Vec<Vec<usize>>) -> Result<Self> {
        let probs = prompts
            .iter()
            .map(|t| Ok(softmax(&predict(weights, config, t)?)))
            .collect::<Result<_>>()?;
        Ok(Self { prompts, probs })
    }

    pub fn mean_kl(&self, edited: &ModelWeights, config: &ModelConfig) -> Result<f64> {
        if self.prompts.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (t, p) in self.prompts.iter().zip(&self.probs) {
            total += kl_divergence(p, &softmax(&predict(edited, config, t)?));
        }
        Ok(total / self.prompts.len() as f64)
    }
}

fn fraction(hits: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut n, mut k) = (0usize, 0usize);
    for h in hits {
        n += 1;
        k += usize::from(h);
    }
    (n > 0).then(|| k as f64 / n as f64)
}

/// Scores `edited` (or the unedited model when `None`) on one entry.
pub fn score_entry(
    weights: &ModelWeights,
    edited: Option<&ModelWeights>,
    config: &ModelConfig,
    entry: &CorpusEntry,
    held_out: &HeldOut,
) -> Result<EntryScore> {
    let model = edited.unwrap_or(weights);
    let target = entry.prompt.target;
    let answers = |w: &ModelWeights, t: &[usize]| -> Result<usize> { Ok(argmax(&predict(w, config, t)?)) };
    let efficacy = f64::from(u8::from(answers(model, &entry.prompt.tokens)? == target));
    let para = entry
        .paraphrases
        .iter()
        .map(|t| Ok(answers(model, t)? == target))
        .collect::<Result<Vec<_>>>()?;
    let neigh = entry
        .neighborhood
        .iter()
        .map(|t| Ok(answers(model, t)? == answers(weights, t)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(EntryScore {
        efficacy,
        paraphrase: fraction(para.into_iter()),
        neighborhood: fraction(neigh.into_iter()),
        mean_kl: match edited {
            Some(w) => held_out.mean_kl(w, config)?,
            None => 0.0,
        },
    })
}

/// Applies `spec` to one entry's prompt (from the unedited weights) and
/// scores the result.
pub fn evaluate_entry(
    weights: &ModelWeights,
    config: &ModelConfig,
    entry: &CorpusEntry,
    spec: &EditSpec,
    held_out: &HeldOut,
) -> Result<EntryScore> {
    let edit = apply_edit(weights, config, &entry.prompt, spec)?;
    score_entry(weights, Some(&edit.weights), config, entry, held_out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// `None` for the unedited baseline.
    pub spec: Option<EditSpec>,
    pub efficacy: Stat,
    pub paraphrase: Stat,
    pub neighborhood: Stat,
    pub mean_kl: f64,
}

impl MetricsRow {
    pub fn from_scores(spec: Option<EditSpec>, scores: &[EntryScore]) -> Self {
        let eff: Vec<f64> = scores.iter().map(|s| s.efficacy).collect();
        let para: Vec<f64> = scores.iter().filter_map(|s| s.paraphrase).collect();
        let neigh: Vec<f64> = scores.iter().filter_map(|s| s.neighborhood).collect();
        let kl: Vec<f64> = scores.iter().map(|s| s.mean_kl).collect();
        MetricsRow {
            spec,
            efficacy: Stat::of(&eff),
            paraphrase: Stat::of(&para),
            neighborhood: Stat::of(&neigh),
            mean_kl: Stat::of(&kl).mean,
        }
    }
}

/// Baseline row followed by one row per spec; every edit starts from the
/// unedited weights.
pub fn evaluate_edits(
    weights: &ModelWeights,
    config: &ModelConfig,
    corpus: &Corpus,
    specs: &[EditSpec],
    held_out: &HeldOut,
) -> Result<Vec<MetricsRow>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let baseline = corpus
        .entries
        .iter()
        .map(|e| score_entry(weights, None, config, e, held_out))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = alloc::vec![MetricsRow::from_scores(None, &baseline)];
    for spec in specs {
        let scores = corpus
            .entries
            .iter()
            .map(|e| evaluate_entry(weights, config, e, spec, held_out))
            .collect::<Result<Vec<_>>>()?;
        rows.push(MetricsRow::from_scores(Some(spec.clone()), &scores));
    }
    Ok(rows)
}

/// Parameters whose values differ between `a` and `b`.
pub fn changed_params(config: &ModelConfig, a: &ModelWeights, b: &ModelWeights) -> Vec<ParamId> {
    ParamId::all(config)
        .into_iter()
        .filter(|&id| a.param(id) != b.param(id))
        .collect()
}

/// `FF2_b − FF2_a` at `layer`.
pub fn ff2_change(a: &ModelWeights, b: &ModelWeights, layer: usize) -> Result<Matrix> {
    b.layers[layer].mlp(MlpMatrix::Ff2).sub(a.layers[layer].mlp(MlpMatrix::Ff2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic, SyntheticSpec};
    use crate::linalg::{numerical_rank, outer};
    use alloc::vec;

    fn setup(seed: u64) -> (ModelConfig, ModelWeights) {
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init_random(&cfg).unwrap();
        (cfg, w)
    }

    fn prompt() -> Prompt {
        Prompt::new(vec![4, 8, 15, 16, 23], 42)
    }

    #[test]
    fn grids() {
        let g = sgd_eta_grid();
        assert_eq!(g.len(), 13);
        assert_eq!(g[0], -0.01);
        assert_eq!(g[12], -40.96);
        let s = shift_eta_grid();
        assert_eq!(s.len(), 13);
        assert_eq!(s[12], DEFAULT_SHIFT_ETA);
    }

    #[test]
    fn sgd_first_order() {
        let (cfg, w) = setup(1);
        let a = sgd_edit(&w, &cfg, &prompt(), -1e-6, None, false).unwrap();
        let b = sgd_edit(&w, &cfg, &prompt(), -2e-6, None, false).unwrap();
        assert!(a.target_logit_delta > 0.0);
        let ratio = b.target_logit_delta / a.target_logit_delta;
        assert!((ratio - 2.0).abs() < 1e-4, "{ratio}");
    }

    #[test]
    fn small_steps_descend() {
        let (cfg, _) = setup(0);
        let c = synthetic(
            &cfg,
            &SyntheticSpec {
                count: 20,
                min_len: 1,
                seed: 3,
                ..SyntheticSpec::default()
            },
        )
        .unwrap();
        for (i, p) in c.prompts().enumerate() {
            let w = ModelWeights::init_random(&ModelConfig {
                seed: i as u64,
                ..cfg
            })
            .unwrap();
            for eta in [-1e-4, -1e-5] {
                let o = sgd_edit(&w, &cfg, p, eta, None, false).unwrap();
                assert!(o.post_loss < o.pre_loss, "prompt {i} eta {eta}");
            }
        }
    }

    #[test]
    fn eta_convention() {
        let (cfg, w) = setup(1);
        for eta in [0.0, 0.5] {
            assert_eq!(
                sgd_edit(&w, &cfg, &prompt(), eta, None, false).unwrap_err(),
                Error::EtaConvention { eta }
            );
        }
        let up = sgd_edit(&w, &cfg, &prompt(), 1e-3, None, true).unwrap();
        assert!(up.post_loss > up.pre_loss);
    }

    #[test]
    fn scope_limits_the_update() {
        let (cfg, w) = setup(2);
        let id = ParamId::Mlp(1, MlpMatrix::Ff2);
        let o = sgd_edit(&w, &cfg, &prompt(), -0.5, Some(&[id]), false).unwrap();
        assert_eq!(changed_params(&cfg, &w, &o.weights), vec![id]);
    }

    #[test]
    fn single_token_update_is_manual_outer_product() {
        let (cfg, w) = setup(3);
        let p = Prompt::new(vec![9], 1);
        let eta = -0.3;
        let id = ParamId::Mlp(2, MlpMatrix::Ff2);
        let o = sgd_edit(&w, &cfg, &p, eta, Some(&[id]), false).unwrap();
        let t = engine::forward(&w, &cfg, &p).unwrap();
        let b = engine::backward(&w, &cfg, &t).unwrap();
        let mut manual = w.layers[2].ff2.clone();
        manual
            .add_scaled(eta, &outer(&t.layers[2].act[0], &b.layers[2].delta_ff2[0]))
            .unwrap();
        assert_eq!(o.weights.layers[2].ff2, manual);
    }

    #[test]
    fn shift_is_rank_one_and_local() {
        let (cfg, w) = setup(4);
        let o = forward_pass_shift(&w, &cfg, &prompt(), 2, 1e4).unwrap();
        assert_eq!(
            changed_params(&cfg, &w, &o.weights),
            vec![ParamId::Mlp(2, MlpMatrix::Ff2)]
        );
        let diff = ff2_change(&w, &o.weights, 2).unwrap();
        assert_eq!(numerical_rank(&diff, None).unwrap(), 1);
        assert!(o.target_logit_delta > 0.0);
        assert!(forward_pass_shift(&w, &cfg, &prompt(), 4, 1.0).is_err());
    }

    #[test]
    fn zero_shift_is_a_no_op() {
        let (cfg, w) = setup(5);
        let o = forward_pass_shift(&w, &cfg, &prompt(), 2, 0.0).unwrap();
        assert_eq!(o.weights, w);
        assert_eq!(o.success, argmax(&o.pre_logits) == 42);
        assert_eq!(o.pre_logits, o.post_logits);
    }

    #[test]
    fn default_shift_edits_most_prompts() {
        let (cfg, w) = setup(0);
        let c = synthetic(&cfg, &SyntheticSpec { count: 40, seed: 11, ..SyntheticSpec::default() }).unwrap();
        let layer = cfg.default_edit_layer();
        let hits = c
            .prompts()
            .filter(|p| forward_pass_shift(&w, &cfg, p, layer, DEFAULT_SHIFT_ETA).unwrap().success)
            .count();
        assert!(hits >= 36, "{hits}/40");
    }

    #[test]
    fn identities_hold() {
        for seed in 0..4 {
            let (cfg, w) = setup(seed);
            for layer in 0..cfg.n_layers {
                for eta in [-1.0, -0.1, -0.01] {
                    let r = imprint_identity_check(&w, &cfg, &prompt(), layer, eta).unwrap();
                    assert!(r <= 1e-12, "imprint {r}");
                    let s = shift_identity_check(&w, &cfg, &prompt(), layer, eta).unwrap();
                    assert!(s.max_residual <= 1e-12, "shift {}", s.max_residual);
                    assert!(s.coefficients_nonpositive);
                }
            }
            assert_eq!(imprint_identity_check(&w, &cfg, &prompt(), 0, 0.0).unwrap(), 0.0);
            assert_eq!(shift_identity_check(&w, &cfg, &prompt(), 0, 0.0).unwrap().max_residual, 0.0);
        }
    }

    #[test]
    fn zero_inputs_leave_outputs_unchanged() {
        let (_, w) = setup(6);
        let ff1 = &w.layers[0].ff1;
        let x = vec![0.0; 16];
        let delta = vec![0.7; 64];
        assert_eq!(imprint_residual(ff1, &x, &delta, -1.0), 0.0);
        let ff2 = &w.layers[0].ff2;
        let mut act = vec![0.3; 64];
        act[5] = 0.0;
        let d = vec![1.0; 16];
        assert!(shift_residual(ff2, &act, &d, -1.0).max_residual <= 1e-15);
        assert!(!shift_residual(ff2, &act, &d, 1.0).coefficients_nonpositive);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        let k = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((k - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn evaluation_table() {
        let (cfg, w) = setup(0);
        let c = synthetic(&cfg, &SyntheticSpec { count: 10, seed: 2, ..SyntheticSpec::default() }).unwrap();
        let held = synthetic(&cfg, &SyntheticSpec { count: 5, seed: 99, ..SyntheticSpec::default() }).unwrap();
        let held = HeldOut::new(&w, &cfg, held.prompts().map(|p| p.tokens.clone()).collect()).unwrap();
        let specs = [EditSpec::shift(2, 0.0), EditSpec::shift(2, DEFAULT_SHIFT_ETA), EditSpec::sgd(-1.0)];
        let rows = evaluate_edits(&w, &cfg, &c, &specs, &held).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[0].spec.is_none());
        assert_eq!(rows[0].neighborhood.mean, 1.0);
        assert_eq!(rows[0].mean_kl, 0.0);
        assert_eq!(rows[1].neighborhood.mean, 1.0);
        assert_eq!(rows[1].efficacy.mean, rows[0].efficacy.mean);
        assert_eq!(rows[1].mean_kl, 0.0);
        assert!(rows[2].efficacy.mean >= 0.8);
        assert!(rows[2].mean_kl > 0.0);
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.efficacy.mean));
            assert_eq!(r.efficacy.count, 10);
        }
    }
}
