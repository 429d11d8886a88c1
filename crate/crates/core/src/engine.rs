//! Traced forward pass and hand-derived backward pass.
//!
//! The loss is the negative log-likelihood of the target under the final
//! token's prediction only. The backward pass records the VJP of every
//! intermediate the MLP gradients are built from, so each gradient matrix
//! can be rebuilt as a sum of per-token outer products.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, softmax, Matrix};
use crate::model::{
    Activation, FinalNorm, Gradients, LayerWeights, MlpMatrix, ModelConfig,
    ModelWeights, Prompt, LN_EPS,
};

/// Forward intermediates of one transformer block, indexed `[token][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Block input `X^l_i`.
    pub block_in: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Causal softmax weights, `[head][i][j]` for `j <= i`.
    pub attn_weights: Vec<Vec<Vec<f64>>>,
    /// Concatenated head outputs before `W_O`.
    pub heads: Vec<Vec<f64>>,
    pub attn_out: Vec<Vec<f64>>,
    /// MLP input `Attn(X)_i + X_i`: the forward input of `FF1`.
    pub ff1_in: Vec<Vec<f64>>,
    /// `ff1_in · FF1`.
    pub preact: Vec<Vec<f64>>,
    /// `f(preact)`: the forward input of `FF2`.
    pub act: Vec<Vec<f64>>,
    pub mlp_out: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub rstd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    /// Output of the last block for every token.
    pub final_hidden: Vec<Vec<f64>>,
    /// Vector multiplied into `D`: the last token's final hidden state,
    /// through `ln_f` when enabled.
    pub final_state: Vec<f64>,
    pub ln_stats: Option<NormStats>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub target: usize,
    pub loss: f64,
}

impl ForwardTrace {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn last(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Forward input of an MLP matrix: `ff1_in` for FF1, `act` for FF2.
    pub fn mlp_input(&self, layer: usize, which: MlpMatrix) -> &[Vec<f64>] {
        match which {
            MlpMatrix::Ff1 => &self.layers[layer].ff1_in,
            MlpMatrix::Ff2 => &self.layers[layer].act,
        }
    }
}

/// VJPs of one block, indexed `[token][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVjps {
    /// VJP of FF2's output.
    pub delta_ff2: Vec<Vec<f64>>,
    /// VJP of FF1's output (the pre-activation).
    pub delta_ff1: Vec<Vec<f64>>,
    /// VJP arriving at the MLP input (also the VJP of `W_O`'s output).
    pub delta_ff1_in: Vec<Vec<f64>>,
    pub delta_heads: Vec<Vec<f64>>,
    pub delta_q: Vec<Vec<f64>>,
    pub delta_k: Vec<Vec<f64>>,
    pub delta_v: Vec<Vec<f64>>,
    /// VJP arriving at the block input.
    pub delta_block_in: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardTrace {
    /// VJP of the logits, `p̂ − onehot(t)`.
    pub delta_decoder: Vec<f64>,
    /// VJP of the vector fed into `D` (`δ_n · Dᵀ`).
    pub delta_final_state: Vec<f64>,
    /// VJP of the last token's final hidden state (equal to
    /// `delta_final_state` when `ln_f` is disabled).
    pub delta_final_hidden: Vec<f64>,
    pub layers: Vec<LayerVjps>,
}

impl BackwardTrace {
    /// VJP of an MLP matrix's output: `delta_ff1` or `delta_ff2`.
    pub fn mlp_delta(&self, layer: usize, which: MlpMatrix) -> &[Vec<f64>] {
        match which {
            MlpMatrix::Ff1 => &self.layers[layer].delta_ff1,
            MlpMatrix::Ff2 => &self.layers[layer].delta_ff2,
        }
    }
}

/// Softmax and negative log-likelihood of `target`.
pub fn loss_nll(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::OutOfRange {
            what: "target",
            index: target,
            bound: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "logits" });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&y| libm::exp(y - max)).sum();
    let loss = max + libm::log(sum) - logits[target];
    Ok((loss, softmax(logits)))
}

/// VJP of the logits under NLL: `p̂[k] − [k = t]`.
pub fn decoder_vjp(probs: &[f64], target: usize) -> Result<Vec<f64>> {
    if target >= probs.len() {
        return Err(Error::OutOfRange {
            what: "target",
            index: target,
            bound: probs.len(),
        });
    }
    let mut delta = probs.to_vec();
    delta[target] -= 1.0;
    Ok(delta)
}

fn layer_norm(h: &[f64], norm: &FinalNorm) -> (Vec<f64>, NormStats) {
    let d = h.len() as f64;
    let mean = h.iter().sum::<f64>() / d;
    let var = h.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let rstd = 1.0 / libm::sqrt(var + LN_EPS);
    let out = h
        .iter()
        .zip(norm.gain.data())
        .zip(norm.bias.data())
        .map(|((x, g), b)| (x - mean) * rstd * g + b)
        .collect();
    (out, NormStats { mean, rstd })
}

/// Applies the final layer norm to an arbitrary vector.
pub fn apply_final_ln(v: &[f64], weights: &ModelWeights) -> Result<Vec<f64>> {
    let norm = weights.ln_f.as_ref().ok_or(Error::NoFinalLayerNorm)?;
    Ok(layer_norm(v, norm).0)
}

struct AttnPass {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    weights: Vec<Vec<Vec<f64>>>,
    heads: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

fn attention(layer: &LayerWeights, config: &ModelConfig, x: &[Vec<f64>]) -> AttnPass {
    let n = x.len();
    let hd = config.head_dim();
    let scale = 1.0 / libm::sqrt(hd as f64);
    let q: Vec<_> = x.iter().map(|xi| layer.w_q.vec_mul(xi)).collect();
    let k: Vec<_> = x.iter().map(|xi| layer.w_k.vec_mul(xi)).collect();
    let v: Vec<_> = x.iter().map(|xi| layer.w_v.vec_mul(xi)).collect();
    let mut weights = Vec::with_capacity(config.n_heads);
    let mut heads = vec![vec![0.0; config.d]; n];
    for h in 0..config.n_heads {
        let span = h * hd..(h + 1) * hd;
        let mut head_w = Vec::with_capacity(n);
        for i in 0..n {
            let scores: Vec<f64> = (0..=i)
                .map(|j| dot(&q[i][span.clone()], &k[j][span.clone()]) * scale)
                .collect();
            let a = softmax(&scores);
            for (j, &aij) in a.iter().enumerate() {
                for (o, &vj) in heads[i][span.clone()].iter_mut().zip(&v[j][span.clone()]) {
                    *o += aij * vj;
                }
            }
            head_w.push(a);
        }
        weights.push(head_w);
    }
    let out = heads.iter().map(|c| layer.w_o.vec_mul(c)).collect();
    AttnPass {
        q,
        k,
        v,
        weights,
        heads,
        out,
    }
}

struct Activations {
    layers: Vec<LayerTrace>,
    final_hidden: Vec<Vec<f64>>,
    final_state: Vec<f64>,
    ln_stats: Option<NormStats>,
    logits: Vec<f64>,
}

fn run(weights: &ModelWeights, config: &ModelConfig, tokens: &[usize]) -> Result<Activations> {
    let n = tokens.len();
    if n == 0 || n > config.max_seq {
        return Err(Error::InvalidPrompt(alloc::format!(
            "prompt length {n} outside [1, {}]",
            config.max_seq
        )));
    }
    if weights.layers.len() != config.n_layers {
        return Err(Error::ShapeMismatch {
            what: "layer count",
            expected: (config.n_layers, 1),
            found: (weights.layers.len(), 1),
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::OutOfRange {
            what: "token",
            index: bad,
            bound: config.vocab_size,
        });
    }
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            weights
                .embed
                .row(t)
                .iter()
                .zip(weights.pos.row(i))
                .map(|(e, p)| e + p)
                .collect()
        })
        .collect();
    let act_fn = config.activation;
    let mut layers = Vec::with_capacity(config.n_layers);
    for lw in &weights.layers {
        let AttnPass {
            q,
            k,
            v,
            weights: attn_weights,
            heads,
            out: attn_out,
        } = attention(lw, config, &x);
        let ff1_in: Vec<Vec<f64>> = x
            .iter()
            .zip(&attn_out)
            .map(|(xi, ai)| xi.iter().zip(ai).map(|(a, b)| a + b).collect())
            .collect();
        let preact: Vec<Vec<f64>> = ff1_in.iter().map(|m| lw.ff1.vec_mul(m)).collect();
        let act: Vec<Vec<f64>> = preact
            .iter()
            .map(|p| p.iter().map(|&z| act_fn.apply(z)).collect())
            .collect();
        let mlp_out: Vec<Vec<f64>> = act.iter().map(|a| lw.ff2.vec_mul(a)).collect();
        let next = ff1_in
            .iter()
            .zip(&mlp_out)
            .map(|(m, o)| m.iter().zip(o).map(|(a, b)| a + b).collect())
            .collect();
        layers.push(LayerTrace {
            block_in: core::mem::replace(&mut x, next),
            q,
            k,
            v,
            attn_weights,
            heads,
            attn_out,
            ff1_in,
            preact,
            act,
            mlp_out,
        });
    }
    let last = &x[n - 1];
    let (final_state, ln_stats) = match (&weights.ln_f, config.use_final_ln) {
        (Some(norm), true) => {
            let (z, s) = layer_norm(last, norm);
            (z, Some(s))
        }
        (None, false) => (last.clone(), None),
        _ => return Err(Error::NoFinalLayerNorm),
    };
    let logits = weights.decoder.vec_mul(&final_state);
    Ok(Activations {
        layers,
        final_hidden: x,
        final_state,
        ln_stats,
        logits,
    })
}

/// Full traced forward pass for a prompt and its target.
pub fn forward(weights: &ModelWeights, config: &ModelConfig, prompt: &Prompt) -> Result<ForwardTrace> {
    let acts = run(weights, config, &prompt.tokens)?;
    let (loss, probs) = loss_nll(&acts.logits, prompt.target)?;
    Ok(ForwardTrace {
        tokens: prompt.tokens.clone(),
        layers: acts.layers,
        final_hidden: acts.final_hidden,
        final_state: acts.final_state,
        ln_stats: acts.ln_stats,
        logits: acts.logits,
        probs,
        target: prompt.target,
        loss,
    })
}

/// Next-token logits for the final position.
pub fn predict(weights: &ModelWeights, config: &ModelConfig, tokens: &[usize]) -> Result<Vec<f64>> {
    Ok(run(weights, config, tokens)?.logits)
}

/// Loss of `target` after the final position.
pub fn loss(weights: &ModelWeights, config: &ModelConfig, prompt: &Prompt) -> Result<f64> {
    Ok(loss_nll(&predict(weights, config, &prompt.tokens)?, prompt.target)?.0)
}

fn check_trace(weights: &ModelWeights, config: &ModelConfig, trace: &ForwardTrace) -> Result<()> {
    let mismatch = |what, expected, found| Err(Error::ShapeMismatch { what, expected, found });
    if trace.layers.len() != weights.layers.len() || weights.layers.len() != config.n_layers {
        return mismatch(
            "trace layer count",
            (weights.layers.len(), 1),
            (trace.layers.len(), 1),
        );
    }
    if trace.logits.len() != weights.decoder.cols() {
        return mismatch(
            "trace logits",
            (weights.decoder.cols(), 1),
            (trace.logits.len(), 1),
        );
    }
    if trace.final_state.len() != weights.decoder.rows() {
        return mismatch(
            "trace final state",
            (weights.decoder.rows(), 1),
            (trace.final_state.len(), 1),
        );
    }
    for (lt, lw) in trace.layers.iter().zip(&weights.layers) {
        if lt.preact.iter().any(|p| p.len() != lw.ff1.cols())
            || lt.ff1_in.iter().any(|x| x.len() != lw.ff1.rows())
        {
            return mismatch("trace MLP activations", lw.ff1.shape(), (lt.preact.len(), 0));
        }
    }
    Ok(())
}

fn ln_backward(g_out: &[f64], h: &[f64], norm: &FinalNorm, stats: NormStats) -> Vec<f64> {
    let d = h.len() as f64;
    let xhat: Vec<f64> = h.iter().map(|x| (x - stats.mean) * stats.rstd).collect();
    let g_xhat: Vec<f64> = g_out.iter().zip(norm.gain.data()).map(|(g, w)| g * w).collect();
    let mean_g = g_xhat.iter().sum::<f64>() / d;
    let mean_gx = dot(&g_xhat, &xhat) / d;
    g_xhat
        .iter()
        .zip(&xhat)
        .map(|(g, xh)| stats.rstd * (g - mean_g - xh * mean_gx))
        .collect()
}

/// Reverse-mode pass through the traced computation.
///
/// At every residual junction the incoming VJP flows both into the branch
/// and unchanged past it; a linear map `z = x·W` sends `δ_z` to `δ_z·Wᵀ`.
pub fn backward(
    weights: &ModelWeights,
    config: &ModelConfig,
    trace: &ForwardTrace,
) -> Result<BackwardTrace> {
    check_trace(weights, config, trace)?;
    let n = trace.n_tokens();
    let d = config.d;
    let delta_decoder = decoder_vjp(&trace.probs, trace.target)?;
    let delta_final_state = weights.decoder.mul_vec(&delta_decoder);
    let delta_final_hidden = match (&weights.ln_f, trace.ln_stats) {
        (Some(norm), Some(stats)) => {
            ln_backward(&delta_final_state, &trace.final_hidden[n - 1], norm, stats)
        }
        _ => delta_final_state.clone(),
    };

    let mut g = vec![vec![0.0; d]; n];
    g[n - 1].clone_from(&delta_final_hidden);
    let hd = config.head_dim();
    let scale = 1.0 / libm::sqrt(hd as f64);
    let act_fn: Activation = config.activation;
    let mut layers = Vec::with_capacity(config.n_layers);

    for (lw, lt) in weights.layers.iter().zip(&trace.layers).rev() {
        let delta_ff2 = g;
        let delta_ff1: Vec<Vec<f64>> = delta_ff2
            .iter()
            .zip(&lt.preact)
            .map(|(go, pre)| {
                lw.ff2
                    .mul_vec(go)
                    .into_iter()
                    .zip(pre)
                    .map(|(ga, &z)| ga * act_fn.derivative(z))
                    .collect()
            })
            .collect();
        let delta_ff1_in: Vec<Vec<f64>> = delta_ff2
            .iter()
            .zip(&delta_ff1)
            .map(|(go, gp)| {
                let mut gm = lw.ff1.mul_vec(gp);
                gm.iter_mut().zip(go).for_each(|(a, b)| *a += b);
                gm
            })
            .collect();

        let delta_heads: Vec<Vec<f64>> = delta_ff1_in.iter().map(|gm| lw.w_o.mul_vec(gm)).collect();
        let mut delta_q = vec![vec![0.0; d]; n];
        let mut delta_k = vec![vec![0.0; d]; n];
        let mut delta_v = vec![vec![0.0; d]; n];
        for h in 0..config.n_heads {
            let span = h * hd..(h + 1) * hd;
            for i in 0..n {
                let a = &lt.attn_weights[h][i];
                let gc = &delta_heads[i][span.clone()];
                let g_a: Vec<f64> = (0..=i).map(|j| dot(gc, &lt.v[j][span.clone()])).collect();
                let weighted = dot(a, &g_a);
                for j in 0..=i {
                    for (gv, &c) in delta_v[j][span.clone()].iter_mut().zip(gc) {
                        *gv += a[j] * c;
                    }
                    let gs = a[j] * (g_a[j] - weighted) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    for t in span.clone() {
                        delta_q[i][t] += gs * lt.k[j][t];
                        delta_k[j][t] += gs * lt.q[i][t];
                    }
                }
            }
        }
        let delta_block_in: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut gx = delta_ff1_in[i].clone();
                for (w, gin) in [
                    (&lw.w_q, &delta_q[i]),
                    (&lw.w_k, &delta_k[i]),
                    (&lw.w_v, &delta_v[i]),
                ] {
                    gx.iter_mut()
                        .zip(w.mul_vec(gin))
                        .for_each(|(a, b)| *a += b);
                }
                gx
            })
            .collect();
        g = delta_block_in.clone();
        layers.push(LayerVjps {
            delta_ff2,
            delta_ff1,
            delta_ff1_in,
            delta_heads,
            delta_q,
            delta_k,
            delta_v,
            delta_block_in,
        });
    }
    layers.reverse();
    Ok(BackwardTrace {
        delta_decoder,
        delta_final_state,
        delta_final_hidden,
        layers,
    })
}

fn outer_sum(xs: &[Vec<f64>], deltas: &[Vec<f64>]) -> Matrix {
    let mut m = Matrix::zeros(xs[0].len(), deltas[0].len());
    for (x, delta) in xs.iter().zip(deltas) {
        m.add_outer(1.0, x, delta);
    }
    m
}

/// `∂L/∂FF` as `Σ_i outer(x_i, δ_i)` over prompt tokens.
pub fn grad_matrix(
    trace: &ForwardTrace,
    btrace: &BackwardTrace,
    layer: usize,
    which: MlpMatrix,
) -> Result<Matrix> {
    if layer >= trace.layers.len() || layer >= btrace.layers.len() {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            bound: trace.layers.len(),
        });
    }
    Ok(outer_sum(
        trace.mlp_input(layer, which),
        btrace.mlp_delta(layer, which),
    ))
}

/// Gradient of the loss with respect to every parameter.
pub fn gradients(
    weights: &ModelWeights,
    config: &ModelConfig,
    trace: &ForwardTrace,
    btrace: &BackwardTrace,
) -> Result<Gradients> {
    check_trace(weights, config, trace)?;
    let mut grads = ModelWeights::zeros(config);
    let g0 = &btrace.layers[0].delta_block_in;
    for (i, &tok) in trace.tokens.iter().enumerate() {
        crate::linalg::axpy(1.0, &g0[i], grads.embed.row_mut(tok));
        crate::linalg::axpy(1.0, &g0[i], grads.pos.row_mut(i));
    }
    for (l, (lt, lv)) in trace.layers.iter().zip(&btrace.layers).enumerate() {
        let gl = &mut grads.layers[l];
        gl.w_q = outer_sum(&lt.block_in, &lv.delta_q);
        gl.w_k = outer_sum(&lt.block_in, &lv.delta_k);
        gl.w_v = outer_sum(&lt.block_in, &lv.delta_v);
        gl.w_o = outer_sum(&lt.heads, &lv.delta_ff1_in);
        gl.ff1 = outer_sum(&lt.ff1_in, &lv.delta_ff1);
        gl.ff2 = outer_sum(&lt.act, &lv.delta_ff2);
    }
    if let (Some(gn), Some(stats)) = (grads.ln_f.as_mut(), trace.ln_stats) {
        let h = &trace.final_hidden[trace.last()];
        for (c, &x) in h.iter().enumerate() {
            let xhat = (x - stats.mean) * stats.rstd;
            gn.gain.data_mut()[c] = btrace.delta_final_state[c] * xhat;
            gn.bias.data_mut()[c] = btrace.delta_final_state[c];
        }
    }
    grads.decoder = crate::linalg::outer(&trace.final_state, &btrace.delta_decoder);
    Ok(grads)
}

/// Forward, backward and all parameter gradients in one call.
pub fn loss_and_gradients(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
) -> Result<(ForwardTrace, BackwardTrace, Gradients)> {
    let trace = forward(weights, config, prompt)?;
    let btrace = backward(weights, config, &trace)?;
    let grads = gradients(weights, config, &trace, &btrace)?;
    Ok((trace, btrace, grads))
}
