//! Paired forward pass: evaluates `L(W⁻ + ΔW) − L(W⁻)` for a single-entry
//! perturbation `ΔW` by carrying every intermediate as `(value at W⁻, exact
//! difference to the W⁺ side)`.
//!
//! Each operation propagates the difference through an algebraically exact
//! identity (bilinear expansion, `expm1`, `sinh` for tanh differences, ...),
//! so the result is the same central difference two separate forward passes
//! would produce, minus the cancellation error of subtracting two nearly
//! equal losses. This module shares no code with `engine`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{Activation, AttnMatrix, MlpMatrix, ModelConfig, ModelWeights, ParamId, LN_EPS};

/// One perturbed entry: `param[row, col]` moves by `delta` from the base weights.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub param: ParamId,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

#[derive(Debug, Clone)]
struct Pair {
    base: Vec<f64>,
    diff: Vec<f64>,
}

impl Pair {
    fn add(&self, other: &Pair) -> Pair {
        Pair {
            base: self.base.iter().zip(&other.base).map(|(a, b)| a + b).collect(),
            diff: self.diff.iter().zip(&other.diff).map(|(a, b)| a + b).collect(),
        }
    }
}

/// `(x + Δx)(W + ΔW) − xW = Δx·W + (x + Δx)·ΔW`.
fn linear(x: &Pair, w: &Matrix, id: ParamId, probe: &Probe) -> Pair {
    let base = w.vec_mul(&x.base);
    let mut diff = w.vec_mul(&x.diff);
    if probe.param == id {
        diff[probe.col] += (x.base[probe.row] + x.diff[probe.row]) * probe.delta;
    }
    Pair { base, diff }
}

fn softmax_pair(scores: &[f64], dscores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|&s| libm::exp(s - m)).collect();
    let de: Vec<f64> = e
        .iter()
        .zip(dscores)
        .map(|(&ei, &ds)| ei * libm::expm1(ds))
        .collect();
    let s: f64 = e.iter().sum();
    let ds: f64 = de.iter().sum();
    let sp = s + ds;
    let a = e.iter().map(|&ei| ei / s).collect();
    let da = e
        .iter()
        .zip(&de)
        .map(|(&ei, &dei)| (dei * s - ei * ds) / (sp * s))
        .collect();
    (a, da)
}

fn activation_diff(act: Activation, x: f64, dx: f64) -> f64 {
    let xp = x + dx;
    match act {
        Activation::Relu => {
            if x > 0.0 && xp > 0.0 {
                dx
            } else if x <= 0.0 && xp <= 0.0 {
                0.0
            } else {
                act.apply(xp) - act.apply(x)
            }
        }
        Activation::Gelu => {
            const C: f64 = 0.797_884_560_802_865_4;
            const K: f64 = 0.044715;
            let u = C * (x + K * x * x * x);
            let du = C * dx * (1.0 + K * (xp * xp + xp * x + x * x));
            let up = u + du;
            // tanh(a) − tanh(b) = sinh(a − b) / (cosh a · cosh b)
            let dtanh = libm::sinh(du) / (libm::cosh(up) * libm::cosh(u));
            0.5 * dx * (1.0 + libm::tanh(up)) + 0.5 * x * dtanh
        }
    }
}

fn layer_norm_pair(h: &Pair, weights: &ModelWeights, probe: &Probe) -> Result<Pair> {
    let norm = weights.ln_f.as_ref().ok_or(Error::NoFinalLayerNorm)?;
    let d = h.base.len() as f64;
    let mean = h.base.iter().sum::<f64>() / d;
    let dmean = h.diff.iter().sum::<f64>() / d;
    let c: Vec<f64> = h.base.iter().map(|x| x - mean).collect();
    let dc: Vec<f64> = h.diff.iter().map(|x| x - dmean).collect();
    let v = c.iter().map(|x| x * x).sum::<f64>() / d + LN_EPS;
    let dv = c.iter().zip(&dc).map(|(x, dx)| dx * (2.0 * x + dx)).sum::<f64>() / d;
    let sm = libm::sqrt(v);
    let sp = libm::sqrt(v + dv);
    let r = 1.0 / sm;
    let dr = -dv / ((sp + sm) * sp * sm);
    let mut base = Vec::with_capacity(c.len());
    let mut diff = Vec::with_capacity(c.len());
    for j in 0..c.len() {
        let xh = c[j] * r;
        let dxh = dc[j] * r + (c[j] + dc[j]) * dr;
        let g = norm.gain.data()[j];
        let b = norm.bias.data()[j];
        let mut dz = dxh * g;
        if probe.param == ParamId::LnGain && probe.col == j {
            dz += (xh + dxh) * probe.delta;
        }
        if probe.param == ParamId::LnBias && probe.col == j {
            dz += probe.delta;
        }
        base.push(xh * g + b);
        diff.push(dz);
    }
    Ok(Pair { base, diff })
}

/// `L(W + ΔW) − L(W)` for the probed entry, with `weights` holding `W`.
pub fn loss_change(
    weights: &ModelWeights,
    config: &ModelConfig,
    tokens: &[usize],
    target: usize,
    probe: &Probe,
) -> Result<f64> {
    let n = tokens.len();
    let d = config.d;
    let hd = config.head_dim();
    let scale = 1.0 / libm::sqrt(hd as f64);

    let mut xs: Vec<Pair> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let base = weights
                .embed
                .row(t)
                .iter()
                .zip(weights.pos.row(i))
                .map(|(e, p)| e + p)
                .collect();
            let mut diff = vec![0.0; d];
            if (probe.param == ParamId::Embed && probe.row == t)
                || (probe.param == ParamId::Pos && probe.row == i)
            {
                diff[probe.col] += probe.delta;
            }
            Pair { base, diff }
        })
        .collect();

    for (l, lw) in weights.layers.iter().enumerate() {
        let proj = |m: AttnMatrix, x: &Pair| linear(x, lw.attn(m), ParamId::Attn(l, m), probe);
        let q: Vec<Pair> = xs.iter().map(|x| proj(AttnMatrix::Query, x)).collect();
        let k: Vec<Pair> = xs.iter().map(|x| proj(AttnMatrix::Key, x)).collect();
        let v: Vec<Pair> = xs.iter().map(|x| proj(AttnMatrix::Value, x)).collect();
        let mut heads: Vec<Pair> = (0..n)
            .map(|_| Pair {
                base: vec![0.0; d],
                diff: vec![0.0; d],
            })
            .collect();
        for h in 0..config.n_heads {
            let span = h * hd..(h + 1) * hd;
            for i in 0..n {
                let qi = &q[i].base[span.clone()];
                let dqi = &q[i].diff[span.clone()];
                let mut s = Vec::with_capacity(i + 1);
                let mut ds = Vec::with_capacity(i + 1);
                for kj in &k[..=i] {
                    let kb = &kj.base[span.clone()];
                    let dk = &kj.diff[span.clone()];
                    s.push(scale * dot(qi, kb));
                    let qp: Vec<f64> = qi.iter().zip(dqi).map(|(a, b)| a + b).collect();
                    ds.push(scale * (dot(dqi, kb) + dot(&qp, dk)));
                }
                let (a, da) = softmax_pair(&s, &ds);
                for j in 0..=i {
                    let ap = a[j] + da[j];
                    for t in span.clone() {
                        heads[i].base[t] += a[j] * v[j].base[t];
                        heads[i].diff[t] += da[j] * v[j].base[t] + ap * v[j].diff[t];
                    }
                }
            }
        }
        let mut next = Vec::with_capacity(n);
        for (x, c) in xs.iter().zip(&heads) {
            let attn = linear(c, &lw.w_o, ParamId::Attn(l, AttnMatrix::Output), probe);
            let m_in = x.add(&attn);
            let pre = linear(&m_in, &lw.ff1, ParamId::Mlp(l, MlpMatrix::Ff1), probe);
            let act = Pair {
                base: pre.base.iter().map(|&z| config.activation.apply(z)).collect(),
                diff: pre
                    .base
                    .iter()
                    .zip(&pre.diff)
                    .map(|(&z, &dz)| activation_diff(config.activation, z, dz))
                    .collect(),
            };
            let out = linear(&act, &lw.ff2, ParamId::Mlp(l, MlpMatrix::Ff2), probe);
            next.push(m_in.add(&out));
        }
        xs = next;
    }

    let last = &xs[n - 1];
    let state = if config.use_final_ln {
        layer_norm_pair(last, weights, probe)?
    } else {
        last.clone()
    };
    let logits = linear(&state, &weights.decoder, ParamId::Decoder, probe);

    // log Σ exp(y + Δy) − log Σ exp(y) = log1p(Σ w_k expm1(Δy_k) / Σ w_k)
    let m = logits.base.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut change = 0.0;
    for (&y, &dy) in logits.base.iter().zip(&logits.diff) {
        let w = libm::exp(y - m);
        total += w;
        change += w * libm::expm1(dy);
    }
    Ok(libm::log1p(change / total) - logits.diff[target])
}
