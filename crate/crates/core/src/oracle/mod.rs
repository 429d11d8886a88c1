//! Finite-difference gradient oracle.
//!
//! Independent of the backward pass: every probe evaluates the loss at two
//! perturbed weight settings with a forward pass that shares no code with
//! the engine.

mod paired;

use alloc::vec::Vec;

pub use paired::{loss_change, Probe};

use crate::engine;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ModelConfig, ModelWeights, ParamId, Prompt};

/// Central-difference gradient of the loss with respect to one parameter
/// tensor: `(L(W + h·E_ab) − L(W − h·E_ab)) / 2h` per entry.
///
/// The numerator is evaluated by [`loss_change`] starting from `W − h·E_ab`,
/// so gradients far below the loss's rounding level (~1e-16) still resolve.
pub fn finite_diff_grad(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    param: ParamId,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidStep);
    }
    prompt.validate(config)?;
    let (rows, cols) = weights
        .param(param)
        .ok_or(Error::InvalidConfig {
            field: "param",
            reason: alloc::format!("{param} is not part of this model"),
        })?
        .shape();
    let mut probe_w = weights.clone();
    let mut grad = Matrix::zeros(rows, cols);
    for idx in 0..rows * cols {
        let orig = weights.param(param).expect("present").data()[idx];
        let up = orig + h;
        let down = orig - h;
        probe_w.param_mut(param).expect("present").data_mut()[idx] = down;
        let probe = Probe {
            param,
            row: idx / cols,
            col: idx % cols,
            delta: up - down,
        };
        let diff = loss_change(&probe_w, config, &prompt.tokens, prompt.target, &probe)?;
        probe_w.param_mut(param).expect("present").data_mut()[idx] = orig;
        let g = diff / (up - down);
        if !g.is_finite() {
            return Err(Error::NonFiniteProbe {
                param: param.name(),
                row: idx / cols,
                col: idx % cols,
            });
        }
        grad.data_mut()[idx] = g;
    }
    Ok(grad)
}

/// `|a − f| / max(|a|, |f|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub param: ParamId,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// `(row, col)` of the entry with the largest relative error.
    pub worst: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub h: f64,
    pub params: Vec<ParamCheck>,
    /// Filled in by callers that have a clock.
    pub elapsed_secs: Option<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error() <= threshold
    }
}

pub fn compare(param: ParamId, analytic: &Matrix, numeric: &Matrix) -> ParamCheck {
    let cols = analytic.cols();
    let mut check = ParamCheck {
        param,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    for (idx, (&a, &f)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        check.max_abs_error = check.max_abs_error.max((a - f).abs());
        let rel = relative_error(a, f);
        if rel > check.max_rel_error {
            check.max_rel_error = rel;
            check.worst = (idx / cols, idx % cols);
        }
    }
    check
}

/// Finite differences over every parameter tensor, compared against the
/// engine's analytic gradients.
pub fn grad_check_all(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt: &Prompt,
    h: f64,
) -> Result<GradCheckReport> {
    prompt.validate(config)?;
    let (_, _, grads) = engine::loss_and_gradients(weights, config, prompt)?;
    let params = ParamId::all(config)
        .into_iter()
        .map(|id| {
            let numeric = finite_diff_grad(weights, config, prompt, id, h)?;
            Ok(compare(id, grads.param(id).expect("present"), &numeric))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        h,
        params,
        elapsed_secs: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_model_decoder_gradient_is_closed_form() {
        // Zero weights: logits are 0, p̂ uniform, and ∂L/∂D = outer(z, p̂ − e_t)
        // with z = E[tok] + P[pos] passed straight through.
        let cfg = ModelConfig {
            n_layers: 1,
            d: 4,
            d_m: 8,
            vocab_size: 5,
            max_seq: 4,
            ..ModelConfig::default()
        };
        let mut w = ModelWeights::zeros(&cfg);
        w.embed = Matrix::from_fn(5, 4, |r, c| 0.1 * (r as f64) - 0.05 * c as f64);
        let p = Prompt::new(vec![2, 3], 1);
        let fd = finite_diff_grad(&w, &cfg, &p, ParamId::Decoder, 1e-5).unwrap();
        let z = w.embed.row(3);
        let mut delta = vec![0.2; 5];
        delta[1] -= 1.0;
        let expected = crate::linalg::outer(z, &delta);
        assert!(fd.sub(&expected).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn invalid_step_rejected() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::zeros(&cfg);
        let p = Prompt::new(vec![1], 0);
        assert_eq!(
            finite_diff_grad(&w, &cfg, &p, ParamId::Decoder, 0.0),
            Err(Error::InvalidStep)
        );
    }

    fn small(ln: bool) -> (ModelConfig, ModelWeights, Prompt) {
        let cfg = ModelConfig {
            n_layers: 2,
            d: 8,
            d_m: 16,
            vocab_size: 12,
            n_heads: 2,
            max_seq: 6,
            use_final_ln: ln,
            seed: 21,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init_random(&cfg).unwrap();
        (cfg, w, Prompt::new(vec![3, 1, 4, 1, 5], 9))
    }

    #[test]
    fn covers_every_parameter_and_passes_with_and_without_ln() {
        for ln in [false, true] {
            let (cfg, w, p) = small(ln);
            let report = grad_check_all(&w, &cfg, &p, 1e-5).unwrap();
            let names: Vec<_> = report.params.iter().map(|c| c.param).collect();
            assert_eq!(names, ParamId::all(&cfg));
            assert!(report.passes(1e-6), "ln={ln}: {}", report.max_rel_error());
        }
    }

    #[test]
    fn error_shrinks_with_step() {
        // Larger weights make third derivatives visible above rounding.
        let (cfg, mut w, p) = small(false);
        w.layers.iter_mut().for_each(|lw| lw.ff1.scale(50.0));
        let id = ParamId::Mlp(0, crate::model::MlpMatrix::Ff1);
        let (_, _, g) = engine::loss_and_gradients(&w, &cfg, &p).unwrap();
        let err = |h| {
            let fd = finite_diff_grad(&w, &cfg, &p, id, h).unwrap();
            compare(id, g.param(id).unwrap(), &fd).max_abs_error
        };
        let coarse = err(1e-4);
        let fine = err(1e-5);
        assert!(fine < coarse, "h=1e-5 {fine} vs h=1e-4 {coarse}");
        assert!(fine < coarse / 10.0);
    }

    #[test]
    fn deterministic() {
        let (cfg, w, p) = small(true);
        let a = grad_check_all(&w, &cfg, &p, 1e-5).unwrap();
        let b = grad_check_all(&w, &cfg, &p, 1e-5).unwrap();
        assert_eq!(a, b);
    }
}
