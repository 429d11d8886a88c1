//! Spanning-set view of MLP gradients.
//!
//! A gradient `Σ_i outer(x_i, δ_i)` has every FF1 neuron (column) in
//! `span{x_i}` and every FF2 neuron (row) in `span{δ_i}`.

use alloc::vec::Vec;

use crate::engine::{BackwardTrace, ForwardTrace};
use crate::error::{Error, Result};
use crate::linalg::{self, dot, l2_norm, Matrix};
use crate::model::MlpMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SpanningDecomposition {
    pub layer: usize,
    pub which: MlpMatrix,
    /// `(x_i, δ_i)` in token order.
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl SpanningDecomposition {
    pub fn extract(
        trace: &ForwardTrace,
        btrace: &BackwardTrace,
        layer: usize,
        which: MlpMatrix,
    ) -> Result<Self> {
        let bound = trace.layers.len().min(btrace.layers.len());
        if layer >= bound {
            return Err(Error::OutOfRange {
                what: "layer",
                index: layer,
                bound,
            });
        }
        let pairs = trace
            .mlp_input(layer, which)
            .iter()
            .zip(btrace.mlp_delta(layer, which))
            .map(|(x, d)| (x.clone(), d.clone()))
            .collect();
        Ok(Self {
            layer,
            which,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The interpretable side: `x_i` for FF1, `δ_i` for FF2.
    pub fn spanning_vectors(&self) -> Vec<&[f64]> {
        self.pairs
            .iter()
            .map(|(x, d)| match self.which {
                MlpMatrix::Ff1 => x.as_slice(),
                MlpMatrix::Ff2 => d.as_slice(),
            })
            .collect()
    }

    /// Number of neurons: `d_m` for both matrices.
    pub fn n_neurons(&self) -> usize {
        match (self.which, self.pairs.first()) {
            (_, None) => 0,
            (MlpMatrix::Ff1, Some((_, d))) => d.len(),
            (MlpMatrix::Ff2, Some((x, _))) => x.len(),
        }
    }

    /// Gradient neuron `j`: FF1 column `Σ_i δ_i[j]·x_i`, FF2 row `Σ_i x_i[j]·δ_i`.
    pub fn neuron(&self, j: usize) -> Result<Vec<f64>> {
        let bound = self.n_neurons();
        if j >= bound {
            return Err(Error::OutOfRange {
                what: "neuron",
                index: j,
                bound,
            });
        }
        let dim = self.spanning_vectors()[0].len();
        let mut out = alloc::vec![0.0; dim];
        for (x, d) in &self.pairs {
            let (coef, v) = match self.which {
                MlpMatrix::Ff1 => (d[j], x),
                MlpMatrix::Ff2 => (x[j], d),
            };
            linalg::axpy(coef, v, &mut out);
        }
        Ok(out)
    }

    /// `Σ_i outer(x_i, δ_i)`.
    pub fn reconstruct(&self) -> Matrix {
        let (rows, cols) = match self.pairs.first() {
            Some((x, d)) => (x.len(), d.len()),
            None => (0, 0),
        };
        let mut m = Matrix::zeros(rows, cols);
        for (x, d) in &self.pairs {
            m.add_outer(1.0, x, d);
        }
        m
    }

    /// The same matrix assembled neuron by neuron (columns for FF1, rows
    /// for FF2).
    pub fn assemble_from_neurons(&self) -> Result<Matrix> {
        let mut m = self.reconstruct();
        m.scale(0.0);
        for j in 0..self.n_neurons() {
            let n = self.neuron(j)?;
            match self.which {
                MlpMatrix::Ff1 => {
                    for (r, v) in n.into_iter().enumerate() {
                        m[(r, j)] = v;
                    }
                }
                MlpMatrix::Ff2 => m.row_mut(j).copy_from_slice(&n),
            }
        }
        Ok(m)
    }
}

/// Expected gradient rank for an `n`-token prompt: `n` below the final
/// layer, at most 1 at the final layer.
pub fn predicted_rank(n: usize, layer: usize, n_layers: usize) -> usize {
    if layer + 1 >= n_layers {
        n.min(1)
    } else {
        n
    }
}

/// Norm of the component of `v` orthogonal to `span(vectors)`.
///
/// The span's basis is read from the SVD of the stacked vectors, keeping
/// directions above the default numerical-rank tolerance.
pub fn span_residual(vectors: &[&[f64]], v: &[f64]) -> Result<f64> {
    if vectors.is_empty() {
        return Ok(l2_norm(v));
    }
    let dim = v.len();
    let mut stacked = Vec::with_capacity(vectors.len() * dim);
    for u in vectors {
        if u.len() != dim {
            return Err(Error::ShapeMismatch {
                what: "spanning vector",
                expected: (dim, 1),
                found: (u.len(), 1),
            });
        }
        stacked.extend_from_slice(u);
    }
    let a = Matrix::from_vec(vectors.len(), dim, stacked)?;
    let dec = linalg::svd(&a)?;
    let smax = dec.s.first().copied().unwrap_or(0.0);
    let tol = (vectors.len().max(dim) as f64) * f64::EPSILON * smax;
    let mut r = v.to_vec();
    for (k, &s) in dec.s.iter().enumerate() {
        if s > tol {
            let b = dec.v.col(k);
            let c = dot(&r, &b);
            linalg::axpy(-c, &b, &mut r);
        }
    }
    Ok(l2_norm(&r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine;
    use crate::model::{ModelConfig, ModelWeights, Prompt};
    use alloc::vec;

    fn setup(tokens: Vec<usize>) -> (ModelConfig, ForwardTrace, BackwardTrace) {
        let cfg = ModelConfig {
            n_layers: 3,
            d: 8,
            d_m: 24,
            vocab_size: 20,
            n_heads: 2,
            max_seq: 8,
            seed: 17,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init_random(&cfg).unwrap();
        let t = engine::forward(&w, &cfg, &Prompt::new(tokens, 11)).unwrap();
        let b = engine::backward(&w, &cfg, &t).unwrap();
        (cfg, t, b)
    }

    fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
    }

    #[test]
    fn single_token_is_one_outer_product() {
        let (_, t, b) = setup(vec![5]);
        let dec = SpanningDecomposition::extract(&t, &b, 0, MlpMatrix::Ff1).unwrap();
        assert_eq!(dec.len(), 1);
        let (x, d) = &dec.pairs[0];
        assert_eq!(dec.reconstruct(), linalg::outer(x, d));
        for j in [0, 7, 23] {
            assert_eq!(dec.neuron(j).unwrap(), linalg::scaled(d[j], x));
        }
    }

    #[test]
    fn final_layer_ff2_pairs_are_zero_except_last() {
        let (cfg, t, b) = setup(vec![1, 2, 3, 4, 5]);
        let dec =
            SpanningDecomposition::extract(&t, &b, cfg.n_layers - 1, MlpMatrix::Ff2).unwrap();
        for (i, (_, d)) in dec.pairs.iter().enumerate() {
            assert_eq!(d.iter().all(|&v| v == 0.0), i < 4, "token {i}");
        }
    }

    #[test]
    fn reconstruction_and_neurons_match_engine() {
        let (cfg, t, b) = setup(vec![3, 9, 3, 14]);
        for l in 0..cfg.n_layers {
            for which in [MlpMatrix::Ff1, MlpMatrix::Ff2] {
                let g = engine::grad_matrix(&t, &b, l, which).unwrap();
                let dec = SpanningDecomposition::extract(&t, &b, l, which).unwrap();
                let r = dec.reconstruct();
                assert!(rel_frob(&r, &g) <= 1e-10);
                assert!(linalg::numerical_rank(&r, None).unwrap() <= dec.len());
                for j in 0..dec.n_neurons() {
                    let n = dec.neuron(j).unwrap();
                    let slice = match which {
                        MlpMatrix::Ff1 => g.col(j),
                        MlpMatrix::Ff2 => g.row(j).to_vec(),
                    };
                    for (a, e) in n.iter().zip(&slice) {
                        assert!((a - e).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn both_assembly_orders_agree() {
        let (cfg, t, b) = setup(vec![0, 7, 7, 2, 19, 4]);
        for l in 0..cfg.n_layers {
            for which in [MlpMatrix::Ff1, MlpMatrix::Ff2] {
                let dec = SpanningDecomposition::extract(&t, &b, l, which).unwrap();
                let by_pairs = dec.reconstruct();
                let by_neurons = dec.assemble_from_neurons().unwrap();
                assert!(by_pairs.sub(&by_neurons).unwrap().max_abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn neurons_lie_in_the_spanning_set() {
        let (cfg, t, b) = setup(vec![6, 1, 8, 0, 3]);
        for l in 0..cfg.n_layers {
            for which in [MlpMatrix::Ff1, MlpMatrix::Ff2] {
                let dec = SpanningDecomposition::extract(&t, &b, l, which).unwrap();
                let span = dec.spanning_vectors();
                for j in 0..dec.n_neurons() {
                    let n = dec.neuron(j).unwrap();
                    let res = span_residual(&span, &n).unwrap();
                    assert!(res <= 1e-8 * l2_norm(&n), "layer {l} {which} neuron {j}");
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_give_zero_neuron() {
        let dec = SpanningDecomposition {
            layer: 0,
            which: MlpMatrix::Ff1,
            pairs: vec![(vec![1.0, 2.0], vec![0.0, 3.0]), (vec![4.0, 5.0], vec![0.0, 1.0])],
        };
        assert_eq!(dec.neuron(0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(dec.neuron(1).unwrap(), vec![7.0, 11.0]);
        assert!(dec.neuron(2).is_err());
    }

    #[test]
    fn predicted_rank_examples() {
        assert_eq!(predicted_rank(5, 0, 4), 5);
        assert_eq!(predicted_rank(5, 3, 4), 1);
        assert_eq!(predicted_rank(1, 0, 4), 1);
        assert_eq!(predicted_rank(1, 3, 4), 1);
    }

    #[test]
    fn residual_of_out_of_span_vector() {
        let a = [1.0, 0.0, 0.0];
        let b = [1.0, 1.0, 0.0];
        assert!(span_residual(&[&a, &b], &[3.0, -2.0, 0.0]).unwrap() < 1e-15);
        assert!((span_residual(&[&a, &b], &[0.0, 0.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(span_residual(&[], &[3.0, 4.0]).unwrap(), 5.0);
    }
}
