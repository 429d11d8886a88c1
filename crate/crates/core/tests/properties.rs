use backlens_core::analysis::top_layer_vjp_decomposition;
use backlens_core::editing::{forward_pass_shift, sgd_edit};
use backlens_core::engine::{self, decoder_vjp};
use backlens_core::linalg::{numerical_rank, outer, softmax, svd, Matrix};
use backlens_core::model::Activation;
use backlens_core::oracle::grad_check_all;
use backlens_core::span::SpanningDecomposition;
use backlens_core::{MlpMatrix, ModelConfig, ModelWeights, Prompt};
use proptest::prelude::*;

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..=3,
        prop_oneof![Just(4usize), Just(8)],
        prop_oneof![Just(1usize), Just(2)],
        any::<bool>(),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(n_layers, d, n_heads, relu, ln, seed)| ModelConfig {
            n_layers,
            d,
            d_m: 2 * d,
            vocab_size: 11,
            n_heads,
            max_seq: 6,
            activation: if relu { Activation::Relu } else { Activation::Gelu },
            use_final_ln: ln,
            seed,
        })
}

fn prompt_for(max_seq: usize) -> impl Strategy<Value = Prompt> {
    (proptest::collection::vec(0usize..11, 1..=max_seq), 0usize..11)
        .prop_map(|(tokens, target)| Prompt::new(tokens, target))
}

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outer_product_rank(x in vector(6), d in vector(9)) {
        let r = numerical_rank(&outer(&x, &d), None).unwrap();
        let zero = x.iter().all(|&v| v == 0.0) || d.iter().all(|&v| v == 0.0);
        prop_assert_eq!(r, usize::from(!zero));
    }

    #[test]
    fn sum_of_n_outer_products_has_rank_at_most_n(
        pairs in proptest::collection::vec((vector(7), vector(12)), 1..6)
    ) {
        let mut m = Matrix::zeros(7, 12);
        for (x, d) in &pairs {
            m.add_outer(1.0, x, d);
        }
        prop_assert!(numerical_rank(&m, None).unwrap() <= pairs.len());
    }

    #[test]
    fn svd_reconstructs(rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
        let mut g = backlens_core::rng::Gaussian::new(seed, 1.0);
        let a = Matrix::from_vec(rows, cols, g.vector(rows * cols)).unwrap();
        let dec = svd(&a).unwrap();
        let err = dec.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        prop_assert!(err <= 1e-12);
    }

    #[test]
    fn decoder_vjp_sign_structure(logits in vector(9), t in 0usize..9) {
        let p = softmax(&logits);
        let d = decoder_vjp(&p, t).unwrap();
        prop_assert!(d[t] < 0.0);
        prop_assert!((d[t] - (p[t] - 1.0)).abs() == 0.0);
        for (k, &v) in d.iter().enumerate() {
            if k != t {
                prop_assert!(v >= 0.0);
            }
        }
        prop_assert!(d.iter().sum::<f64>().abs() <= 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences(cfg in small_config(), p in prompt_for(6)) {
        let w = ModelWeights::init_random(&cfg).unwrap();
        if cfg.activation == Activation::Relu {
            // Central differences straddling the kink are not derivatives.
            let t = engine::forward(&w, &cfg, &p).unwrap();
            let clear = t.layers.iter().flat_map(|l| l.preact.iter().flatten()).all(|z| z.abs() > 1e-5);
            prop_assume!(clear);
        }
        let coarse = grad_check_all(&w, &cfg, &p, 1e-5).unwrap().max_rel_error();
        if coarse > 1e-6 {
            // A sharply curved ln_f at d=4 can put the O(h²) truncation term
            // above the threshold. Quartering h must then cut it ~16x.
            let fine = grad_check_all(&w, &cfg, &p, 2.5e-6).unwrap().max_rel_error();
            prop_assert!(fine <= 1e-6 && fine <= coarse / 10.0, "max rel {} then {}", coarse, fine);
        }
    }

    #[test]
    fn final_layer_zero_vjp_law(cfg in small_config(), p in prompt_for(6)) {
        let w = ModelWeights::init_random(&cfg).unwrap();
        let t = engine::forward(&w, &cfg, &p).unwrap();
        let b = engine::backward(&w, &cfg, &t).unwrap();
        let last = cfg.n_layers - 1;
        for i in 0..p.len() - 1 {
            prop_assert!(b.layers[last].delta_ff2[i].iter().all(|&v| v == 0.0));
            prop_assert!(b.layers[last].delta_ff1[i].iter().all(|&v| v == 0.0));
        }
        for which in [MlpMatrix::Ff1, MlpMatrix::Ff2] {
            let g = engine::grad_matrix(&t, &b, last, which).unwrap();
            prop_assert!(numerical_rank(&g, None).unwrap() <= 1);
        }
    }

    #[test]
    fn spanning_reconstruction(cfg in small_config(), p in prompt_for(6)) {
        let w = ModelWeights::init_random(&cfg).unwrap();
        let t = engine::forward(&w, &cfg, &p).unwrap();
        let b = engine::backward(&w, &cfg, &t).unwrap();
        for l in 0..cfg.n_layers {
            for which in [MlpMatrix::Ff1, MlpMatrix::Ff2] {
                let g = engine::grad_matrix(&t, &b, l, which).unwrap();
                let dec = SpanningDecomposition::extract(&t, &b, l, which).unwrap();
                let r = dec.reconstruct();
                let norm = g.frobenius_norm();
                if norm > 0.0 {
                    prop_assert!(r.sub(&g).unwrap().frobenius_norm() / norm <= 1e-10);
                }
                prop_assert!(numerical_rank(&r, None).unwrap() <= p.len());
            }
        }
    }

    #[test]
    fn top_layer_decomposition_identity(cfg in small_config(), p in prompt_for(6)) {
        let w = ModelWeights::init_random(&cfg).unwrap();
        let t = engine::forward(&w, &cfg, &p).unwrap();
        let b = engine::backward(&w, &cfg, &t).unwrap();
        let dec = top_layer_vjp_decomposition(&t, &b, &w).unwrap();
        prop_assert!(dec.residual <= 1e-12);
        prop_assert!(dec.signs_hold());
    }

    #[test]
    fn shift_only_touches_one_matrix(cfg in small_config(), p in prompt_for(6), eta in 1.0f64..1e4) {
        let w = ModelWeights::init_random(&cfg).unwrap();
        let layer = cfg.n_layers / 2;
        let o = forward_pass_shift(&w, &cfg, &p, layer, eta).unwrap();
        let changed = backlens_core::editing::changed_params(&cfg, &w, &o.weights);
        prop_assert!(changed.len() <= 1);
        if let Some(&id) = changed.first() {
            prop_assert_eq!(id, backlens_core::ParamId::Mlp(layer, MlpMatrix::Ff2));
        }
    }

    #[test]
    fn tiny_sgd_steps_lower_the_loss(cfg in small_config(), p in prompt_for(6)) {
        let w = ModelWeights::init_random(&cfg).unwrap();
        let o = sgd_edit(&w, &cfg, &p, -1e-4, None, false).unwrap();
        prop_assert!(o.post_loss < o.pre_loss);
    }
}
