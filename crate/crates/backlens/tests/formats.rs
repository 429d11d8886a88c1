use std::path::Path;

use backlens::{checkpoint, corpus_io};
use backlens_core::model::Activation;
use backlens_core::{ModelConfig, ModelWeights, ParamId, Vocab};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..=4,
        prop_oneof![Just(4usize), Just(8), Just(12)],
        1usize..=3,
        2usize..=40,
        1usize..=9,
        any::<bool>(),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(n_layers, d, heads, vocab_size, max_seq, relu, ln, seed)| ModelConfig {
            n_layers,
            d,
            d_m: heads * d,
            vocab_size,
            // 1, 2 or 4 heads; all divide d.
            n_heads: 1 << (heads - 1),
            max_seq,
            activation: if relu { Activation::Relu } else { Activation::Gelu },
            use_final_ln: ln,
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(cfg in config()) {
        let w = ModelWeights::init_random(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint::save(&w, &cfg, &path).unwrap();
        let (c2, w2) = checkpoint::load(&path).unwrap();
        prop_assert_eq!(&c2, &cfg);
        for id in ParamId::all(&cfg) {
            let a = w.param(id).unwrap().data();
            let b = w2.param(id).unwrap().data();
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", id);
        }
        prop_assert_eq!(w2.ln_f.is_some(), cfg.use_final_ln);
    }

    #[test]
    fn truncated_checkpoints_never_load(cfg in config(), cut in 1usize..64) {
        let w = ModelWeights::init_random(&cfg).unwrap();
        let bytes = checkpoint::to_bytes(&w, &cfg).unwrap();
        let short = &bytes[..bytes.len() - cut.min(bytes.len())];
        prop_assert!(checkpoint::from_bytes(short, Path::new("m")).is_err());
    }

    #[test]
    fn toy_vocab_tokenization_round_trips(ids in proptest::collection::vec(0usize..80, 0..20)) {
        let v = Vocab::toy(80);
        let text = v.detokenize(&ids).unwrap();
        let back = v.tokenize(&text).unwrap();
        prop_assert_eq!(v.detokenize(&back).unwrap(), text);
    }
}

#[test]
fn fixture_corpus_strings_round_trip() {
    let cfg = ModelConfig::default();
    let v = Vocab::toy(cfg.vocab_size);
    let c = corpus_io::read_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus.jsonl")).unwrap();
    for e in &c.entries {
        let text = v.detokenize(&e.prompt.tokens).unwrap();
        assert_eq!(v.detokenize(&v.tokenize(&text).unwrap()).unwrap(), text);
    }
}
