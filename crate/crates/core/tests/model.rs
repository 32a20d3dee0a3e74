mod common;

use common::{grammar, medium_checkpoint, reference_logits, tiny_checkpoint};
use gapscope::grammar::{Split, TemplateVariant};
use gapscope::model::{load_checkpoint, save_checkpoint, ModelError, Patch};
use proptest::prelude::*;

fn sample_tokens(seed: u64) -> Vec<u32> {
    let g = grammar();
    let pairs = g
        .generate_pairs(TemplateVariant::ALL[(seed % 4) as usize], 1, seed, Split::Train)
        .unwrap();
    if seed.is_multiple_of(2) {
        pairs[0].base_tokens.clone()
    } else {
        pairs[0].source_tokens.clone()
    }
}

fn max_abs_diff(a: &gapscope::tensor::Tensor, b: &[Vec<f64>]) -> f64 {
    let mut m = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (x, y) in a.row(i).iter().zip(row) {
            m = m.max((*x as f64 - y).abs());
        }
    }
    m
}

#[test]
fn forward_matches_f64_reference() {
    for ckpt in [tiny_checkpoint(), medium_checkpoint()] {
        for seed in 0..6 {
            let tokens = sample_tokens(seed);
            let logits = ckpt.forward(&tokens).unwrap();
            let oracle = reference_logits(ckpt, &tokens, None);
            let err = max_abs_diff(&logits, &oracle);
            assert!(err < 1e-4, "seed {seed}: max |Δlogit| = {err}");
        }
    }
}

#[test]
fn patched_forward_matches_f64_reference() {
    let ckpt = medium_checkpoint();
    let tokens = sample_tokens(3);
    let vector: Vec<f32> = (0..ckpt.config.d_model).map(|i| (i as f32 * 0.37).sin()).collect();
    for layer in 0..=ckpt.config.n_layers {
        let patch = Patch {
            layer,
            position: 2,
            vector: vector.clone(),
        };
        let got = ckpt.forward_patched(&tokens, &patch).unwrap();
        let want = reference_logits(ckpt, &tokens, Some((layer, 2, &vector)));
        assert!(max_abs_diff(&got, &want) < 1e-4, "layer {layer}");
    }
}

#[test]
fn training_reduces_loss() {
    let cfg = common::small_config(2, 16, 2);
    let g = grammar();
    let corpus = g
        .generate_corpus(&gapscope::grammar::CorpusSpec {
            total_tokens: 8_000,
            mix: Default::default(),
            seed: 2,
            topic_adverb_prob: 0.5,
        })
        .unwrap();
    let out = gapscope::model::train_lm(&cfg, &Default::default(), &corpus, g.bos(), &[8_000]).unwrap();
    let head: f32 = out.losses[..5].iter().sum::<f32>() / 5.0;
    let tail: f32 = out.losses[out.losses.len() - 5..].iter().sum::<f32>() / 5.0;
    assert!(tail < head - 1.0, "loss {head} -> {tail}");
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.gsck");
    let ckpt = tiny_checkpoint();
    save_checkpoint(ckpt, &path).unwrap();
    assert_eq!(&load_checkpoint(&path).unwrap(), ckpt);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Corrupt(_))));
}

#[test]
fn out_of_range_contracts() {
    let ckpt = tiny_checkpoint();
    let too_long = vec![1u32; ckpt.config.max_seq_len + 1];
    assert!(ckpt.forward(&too_long).is_err());
    assert!(ckpt.forward(&[ckpt.config.vocab_size as u32]).is_err());
    let (_, cache) = ckpt.forward_with_cache(&[1, 2, 3]).unwrap();
    let bad = Patch {
        layer: ckpt.config.n_layers + 1,
        position: 0,
        vector: vec![0.0; ckpt.config.d_model],
    };
    assert!(ckpt.resume_forward(&cache, &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Logits at position i never depend on tokens after i.
    #[test]
    fn causal_masking(seed in 0u64..500, cut in 1usize..5) {
        let ckpt = tiny_checkpoint();
        let tokens = sample_tokens(seed);
        let cut = cut.min(tokens.len() - 1);
        let mut other = tokens.clone();
        for t in other.iter_mut().skip(cut) {
            *t = (*t + 7) % ckpt.config.vocab_size as u32;
        }
        let a = ckpt.forward(&tokens).unwrap();
        let b = ckpt.forward(&other).unwrap();
        for i in 0..cut {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }

    /// Cached resume equals full recomputation under the same patch.
    #[test]
    fn resume_equals_full(seed in 0u64..500, layer in 0usize..3, pos_frac in 0.0f64..1.0, scale in -2.0f32..2.0) {
        let ckpt = tiny_checkpoint();
        let tokens = sample_tokens(seed);
        let position = ((tokens.len() as f64 * pos_frac) as usize).min(tokens.len() - 1);
        let (_, cache) = ckpt.forward_with_cache(&tokens).unwrap();
        let vector: Vec<f32> = cache.get(layer, position).iter().map(|v| v * scale + 0.1).collect();
        let patch = Patch { layer, position, vector };
        let resumed = ckpt.resume_forward(&cache, &patch).unwrap();
        let full = ckpt.forward_patched(&tokens, &patch).unwrap();
        for (x, y) in resumed.data().iter().zip(full.data()) {
            prop_assert!((x - y).abs() < 1e-4);
        }
        let last = ckpt.resume_final_logits(&cache, &patch).unwrap();
        prop_assert_eq!(last.as_slice(), resumed.row(tokens.len() - 1));
    }

    /// Writing back the cached vector reproduces the clean logits.
    #[test]
    fn identity_patch_is_noop(seed in 0u64..500, layer in 0usize..3, position in 0usize..4) {
        let ckpt = tiny_checkpoint();
        let tokens = sample_tokens(seed);
        let (clean, cache) = ckpt.forward_with_cache(&tokens).unwrap();
        let patch = Patch { layer, position, vector: cache.get(layer, position).to_vec() };
        prop_assert_eq!(ckpt.resume_forward(&cache, &patch).unwrap(), clean);
    }
}
