#![allow(dead_code)]

use std::sync::OnceLock;

use gapscope::grammar::{CorpusSpec, Grammar, Lexicon};
use gapscope::model::{train_lm, LmTrainConfig, ModelCheckpoint, ModelConfig};

pub fn grammar() -> &'static Grammar {
    static G: OnceLock<Grammar> = OnceLock::new();
    G.get_or_init(|| Grammar::new(Lexicon::default()).unwrap())
}

pub fn small_config(n_layers: usize, d_model: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads,
        vocab_size: grammar().vocab.len(),
        max_seq_len: 16,
        seed: 3,
    }
}

/// Checkpoints of a model trained briefly on the synthetic corpus.
pub fn train_small(cfg: ModelConfig, tokens: u64, schedule: &[u64]) -> Vec<ModelCheckpoint> {
    let g = grammar();
    let corpus = g
        .generate_corpus(&CorpusSpec {
            total_tokens: tokens,
            mix: Default::default(),
            seed: 11,
            topic_adverb_prob: 0.5,
        })
        .unwrap();
    train_lm(&cfg, &LmTrainConfig::default(), &corpus, g.bos(), schedule)
        .unwrap()
        .checkpoints
}

/// Two-layer, d = 8 model after 6k training tokens.
pub fn tiny_checkpoint() -> &'static ModelCheckpoint {
    static C: OnceLock<ModelCheckpoint> = OnceLock::new();
    C.get_or_init(|| train_small(small_config(2, 8, 2), 6_000, &[6_000]).pop().unwrap())
}

/// Four-layer, d = 32 model after 40k training tokens.
pub fn medium_checkpoint() -> &'static ModelCheckpoint {
    static C: OnceLock<ModelCheckpoint> = OnceLock::new();
    C.get_or_init(|| train_small(small_config(4, 32, 4), 40_000, &[40_000]).pop().unwrap())
}

// Plain f64 transformer used as an independent oracle for the tape forward.

fn to64(t: &gapscope::tensor::Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mu) * inv * g + b)
        .collect()
}

/// `x [d_in] · W [d_in × d_out] + b`
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    let mut y = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for j in 0..d_out {
            y[j] += xi * w[i * d_out + j];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Logits of every position, with residual `(layer, position)` optionally
/// overwritten by `patch`. Layer 0 is the embedding output.
pub fn reference_logits(ckpt: &ModelCheckpoint, tokens: &[u32], patch: Option<(usize, usize, &[f32])>) -> Vec<Vec<f64>> {
    let cfg = ckpt.config;
    let w = &ckpt.weights;
    let d = cfg.d_model;
    let wte = to64(&w.wte);
    let wpe = to64(&w.wpe);
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| (0..d).map(|j| wte[t as usize * d + j] + wpe[p * d + j]).collect())
        .collect();
    let apply = |xs: &mut Vec<Vec<f64>>, layer: usize| {
        if let Some((l, p, v)) = patch {
            if l == layer {
                xs[p] = v.iter().map(|&x| x as f64).collect();
            }
        }
    };
    apply(&mut xs, 0);
    let heads = cfg.n_heads;
    let hd = d / heads;
    for (li, b) in w.blocks.iter().enumerate() {
        let (g1, b1) = (to64(&b.ln1_g), to64(&b.ln1_b));
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| layer_norm(x, &g1, &b1)).collect();
        let q: Vec<Vec<f64>> = hs.iter().map(|h| affine(h, &to64(&b.w_q), &to64(&b.b_q))).collect();
        let k: Vec<Vec<f64>> = hs.iter().map(|h| affine(h, &to64(&b.w_k), &to64(&b.b_k))).collect();
        let v: Vec<Vec<f64>> = hs.iter().map(|h| affine(h, &to64(&b.w_v), &to64(&b.b_v))).collect();
        let n = xs.len();
        let mut att = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let r = h * hd..(h + 1) * hd;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in r.clone() {
                        att[i][c] += ej / z * v[j][c];
                    }
                }
            }
        }
        let (wo, bo) = (to64(&b.w_o), to64(&b.b_o));
        let (g2, b2) = (to64(&b.ln2_g), to64(&b.ln2_b));
        let (wfc, bfc) = (to64(&b.w_fc), to64(&b.b_fc));
        let (wp, bp) = (to64(&b.w_proj), to64(&b.b_proj));
        for i in 0..n {
            let o = affine(&att[i], &wo, &bo);
            for (x, o) in xs[i].iter_mut().zip(o) {
                *x += o;
            }
            let h2 = layer_norm(&xs[i], &g2, &b2);
            let f: Vec<f64> = affine(&h2, &wfc, &bfc).into_iter().map(gelu).collect();
            let f = affine(&f, &wp, &bp);
            for (x, f) in xs[i].iter_mut().zip(f) {
                *x += f;
            }
        }
        apply(&mut xs, li + 1);
    }
    let (gf, bf) = (to64(&w.ln_f_g), to64(&w.ln_f_b));
    xs.iter()
        .map(|x| {
            let h = layer_norm(x, &gf, &bf);
            (0..cfg.vocab_size)
                .map(|t| (0..d).map(|j| h[j] * wte[t * d + j]).sum())
                .collect()
        })
        .collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}
