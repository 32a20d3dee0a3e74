//! GPT-2-style pre-norm decoder with a residual-stream cache.
//!
//! Residual index `0` is the embedding output and index `ℓ` (1..=n_layers) is
//! the output of block `ℓ`. Interventions replace one row of one of these
//! residual matrices and recompute everything downstream.

mod checkpoint;
mod forward;
mod train;

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub(crate) use forward::Bound;
pub use forward::{Patch, ResidualCache};
pub use train::{train_lm, LmTrainConfig, TrainOutcome};

pub const LN_EPS: f32 = 1e-5;
pub const MAX_LAYERS: usize = 12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config hash {stored:#018x} does not match its config ({computed:#018x})")]
    ConfigHashMismatch { stored: u64, computed: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default toy scale for a given vocabulary.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            vocab_size,
            max_seq_len: 16,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_layers > MAX_LAYERS {
            return Err(ModelError::Config(format!(
                "n_layers must be in 1..={MAX_LAYERS}, got {}",
                self.n_layers
            )));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(ModelError::Config(
                "vocab_size and max_seq_len must be positive".into(),
            ));
        }
        Ok(())
    }

    /// FNV-1a over the little-endian fields.
    pub fn hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        for v in [
            self.n_layers as u64,
            self.d_model as u64,
            self.n_heads as u64,
            self.vocab_size as u64,
            self.max_seq_len as u64,
            self.seed,
        ] {
            h.write(&v.to_le_bytes());
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln_1.g",
    "ln_1.b",
    "attn.w_q",
    "attn.b_q",
    "attn.w_k",
    "attn.b_k",
    "attn.w_v",
    "attn.b_v",
    "attn.w_o",
    "attn.b_o",
    "ln_2.g",
    "ln_2.b",
    "mlp.w_fc",
    "mlp.b_fc",
    "mlp.w_proj",
    "mlp.b_proj",
];

impl BlockWeights {
    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }

    fn from_fields(mut f: Vec<Tensor>) -> Self {
        let mut next = || f.remove(0);
        Self {
            ln1_g: next(),
            ln1_b: next(),
            w_q: next(),
            b_q: next(),
            w_k: next(),
            b_k: next(),
            w_v: next(),
            b_v: next(),
            w_o: next(),
            b_o: next(),
            ln2_g: next(),
            ln2_b: next(),
            w_fc: next(),
            b_fc: next(),
            w_proj: next(),
            b_proj: next(),
        }
    }
}

/// All parameters. The unembedding is tied to `wte`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub wte: Tensor,
    pub wpe: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
}

impl Weights {
    /// Name and expected shape of every parameter, in serialization order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_model;
        let mut out = vec![
            ("wte".to_string(), vec![cfg.vocab_size, d]),
            ("wpe".to_string(), vec![cfg.max_seq_len, d]),
        ];
        for l in 0..cfg.n_layers {
            let shapes: [Vec<usize>; 16] = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, 4 * d],
                vec![4 * d],
                vec![4 * d, d],
                vec![d],
            ];
            for (name, shape) in BLOCK_FIELDS.iter().zip(shapes) {
                out.push((format!("h.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.g".to_string(), vec![d]));
        out.push(("ln_f.b".to_string(), vec![d]));
        out
    }

    /// GPT-2 initialisation: N(0, 0.02) matrices, residual projections scaled
    /// by `1/sqrt(2·n_layers)`, unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let resid_std = 0.02 / ((2 * cfg.n_layers) as f32).sqrt();
        let mut tensors = Vec::new();
        for (name, shape) in Self::expected_shapes(cfg) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".g") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let std = if name.ends_with("w_o") || name.ends_with("w_proj") {
                    resid_std
                } else if name == "wpe" {
                    0.01
                } else {
                    0.02
                };
                let dist = Normal::new(0.0f32, std).expect("valid std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Self::from_named(cfg, tensors)
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("wte".to_string(), &self.wte),
            ("wpe".to_string(), &self.wpe),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("h.{l}.{name}"), t));
            }
        }
        out.push(("ln_f.g".to_string(), &self.ln_f_g));
        out.push(("ln_f.b".to_string(), &self.ln_f_b));
        out
    }

    /// Mutable parameters in the same order as [`Weights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.ln_f_g);
        out.push(&mut self.ln_f_b);
        out
    }

    /// Assembles weights from `(name, tensor)` pairs, checking that every
    /// parameter is present once with its expected shape.
    pub fn from_named(cfg: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = Self::expected_shapes(cfg);
        if tensors.len() != expected.len() {
            return Err(ModelError::Corrupt(format!(
                "expected {} weight tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut ordered = Vec::with_capacity(expected.len());
        for ((name, shape), (got_name, t)) in expected.iter().zip(tensors) {
            if *name != got_name || t.shape() != shape.as_slice() {
                return Err(ModelError::Corrupt(format!(
                    "weight {got_name:?} {:?} does not match expected {name:?} {shape:?}",
                    t.shape()
                )));
            }
            ordered.push(t);
        }
        let mut it = ordered.into_iter();
        let wte = it.next().unwrap();
        let wpe = it.next().unwrap();
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(BlockWeights::from_fields(it.by_ref().take(16).collect()));
        }
        let ln_f_g = it.next().unwrap();
        let ln_f_b = it.next().unwrap();
        Ok(Self {
            wte,
            wpe,
            blocks,
            ln_f_g,
            ln_f_b,
        })
    }
}

/// Frozen weights plus training provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub weights: Weights,
    pub tokens_seen: u64,
    pub schedule_index: u32,
    pub config_hash: u64,
}

impl ModelCheckpoint {
    pub fn new(
        config: ModelConfig,
        weights: Weights,
        tokens_seen: u64,
        schedule_index: u32,
    ) -> Self {
        Self {
            config,
            weights,
            tokens_seen,
            schedule_index,
            config_hash: config.hash(),
        }
    }

    /// Freshly initialised, untrained model.
    pub fn init(config: ModelConfig) -> Result<Self> {
        Ok(Self::new(config, Weights::init(&config)?, 0, 0))
    }

    /// Stable identifier used in result records.
    pub fn id(&self) -> String {
        format!("ckpt{:02}", self.schedule_index)
    }
}
