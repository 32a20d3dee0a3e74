//! One-dimensional distributed alignment search.
//!
//! A unit direction `a` swaps the component of a base residual along `a` for
//! the source residual's component, `h̃ = h_b + a aᵀ (h_s − h_b)`, and is
//! trained so the patched base sentence predicts the source label.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::atomic_write;
use crate::grammar::{MinimalPair, TemplateVariant, SLOT_COUNT};
use crate::model::{Bound, ModelCheckpoint, ModelError, Patch, ResidualCache};
use crate::tensor::{Adam, Tape, Tensor, TensorError, Var};

/// Tolerance on `‖a‖₂ = 1`.
pub const NORM_TOL: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum DasError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("direction file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DasError>;

/// Residual layer (0 = embeddings) and template slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InterventionSite {
    pub layer: usize,
    pub slot: usize,
}

impl InterventionSite {
    pub fn new(layer: usize, slot: usize) -> Self {
        Self { layer, slot }
    }

    /// Every site of a model with `n_layers` blocks, layer-major.
    pub fn grid(n_layers: usize) -> Vec<Self> {
        (0..=n_layers)
            .flat_map(|layer| (0..SLOT_COUNT).map(move |slot| Self { layer, slot }))
            .collect()
    }

    pub fn check(&self, ckpt: &ModelCheckpoint) -> Result<()> {
        if self.layer > ckpt.config.n_layers || self.slot >= SLOT_COUNT {
            return Err(DasError::Contract(format!(
                "site (layer {}, slot {}) outside the {}×{SLOT_COUNT} grid",
                self.layer,
                self.slot,
                ckpt.config.n_layers + 1
            )));
        }
        Ok(())
    }
}

/// Which positions contribute to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Cross-entropy of the source label at the final position only.
    #[default]
    FinalPosition,
    /// Additionally scores the base sentence's own next tokens at every
    /// recomputed position before the final one.
    TailPositions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DasTrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f32,
    pub seed: u64,
    #[serde(default)]
    pub readout: Readout,
}

impl Default for DasTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 25,
            steps: 80,
            learning_rate: 5e-3,
            seed: 0,
            readout: Readout::FinalPosition,
        }
    }
}

impl DasTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(DasError::Contract(
                "batch_size, steps and learning_rate must all be positive".into(),
            ));
        }
        Ok(())
    }

    /// Training examples consumed.
    pub fn samples(&self) -> usize {
        self.batch_size * self.steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub checkpoint: String,
    pub variant: TemplateVariant,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub readout: Readout,
    /// Loss of the first batch under the initial direction.
    pub initial_loss: f32,
    /// Loss of the same batch under the trained direction.
    pub final_loss: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DasDirection {
    pub a: Vec<f32>,
    pub site: InterventionSite,
    pub meta: TrainMeta,
}

/// `h_base + a·⟨a, h_source − h_base⟩`.
pub fn intervene(h_base: &[f32], h_source: &[f32], a: &[f32]) -> Result<Vec<f32>> {
    if h_base.len() != h_source.len() || h_base.len() != a.len() {
        return Err(DasError::Contract(format!(
            "dimension mismatch: h_base {}, h_source {}, a {}",
            h_base.len(),
            h_source.len(),
            a.len()
        )));
    }
    check_unit(a)?;
    let proj: f32 = a
        .iter()
        .zip(h_source.iter().zip(h_base))
        .map(|(ai, (s, b))| ai * (s - b))
        .sum();
    Ok(h_base.iter().zip(a).map(|(b, ai)| b + ai * proj).collect())
}

fn check_unit(a: &[f32]) -> Result<()> {
    let norm = l2(a);
    if (norm - 1.0).abs() > NORM_TOL {
        return Err(DasError::Contract(format!(
            "direction has norm {norm}, expected 1"
        )));
    }
    Ok(())
}

fn l2(a: &[f32]) -> f32 {
    a.iter().map(|x| x * x).sum::<f32>().sqrt()
}

fn normalize(a: &mut [f32]) {
    let n = l2(a);
    a.iter_mut().for_each(|x| *x /= n);
}

/// Random unit vector.
pub fn random_direction(dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut a);
    a
}

/// Base and source residual caches of a pair pool, computed once per
/// checkpoint and shared by every site trained or evaluated on it.
#[derive(Debug, Clone)]
pub struct PairCache {
    pairs: Vec<MinimalPair>,
    base: Vec<ResidualCache>,
    source: Vec<ResidualCache>,
    clean_final: Vec<Vec<f32>>,
}

impl PairCache {
    pub fn build(ckpt: &ModelCheckpoint, pairs: &[MinimalPair]) -> Result<Self> {
        let computed: Vec<_> = pairs
            .par_iter()
            .map(|p| -> Result<_> {
                let (logits, base) = ckpt.forward_with_cache(&p.base_tokens)?;
                let (_, source) = ckpt.forward_with_cache(&p.source_tokens)?;
                let clean = logits.row(logits.rows() - 1).to_vec();
                Ok((base, source, clean))
            })
            .collect::<Result<_>>()?;
        let mut base = Vec::with_capacity(pairs.len());
        let mut source = Vec::with_capacity(pairs.len());
        let mut clean_final = Vec::with_capacity(pairs.len());
        for (b, s, c) in computed {
            base.push(b);
            source.push(s);
            clean_final.push(c);
        }
        Ok(Self {
            pairs: pairs.to_vec(),
            base,
            source,
            clean_final,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[MinimalPair] {
        &self.pairs
    }

    /// Clean final-position logits of pair `i`'s base sentence.
    pub fn clean_final(&self, i: usize) -> &[f32] {
        &self.clean_final[i]
    }

    fn site_vectors(&self, i: usize, site: InterventionSite) -> (usize, &[f32], &[f32]) {
        let p = &self.pairs[i];
        let pb = p.base_slots[site.slot];
        let ps = p.source_slots[site.slot];
        (
            pb,
            self.base[i].get(site.layer, pb),
            self.source[i].get(site.layer, ps),
        )
    }

    /// Final-position logits of pair `i`'s base sentence under direction `a`.
    pub fn intervened_final(
        &self,
        ckpt: &ModelCheckpoint,
        i: usize,
        site: InterventionSite,
        a: &[f32],
    ) -> Result<Vec<f32>> {
        let (pb, hb, hs) = self.site_vectors(i, site);
        let patch = Patch {
            layer: site.layer,
            position: pb,
            vector: intervene(hb, hs, a)?,
        };
        Ok(ckpt.resume_final_logits(&self.base[i], &patch)?)
    }
}

/// Pairs of `batch` sharing a patch position and base length, so they can be
/// resumed together.
fn shape_groups(cache: &PairCache, batch: &[usize], site: InterventionSite) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for &i in batch {
        let p = &cache.pairs[i];
        groups
            .entry((p.base_slots[site.slot], p.base_tokens.len()))
            .or_default()
            .push(i);
    }
    groups.into_values().collect()
}

/// Resumes the pairs `idx` (same patch position and length) from their
/// intervened residuals and returns the stacked final residual tails along
/// with the tail length.
fn batched_tail(
    tape: &mut Tape<'_>,
    bound: &Bound,
    cache: &PairCache,
    idx: &[usize],
    site: InterventionSite,
    a: Var,
) -> Result<(Var, usize)> {
    let d = tape.value(a).numel();
    let mut hb = Vec::with_capacity(idx.len() * d);
    let mut diff = Vec::with_capacity(idx.len() * d);
    let mut pos = 0;
    for &i in idx {
        let (pb, b, s) = cache.site_vectors(i, site);
        pos = pb;
        hb.extend_from_slice(b);
        diff.extend(s.iter().zip(b).map(|(s, b)| s - b));
    }
    let hb = tape.constant(Tensor::new(vec![idx.len(), d], hb)?);
    let diff = tape.constant(Tensor::new(vec![idx.len(), d], diff)?);
    // h̃ = h_b + (Δ·aᵀ)·a, one row per pair.
    let proj = tape.matmul_t(diff, a)?;
    let delta = tape.matmul(proj, a)?;
    let patched = tape.add(hb, delta)?;
    let caches: Vec<&ResidualCache> = idx.iter().map(|&i| &cache.base[i]).collect();
    let tail = bound.run_tail_batched(tape, &caches, site.layer, pos, patched)?;
    Ok((tail, caches[0].seq_len() - pos))
}

/// Summed (not averaged) loss of the pairs in `idx`.
fn group_loss(
    tape: &mut Tape<'_>,
    bound: &Bound,
    cache: &PairCache,
    idx: &[usize],
    site: InterventionSite,
    a: Var,
    readout: Readout,
) -> Result<Var> {
    let (tail, t) = batched_tail(tape, bound, cache, idx, site, a)?;
    let (logits, targets, per_pair) = match readout {
        Readout::FinalPosition => {
            let last: Vec<usize> = (0..idx.len()).map(|g| g * t + t - 1).collect();
            let rows = tape.gather_rows(tail, &last)?;
            let targets = idx.iter().map(|&i| cache.pairs[i].source_label as usize).collect();
            (bound.unembed(tape, rows)?, targets, 1)
        }
        Readout::TailPositions => {
            let mut targets = Vec::with_capacity(idx.len() * t);
            for &i in idx {
                let p = &cache.pairs[i];
                let start = p.base_tokens.len() - t;
                targets.extend(p.base_tokens[start + 1..].iter().map(|&x| x as usize));
                targets.push(p.source_label as usize);
            }
            (bound.unembed(tape, tail)?, targets, t)
        }
    };
    let mean = tape.cross_entropy_rows(logits, &targets)?;
    // Per-pair mean over its rows, summed over pairs.
    Ok(tape.scale(mean, (targets.len() / per_pair) as f32)?)
}

fn batch_loss(
    tape: &mut Tape<'_>,
    bound: &Bound,
    cache: &PairCache,
    batch: &[usize],
    site: InterventionSite,
    a: Var,
    readout: Readout,
) -> Result<Var> {
    let mut total = None;
    for idx in shape_groups(cache, batch, site) {
        let l = group_loss(tape, bound, cache, &idx, site, a, readout)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| DasError::Contract("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / batch.len() as f32)?)
}

/// Mean loss over the pairs `batch` and its gradient with respect to `a`.
/// `a` is used as given; no normalization is applied.
pub fn loss_and_grad(
    ckpt: &ModelCheckpoint,
    cache: &PairCache,
    batch: &[usize],
    site: InterventionSite,
    a: &[f32],
    readout: Readout,
) -> Result<(f32, Vec<f32>)> {
    site.check(ckpt)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, ckpt.config, &ckpt.weights, false);
    let av = tape.leaf(Tensor::row_vector(a.to_vec()), true);
    let loss = batch_loss(&mut tape, &bound, cache, batch, site, av, readout)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let g = grads
        .get(av)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; a.len()]);
    Ok((value, g))
}

/// Mean loss over every pair in the cache, without gradients.
pub fn mean_loss(
    ckpt: &ModelCheckpoint,
    cache: &PairCache,
    site: InterventionSite,
    a: &[f32],
    readout: Readout,
) -> Result<f32> {
    site.check(ckpt)?;
    let all: Vec<usize> = (0..cache.len()).collect();
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, ckpt.config, &ckpt.weights, false);
    let av = tape.constant(Tensor::row_vector(a.to_vec()));
    let loss = batch_loss(&mut tape, &bound, cache, &all, site, av, readout)?;
    Ok(tape.value(loss).item())
}

/// Final-position logits of every cached base sentence with the site
/// intervened along `a`, one row per pair in cache order.
pub fn intervened_final_logits(
    ckpt: &ModelCheckpoint,
    cache: &PairCache,
    site: InterventionSite,
    a: &[f32],
) -> Result<Vec<Vec<f32>>> {
    site.check(ckpt)?;
    check_unit(a)?;
    if a.len() != ckpt.config.d_model {
        return Err(DasError::Contract(format!(
            "direction has dimension {}, model has {}",
            a.len(),
            ckpt.config.d_model
        )));
    }
    let all: Vec<usize> = (0..cache.len()).collect();
    let mut out = vec![Vec::new(); cache.len()];
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, ckpt.config, &ckpt.weights, false);
    let av = tape.constant(Tensor::row_vector(a.to_vec()));
    for idx in shape_groups(cache, &all, site) {
        let (tail, t) = batched_tail(&mut tape, &bound, cache, &idx, site, av)?;
        let last: Vec<usize> = (0..idx.len()).map(|g| g * t + t - 1).collect();
        let rows = tape.gather_rows(tail, &last)?;
        let logits = bound.unembed(&mut tape, rows)?;
        for (r, &i) in idx.iter().enumerate() {
            out[i] = tape.value(logits).row(r).to_vec();
        }
    }
    Ok(out)
}

fn site_seed(seed: u64, site: InterventionSite) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&seed.to_le_bytes());
    h.write(&(site.layer as u64).to_le_bytes());
    h.write(&(site.slot as u64).to_le_bytes());
    h.finish()
}

fn check_pool(cache: &PairCache, cfg: &DasTrainConfig) -> Result<TemplateVariant> {
    let first = cache
        .pairs
        .first()
        .ok_or_else(|| DasError::Contract("empty pair list".into()))?;
    if cache.pairs.iter().any(|p| p.variant != first.variant) {
        return Err(DasError::Contract(
            "training pairs must come from a single variant".into(),
        ));
    }
    if cache.len() < cfg.batch_size {
        return Err(DasError::Contract(format!(
            "{} pairs is fewer than batch_size {}",
            cache.len(),
            cfg.batch_size
        )));
    }
    Ok(first.variant)
}

pub fn train_direction(
    ckpt: &ModelCheckpoint,
    pairs: &[MinimalPair],
    site: InterventionSite,
    cfg: &DasTrainConfig,
) -> Result<DasDirection> {
    site.check(ckpt)?;
    cfg.validate()?;
    let cache = PairCache::build(ckpt, pairs)?;
    train_direction_cached(ckpt, &cache, site, cfg)
}

/// [`train_direction`] over precomputed caches.
pub fn train_direction_cached(
    ckpt: &ModelCheckpoint,
    cache: &PairCache,
    site: InterventionSite,
    cfg: &DasTrainConfig,
) -> Result<DasDirection> {
    site.check(ckpt)?;
    cfg.validate()?;
    let variant = check_pool(cache, cfg)?;
    let seed = site_seed(cfg.seed, site);
    let mut a = random_direction(ckpt.config.d_model, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ 0x5eed);
    let mut order: Vec<usize> = (0..cache.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Adam::new(cfg.learning_rate, &[a.len()]);
    let mut first_batch = Vec::new();
    let mut initial_loss = 0.0;
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let (loss, grad) = loss_and_grad(ckpt, cache, batch, site, &a, cfg.readout)?;
        if step == 0 {
            initial_loss = loss;
            first_batch = batch.to_vec();
        }
        opt.step(&mut [a.as_mut_slice()], &[Some(grad.as_slice())]);
        normalize(&mut a);
    }
    let (final_loss, _) = loss_and_grad(ckpt, cache, &first_batch, site, &a, cfg.readout)?;
    Ok(DasDirection {
        a,
        site,
        meta: TrainMeta {
            checkpoint: ckpt.id(),
            variant,
            seed: cfg.seed,
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            readout: cfg.readout,
            initial_loss,
            final_loss,
        },
    })
}

/// Clean and intervened logits `[seq × vocab]` of the pair's base sentence.
pub fn apply_direction(
    ckpt: &ModelCheckpoint,
    pair: &MinimalPair,
    dir: &DasDirection,
) -> Result<(Tensor, Tensor)> {
    dir.site.check(ckpt)?;
    if dir.a.len() != ckpt.config.d_model {
        return Err(DasError::Contract(format!(
            "direction has dimension {}, model has {}",
            dir.a.len(),
            ckpt.config.d_model
        )));
    }
    let pb = pair.base_slots[dir.site.slot];
    let ps = pair.source_slots[dir.site.slot];
    let (clean, base) = ckpt.forward_with_cache(&pair.base_tokens)?;
    let (_, source) = ckpt.forward_with_cache(&pair.source_tokens)?;
    let patch = Patch {
        layer: dir.site.layer,
        position: pb,
        vector: intervene(
            base.get(dir.site.layer, pb),
            source.get(dir.site.layer, ps),
            &dir.a,
        )?,
    };
    let intervened = ckpt.resume_forward(&base, &patch)?;
    Ok((clean, intervened))
}

#[derive(Serialize, Deserialize)]
struct DirectionFile {
    site: InterventionSite,
    meta: TrainMeta,
    dim: usize,
    /// Little-endian f32 payload, base64-encoded.
    a: String,
}

impl DasDirection {
    pub fn to_json(&self) -> String {
        let bytes: Vec<u8> = self.a.iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = DirectionFile {
            site: self.site,
            meta: self.meta.clone(),
            dim: self.a.len(),
            a: B64.encode(bytes),
        };
        serde_json::to_string_pretty(&file).expect("direction serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DirectionFile =
            serde_json::from_str(text).map_err(|e| DasError::Format(e.to_string()))?;
        let bytes = B64
            .decode(file.a.as_bytes())
            .map_err(|e| DasError::Format(e.to_string()))?;
        if bytes.len() != file.dim * 4 {
            return Err(DasError::Format(format!(
                "payload has {} bytes, expected {}",
                bytes.len(),
                file.dim * 4
            )));
        }
        let a: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        check_unit(&a)?;
        Ok(Self {
            a,
            site: file.site,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
