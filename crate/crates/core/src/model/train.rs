use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::grammar::split_at_bos;
use crate::tensor::{Adam, Tape};

use super::forward::Bound;
use super::{ModelCheckpoint, ModelConfig, ModelError, Result, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub learning_rate: f32,
    /// Sentences per optimizer step.
    pub batch_size: usize,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<ModelCheckpoint>,
    /// Mean next-token cross-entropy of every optimizer step.
    pub losses: Vec<f32>,
}

/// Trains a fresh model on `corpus` (sentences delimited by `bos`), cycling
/// over it as needed, and snapshots the weights the first time the running
/// token count reaches each `schedule` entry.
pub fn train_lm(
    config: &ModelConfig,
    train: &LmTrainConfig,
    corpus: &[u32],
    bos: u32,
    schedule: &[u64],
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::Config("empty training corpus".into()));
    }
    if schedule.is_empty() || schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelError::Config(format!(
            "checkpoint schedule must be non-empty and strictly increasing, got {schedule:?}"
        )));
    }
    if train.batch_size == 0 || train.learning_rate.is_nan() || train.learning_rate <= 0.0 {
        return Err(ModelError::Config(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    let sentences: Vec<&[u32]> = split_at_bos(corpus, bos)
        .into_iter()
        .map(|s| &s[..s.len().min(config.max_seq_len)])
        .filter(|s| s.len() >= 2)
        .collect();
    if sentences.is_empty() {
        return Err(ModelError::Config(
            "corpus has no sentence of two or more tokens".into(),
        ));
    }

    let template = ModelCheckpoint::init(*config)?;
    template.check_tokens(sentences[0])?;
    let mut weights = template.weights;
    let sizes: Vec<usize> = weights.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(train.learning_rate, &sizes);

    let mut checkpoints = Vec::with_capacity(schedule.len());
    let mut losses = Vec::new();
    let mut tokens_seen = 0u64;
    let mut cursor = 0usize;
    while checkpoints.len() < schedule.len() {
        let batch: Vec<&[u32]> = (0..train.batch_size)
            .map(|i| sentences[(cursor + i) % sentences.len()])
            .collect();
        cursor = (cursor + train.batch_size) % sentences.len();

        let (loss, grads) = step_gradients(config, &weights, &batch)?;
        losses.push(loss);
        let mut params: Vec<&mut [f32]> = weights
            .tensors_mut()
            .into_iter()
            .map(|t| t.data_mut())
            .collect();
        let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
        opt.step(&mut params, &grad_refs);

        tokens_seen += batch.iter().map(|s| s.len() as u64).sum::<u64>();
        while checkpoints.len() < schedule.len() && tokens_seen >= schedule[checkpoints.len()] {
            let idx = checkpoints.len() as u32;
            checkpoints.push(ModelCheckpoint::new(
                *config,
                weights.clone(),
                tokens_seen,
                idx,
            ));
        }
    }
    Ok(TrainOutcome {
        checkpoints,
        losses,
    })
}

/// Mean loss over the batch and one gradient buffer per parameter.
fn step_gradients(
    config: &ModelConfig,
    weights: &Weights,
    batch: &[&[u32]],
) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, *config, weights, true);
    // Sentences of equal length run as one stacked forward pass.
    let mut by_len: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for sent in batch {
        by_len
            .entry(sent.len())
            .or_default()
            .push(sent.iter().map(|&t| t as usize).collect());
    }
    let mut total = None;
    for group in by_len.values() {
        let inputs: Vec<&[usize]> = group.iter().map(|s| &s[..s.len() - 1]).collect();
        let targets: Vec<usize> = group.iter().flat_map(|s| s[1..].iter().copied()).collect();
        let logits = bound.forward_groups(&mut tape, &inputs)?;
        let ce = tape.cross_entropy_rows(logits, &targets)?;
        let ce = tape.scale(ce, group.len() as f32)?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    let total = total.expect("non-empty batch");
    let loss = tape.scale(total, 1.0 / batch.len() as f32)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = bound
        .all()
        .into_iter()
        .map(|v| {
            grads
                .get(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();
    Ok((value, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 10,
            max_seq_len: 8,
            seed: 1,
        }
    }

    #[test]
    fn schedule_contract() {
        let corpus: Vec<u32> = [0, 3, 4, 5, 1].repeat(50);
        let out = train_lm(&cfg(), &LmTrainConfig::default(), &corpus, 0, &[40, 80]).unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        assert!(out.checkpoints[0].tokens_seen >= 40);
        assert!(out.checkpoints[1].tokens_seen >= 80);
        assert_eq!(out.checkpoints[1].schedule_index, 1);
    }

    #[test]
    fn errors() {
        let t = LmTrainConfig::default();
        assert!(matches!(
            train_lm(&cfg(), &t, &[], 0, &[10]),
            Err(ModelError::Config(_))
        ));
        assert!(matches!(
            train_lm(&cfg(), &t, &[0, 1, 2], 0, &[10, 10]),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn deterministic() {
        let corpus: Vec<u32> = [0, 3, 4, 5, 1, 0, 2, 6, 1].repeat(10);
        let a = train_lm(&cfg(), &LmTrainConfig::default(), &corpus, 0, &[30, 60]).unwrap();
        let b = train_lm(&cfg(), &LmTrainConfig::default(), &corpus, 0, &[30, 60]).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.losses, b.losses);
    }
}
