use crate::tensor::{Tape, Tensor, Var};

use super::{ModelCheckpoint, ModelConfig, ModelError, Result, Weights, LN_EPS};

/// Residual-stream vectors for one sequence: `n_layers + 1` matrices of shape
/// `[seq_len × d_model]`, index 0 being the embedding output.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCache {
    layers: Vec<Tensor>,
}

impl ResidualCache {
    /// Number of cached residual matrices (`n_layers + 1`).
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn d_model(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn layer(&self, layer: usize) -> &Tensor {
        &self.layers[layer]
    }

    /// Residual vector at `(layer, position)`.
    pub fn get(&self, layer: usize, position: usize) -> &[f32] {
        self.layers[layer].row(position)
    }

    fn rows(&self, layer: usize, start: usize, end: usize) -> Tensor {
        stack_rows(&[self], layer, start, end)
    }
}

/// Rows `start..end` of residual `layer` from each cache, stacked in order.
fn stack_rows(caches: &[&ResidualCache], layer: usize, start: usize, end: usize) -> Tensor {
    let d = caches[0].d_model();
    let mut data = Vec::with_capacity(caches.len() * (end - start) * d);
    for c in caches {
        data.extend_from_slice(&c.layers[layer].data()[start * d..end * d]);
    }
    Tensor::new(vec![caches.len() * (end - start), d], data).expect("row slice shape")
}

/// Replacement of the residual vector at `(layer, position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<f32>,
}

// Field offsets inside a block's bound variables, matching `BLOCK_FIELDS`.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const W_Q: usize = 2;
const B_Q: usize = 3;
const W_K: usize = 4;
const B_K: usize = 5;
const W_V: usize = 6;
const B_V: usize = 7;
const W_O: usize = 8;
const B_O: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W_FC: usize = 12;
const B_FC: usize = 13;
const W_PROJ: usize = 14;
const B_PROJ: usize = 15;

/// Model weights registered on a tape as borrowed leaves.
pub(crate) struct Bound {
    cfg: ModelConfig,
    wte: Var,
    wpe: Var,
    blocks: Vec<[Var; 16]>,
    ln_f_g: Var,
    ln_f_b: Var,
}

impl Bound {
    pub(crate) fn new<'w>(
        tape: &mut Tape<'w>,
        cfg: ModelConfig,
        w: &'w Weights,
        requires_grad: bool,
    ) -> Self {
        let wte = tape.param(&w.wte, requires_grad);
        let wpe = tape.param(&w.wpe, requires_grad);
        let blocks = w
            .blocks
            .iter()
            .map(|b| b.fields().map(|t| tape.param(t, requires_grad)))
            .collect();
        let ln_f_g = tape.param(&w.ln_f_g, requires_grad);
        let ln_f_b = tape.param(&w.ln_f_b, requires_grad);
        Self {
            cfg,
            wte,
            wpe,
            blocks,
            ln_f_g,
            ln_f_b,
        }
    }

    /// Every bound parameter in [`Weights::named`] order.
    pub(crate) fn all(&self) -> Vec<Var> {
        let mut out = vec![self.wte, self.wpe];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.push(self.ln_f_g);
        out.push(self.ln_f_b);
        out
    }

    pub(crate) fn embed(&self, tape: &mut Tape<'_>, tokens: &[usize]) -> Result<Var> {
        let tok = tape.gather_rows(self.wte, tokens)?;
        let pos = tape.slice_rows(self.wpe, 0, tokens.len())?;
        Ok(tape.add(tok, pos)?)
    }

    /// Runs block `layer` on `groups` stacked sequences of `x`. `prefix`
    /// holds each group's unchanged earlier residual rows at the block input.
    fn block(
        &self,
        tape: &mut Tape<'_>,
        layer: usize,
        x: Var,
        prefix: Option<Var>,
        groups: usize,
    ) -> Result<Var> {
        let b = &self.blocks[layer];
        let h = tape.layer_norm(x, b[LN1_G], b[LN1_B], LN_EPS)?;
        let proj = |tape: &mut Tape<'_>, h: Var, w: usize, bias: usize| -> Result<Var> {
            let m = tape.matmul(h, b[w])?;
            Ok(tape.add_bias(m, b[bias])?)
        };
        let q = proj(tape, h, W_Q, B_Q)?;
        let k = proj(tape, h, W_K, B_K)?;
        let v = proj(tape, h, W_V, B_V)?;
        let kv_prefix = match prefix {
            Some(p) => {
                let hp = tape.layer_norm(p, b[LN1_G], b[LN1_B], LN_EPS)?;
                Some((proj(tape, hp, W_K, B_K)?, proj(tape, hp, W_V, B_V)?))
            }
            None => None,
        };
        let o = tape.causal_attention(q, k, v, kv_prefix, groups, self.cfg.n_heads)?;
        let o = proj(tape, o, W_O, B_O)?;
        let x = tape.add(x, o)?;
        let h2 = tape.layer_norm(x, b[LN2_G], b[LN2_B], LN_EPS)?;
        let f = proj(tape, h2, W_FC, B_FC)?;
        let f = tape.gelu(f)?;
        let f = proj(tape, f, W_PROJ, B_PROJ)?;
        Ok(tape.add(x, f)?)
    }

    pub(crate) fn unembed(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, self.ln_f_g, self.ln_f_b, LN_EPS)?;
        Ok(tape.matmul_t(h, self.wte)?)
    }

    /// Full-sequence forward from token ids. Pushes every residual matrix to
    /// `record` when given.
    pub(crate) fn forward_full(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[usize],
        mut record: Option<&mut Vec<Tensor>>,
        patch: Option<(usize, usize, Var)>,
    ) -> Result<Var> {
        let mut x = self.embed(tape, tokens)?;
        for layer in 0..=self.cfg.n_layers {
            if layer > 0 {
                x = self.block(tape, layer - 1, x, None, 1)?;
            }
            if let Some((pl, pp, hv)) = patch {
                if pl == layer {
                    x = replace_row(tape, x, pp, hv)?;
                }
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.push(tape.value(x).clone());
            }
        }
        self.unembed(tape, x)
    }

    /// Logits `[groups·len × vocab]` for several token sequences of one length,
    /// stacked row-wise.
    pub(crate) fn forward_groups(&self, tape: &mut Tape<'_>, seqs: &[&[usize]]) -> Result<Var> {
        let len = seqs[0].len();
        if seqs.iter().any(|s| s.len() != len) {
            return Err(ModelError::Contract("grouped forward needs sequences of equal length".into()));
        }
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let tok = tape.gather_rows(self.wte, &ids)?;
        let pos = tape.gather_rows(self.wpe, &positions)?;
        let mut x = tape.add(tok, pos)?;
        for layer in 0..self.cfg.n_layers {
            x = self.block(tape, layer, x, None, seqs.len())?;
        }
        self.unembed(tape, x)
    }

    /// Recomputes residual rows `position..` above `layer` after replacing
    /// row `position` of residual `layer` with `patched`. Rows before
    /// `position` come from the cache. Returns the final residual tail.
    pub(crate) fn run_tail(
        &self,
        tape: &mut Tape<'_>,
        cache: &ResidualCache,
        layer: usize,
        position: usize,
        patched: Var,
    ) -> Result<Var> {
        self.run_tail_batched(tape, &[cache], layer, position, patched)
    }

    /// [`Bound::run_tail`] for several sequences of equal length at once.
    /// `patched` holds one row per cache; the result stacks each sequence's
    /// `seq_len - position` tail rows.
    pub(crate) fn run_tail_batched(
        &self,
        tape: &mut Tape<'_>,
        caches: &[&ResidualCache],
        layer: usize,
        position: usize,
        patched: Var,
    ) -> Result<Var> {
        let groups = caches.len();
        let n = caches[0].seq_len();
        if caches.iter().any(|c| c.seq_len() != n) {
            return Err(ModelError::Contract(
                "batched resume needs sequences of equal length".into(),
            ));
        }
        let t = n - position;
        let mut x = if t > 1 {
            let rest = tape.constant(stack_rows(caches, layer, position + 1, n));
            let all = tape.concat_rows(&[patched, rest])?;
            // Interleave: group g's patched row, then its t - 1 cached rows.
            let order: Vec<usize> = (0..groups)
                .flat_map(|g| {
                    std::iter::once(g).chain((0..t - 1).map(move |i| groups + g * (t - 1) + i))
                })
                .collect();
            tape.gather_rows(all, &order)?
        } else {
            patched
        };
        for l in layer..self.cfg.n_layers {
            let prefix = if position > 0 {
                Some(tape.constant(stack_rows(caches, l, 0, position)))
            } else {
                None
            };
            x = self.block(tape, l, x, prefix, groups)?;
        }
        Ok(x)
    }
}

fn replace_row(tape: &mut Tape<'_>, x: Var, row: usize, value: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    let mut parts = Vec::with_capacity(3);
    if row > 0 {
        parts.push(tape.slice_rows(x, 0, row)?);
    }
    parts.push(value);
    if row + 1 < n {
        parts.push(tape.slice_rows(x, row + 1, n - row - 1)?);
    }
    Ok(tape.concat_rows(&parts)?)
}

impl ModelCheckpoint {
    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(ModelError::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.config.vocab_size {
                    Ok(t as usize)
                } else {
                    Err(ModelError::Contract(format!(
                        "token id {t} outside vocabulary of {}",
                        self.config.vocab_size
                    )))
                }
            })
            .collect()
    }

    fn check_patch(&self, seq_len: usize, patch: &Patch) -> Result<()> {
        if patch.layer > self.config.n_layers {
            return Err(ModelError::Contract(format!(
                "patch layer {} exceeds n_layers {}",
                patch.layer, self.config.n_layers
            )));
        }
        if patch.position >= seq_len {
            return Err(ModelError::Contract(format!(
                "patch position {} outside sequence of length {seq_len}",
                patch.position
            )));
        }
        if patch.vector.len() != self.config.d_model {
            return Err(ModelError::Contract(format!(
                "patch vector has dimension {}, model has {}",
                patch.vector.len(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    /// Logits `[seq × vocab]` and the residual cache for `tokens`.
    pub fn forward_with_cache(&self, tokens: &[u32]) -> Result<(Tensor, ResidualCache)> {
        let ids = self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, self.config, &self.weights, false);
        let mut layers = Vec::with_capacity(self.config.n_layers + 1);
        let logits = bound.forward_full(&mut tape, &ids, Some(&mut layers), None)?;
        Ok((tape.value(logits).clone(), ResidualCache { layers }))
    }

    /// Logits without keeping the cache.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        let ids = self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, self.config, &self.weights, false);
        let logits = bound.forward_full(&mut tape, &ids, None, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Full recomputation of every position with one residual row replaced.
    /// Shares no cached state with [`ModelCheckpoint::resume_forward`].
    pub fn forward_patched(&self, tokens: &[u32], patch: &Patch) -> Result<Tensor> {
        let ids = self.check_tokens(tokens)?;
        self.check_patch(ids.len(), patch)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, self.config, &self.weights, false);
        let hv = tape.constant(Tensor::row_vector(patch.vector.clone()));
        let logits = bound.forward_full(
            &mut tape,
            &ids,
            None,
            Some((patch.layer, patch.position, hv)),
        )?;
        Ok(tape.value(logits).clone())
    }

    /// Logits `[seq × vocab]` after replacing one cached residual vector.
    /// Residuals below `patch.layer` and rows before `patch.position` are
    /// taken from the cache.
    pub fn resume_forward(&self, cache: &ResidualCache, patch: &Patch) -> Result<Tensor> {
        self.check_cache(cache)?;
        self.check_patch(cache.seq_len(), patch)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, self.config, &self.weights, false);
        let hv = tape.constant(Tensor::row_vector(patch.vector.clone()));
        let tail = bound.run_tail(&mut tape, cache, patch.layer, patch.position, hv)?;
        let x = if patch.position > 0 {
            let head = tape.constant(cache.rows(self.config.n_layers, 0, patch.position));
            tape.concat_rows(&[head, tail])?
        } else {
            tail
        };
        let logits = bound.unembed(&mut tape, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Final-position logits after a patch; cheaper than `resume_forward`.
    pub fn resume_final_logits(&self, cache: &ResidualCache, patch: &Patch) -> Result<Vec<f32>> {
        self.check_cache(cache)?;
        self.check_patch(cache.seq_len(), patch)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, self.config, &self.weights, false);
        let hv = tape.constant(Tensor::row_vector(patch.vector.clone()));
        let tail = bound.run_tail(&mut tape, cache, patch.layer, patch.position, hv)?;
        let rows = tape.value(tail).rows();
        let last = tape.slice_rows(tail, rows - 1, 1)?;
        let logits = bound.unembed(&mut tape, last)?;
        Ok(tape.value(logits).data().to_vec())
    }

    pub(crate) fn check_cache(&self, cache: &ResidualCache) -> Result<()> {
        if cache.depth() != self.config.n_layers + 1 || cache.d_model() != self.config.d_model {
            return Err(ModelError::Contract(format!(
                "cache has {} layers of width {}, model expects {} of width {}",
                cache.depth(),
                cache.d_model(),
                self.config.n_layers + 1,
                self.config.d_model
            )));
        }
        Ok(())
    }
}
