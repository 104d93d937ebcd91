//! Baseline decoders: autoregressive (block size 1), vanilla
//! full-recompute diffusion, and the stale-KV approximation that freezes
//! keys/values of committed positions under bidirectional attention.

use super::backend::BidirectionalBackend;
use super::loops::decode_block_diffusion_with;
use super::{BlockCausalBackend, DecodeConfig, DecodeResult, DecodeTrace, IterationCost};
use crate::diffusion::BlockLayout;
use crate::error::{Error, Result};
use crate::kvcache::{KvSnapshot, LayerKv};
use crate::model::{forward_with_stale_kv, KvSource, ModelBundle};
use crate::numerics::RealMatrix;
use crate::tokens::TokenSeq;

/// Autoregressive decoding: block size 1, one committed token per forward,
/// full KV caching.
pub fn decode_ar(
    bundle: &ModelBundle,
    cond: &TokenSeq,
    region_len: usize,
    _seed: u64,
) -> Result<DecodeResult> {
    let mcfg = bundle.weights.config;
    let layout = BlockLayout::for_region(1, mcfg.cond_len, region_len)?;
    let cfg = DecodeConfig::defaults_for(layout);
    let mut backend = BlockCausalBackend::new(bundle, layout);
    decode_block_diffusion_with(&mut backend, cond, &cfg, mcfg.mask_token, mcfg.eoa_token)
}

/// Autoregressive decoding that also exposes the final cache length.
pub fn decode_ar_with_cache(
    bundle: &ModelBundle,
    cond: &TokenSeq,
    region_len: usize,
) -> Result<(DecodeResult, usize)> {
    let mcfg = bundle.weights.config;
    let layout = BlockLayout::for_region(1, mcfg.cond_len, region_len)?;
    let cfg = DecodeConfig::defaults_for(layout);
    let mut backend = BlockCausalBackend::new(bundle, layout);
    let result =
        decode_block_diffusion_with(&mut backend, cond, &cfg, mcfg.mask_token, mcfg.eoa_token)?;
    let cache_len = backend.cache().committed_len();
    Ok((result, cache_len))
}

/// Vanilla diffusion decoding: starts all-masked, runs up to `steps`
/// full-sequence forwards with no KV reuse, committing the ceil(L/steps)
/// highest-confidence remaining positions per step (ties to the lower
/// position index).
pub fn decode_vanilla_dvla(
    bundle: &ModelBundle,
    cond: &TokenSeq,
    region_len: usize,
    steps: usize,
    _seed: u64,
) -> Result<DecodeResult> {
    decode_vanilla_probed(bundle, cond, region_len, steps, None).map(|(r, _)| r)
}

/// Vanilla decoding with an optional per-iteration KV probe over a
/// region-relative range (for the similarity diagnostics).
pub fn decode_vanilla_probed(
    bundle: &ModelBundle,
    cond: &TokenSeq,
    region_len: usize,
    steps: usize,
    probe: Option<std::ops::Range<usize>>,
) -> Result<(DecodeResult, Vec<KvSnapshot>)> {
    if steps == 0 {
        return Err(Error::InvalidInput("vanilla decoding needs at least one step".into()));
    }
    let mcfg = bundle.weights.config;
    let mut backend = BidirectionalBackend::new(bundle, region_len, cond.clone());
    if let Some(range) = probe {
        backend.set_probe(range);
    }
    let mask_token = mcfg.mask_token;
    let mut tokens = TokenSeq::filled(region_len, mask_token);
    let quota = region_len.div_ceil(steps);
    let mut trace = DecodeTrace { decode_iteration_of: vec![None; region_len], ..Default::default() };
    let mut forwards = 0usize;

    for step in 1..=steps {
        let remaining: Vec<usize> = tokens.positions_of(mask_token);
        if remaining.is_empty() {
            break;
        }
        let pairs_before = backend.attention_pairs();
        let scores = backend.full_step(&tokens)?;
        forwards += 1;
        let mut ranked: Vec<(usize, f64)> =
            remaining.iter().map(|&p| (p, scores.conf[p])).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut commits = 0usize;
        for &(p, _) in ranked.iter().take(quota.min(ranked.len())) {
            tokens.set(p, scores.token[p]);
            trace.decode_iteration_of[p] = Some(step);
            commits += 1;
        }
        trace.per_iteration.push(IterationCost {
            iteration: step,
            query_count: (mcfg.cond_len + region_len) as u64,
            attention_pairs: backend.attention_pairs() - pairs_before,
            commits,
        });
    }
    let result = DecodeResult {
        tokens,
        iterations: forwards,
        forwards,
        attention_pairs: backend.attention_pairs(),
        trace,
    };
    Ok((result, backend.snapshots))
}

/// Frozen per-layer KV rows keyed by absolute position, insertable in any
/// order. This is the stale store of the approximation baseline, distinct
/// from the strictly ordered block cache.
struct StaleKv {
    dim: usize,
    positions: Vec<usize>,
    layers: Vec<LayerKv>,
}

impl StaleKv {
    fn new(num_layers: usize, dim: usize) -> Self {
        Self {
            dim,
            positions: Vec::new(),
            layers: (0..num_layers)
                .map(|_| LayerKv { k: RealMatrix::zeros(0, dim), v: RealMatrix::zeros(0, dim) })
                .collect(),
        }
    }

    fn insert(&mut self, pos: usize, rows: &[(&[f64], &[f64])]) {
        let idx = match self.positions.binary_search(&pos) {
            Ok(_) => return, // already frozen
            Err(i) => i,
        };
        self.positions.insert(idx, pos);
        for (layer, (k_row, v_row)) in self.layers.iter_mut().zip(rows.iter()) {
            let at = idx * self.dim;
            layer.k.data.splice(at..at, k_row.iter().copied());
            layer.k.rows += 1;
            layer.v.data.splice(at..at, v_row.iter().copied());
            layer.v.rows += 1;
        }
    }
}

impl KvSource for StaleKv {
    fn kv_positions(&self) -> &[usize] {
        &self.positions
    }
    fn kv_key_row(&self, layer: usize, idx: usize) -> &[f64] {
        self.layers[layer].k.row(idx)
    }
    fn kv_value_row(&self, layer: usize, idx: usize) -> &[f64] {
        self.layers[layer].v.row(idx)
    }
}

/// Stale-cache baseline: bidirectional attention with KV frozen for the
/// condition and for committed positions one step after they commit, so
/// only still-masked (and just-committed) positions are recomputed.
/// Intentionally approximate: frozen rows stop reacting to later commits,
/// which biases the attention keys and values.
pub fn decode_fast_dllm_baseline(
    bundle: &ModelBundle,
    cond: &TokenSeq,
    region_len: usize,
    cfg: &DecodeConfig,
    _seed: u64,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let mcfg = bundle.weights.config;
    let mask_token = mcfg.mask_token;
    let n = mcfg.cond_len + region_len;
    let mut tokens = TokenSeq::filled(region_len, mask_token);
    let mut stale = StaleKv::new(mcfg.layers, mcfg.model_dim);
    let mut committed_step: Vec<Option<usize>> = vec![None; region_len];
    let mut trace = DecodeTrace { decode_iteration_of: vec![None; region_len], ..Default::default() };
    let mut pairs = 0u64;
    let mut forwards = 0usize;

    for step in 1..=(region_len + 2) {
        let remaining: Vec<usize> = tokens.positions_of(mask_token);
        if remaining.is_empty() {
            break;
        }
        let query_abs: Vec<usize> =
            (0..n).filter(|p| stale.positions.binary_search(p).is_err()).collect();
        let out = forward_with_stale_kv(bundle, cond, &tokens, &query_abs, &stale)?;
        forwards += 1;
        let pairs_this = out.attention_pairs;
        pairs += pairs_this;

        let mut masked_logits = RealMatrix::zeros(remaining.len(), out.logits.cols);
        for (i, &p) in remaining.iter().enumerate() {
            let row = query_abs
                .binary_search(&(mcfg.cond_len + p))
                .expect("masked positions are never frozen");
            masked_logits.row_mut(i).copy_from_slice(out.logits.row(row));
        }
        let scored = super::confidence_scores(&masked_logits, mask_token);
        let mut selected: Vec<usize> = remaining
            .iter()
            .zip(scored.iter())
            .filter(|(_, (c, _))| *c >= cfg.tau_conf)
            .map(|(&p, _)| p)
            .collect();
        if selected.is_empty() {
            let best = remaining
                .iter()
                .zip(scored.iter())
                .fold(None::<(usize, f64)>, |acc, (&p, &(c, _))| match acc {
                    Some((_, bc)) if bc >= c => acc,
                    _ => Some((p, c)),
                })
                .expect("remaining non-empty");
            selected.push(best.0);
        }
        let mut commits = 0usize;
        for &p in &selected {
            let i = remaining.binary_search(&p).unwrap();
            tokens.set(p, scored[i].1);
            committed_step[p] = Some(step);
            trace.decode_iteration_of[p] = Some(step);
            commits += 1;
        }

        // Freeze what this pass recomputed and whose tokens are final:
        // the condition, and positions committed in earlier steps.
        for (row, &pos) in query_abs.iter().enumerate() {
            let freezable = if pos < mcfg.cond_len {
                true
            } else {
                committed_step[pos - mcfg.cond_len].is_some_and(|s| s < step)
            };
            if freezable {
                let rows: Vec<(&[f64], &[f64])> = out
                    .new_kv
                    .iter()
                    .map(|l| (l.k.row(row), l.v.row(row)))
                    .collect();
                stale.insert(pos, &rows);
            }
        }
        trace.per_iteration.push(IterationCost {
            iteration: step,
            query_count: query_abs.len() as u64,
            attention_pairs: pairs_this,
            commits,
        });
    }
    if tokens.contains(mask_token) {
        return Err(Error::NonTermination(region_len + 2));
    }
    Ok(DecodeResult { tokens, iterations: forwards, forwards, attention_pairs: pairs, trace })
}
