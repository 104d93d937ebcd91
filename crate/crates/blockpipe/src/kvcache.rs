//! Append-only per-layer key/value storage for block-causal decoding, the
//! incremental-vs-monolithic equivalence check, and the KV similarity
//! diagnostics.

use crate::diffusion::BlockLayout;
use crate::error::{Error, Result};
use crate::model::{build_attention_pattern_for_layout, forward, ForwardRequest, ModelBundle};
use crate::numerics::RealMatrix;
use crate::tokens::TokenSeq;

/// Per-layer keys/values for a set of positions, rows in position order,
/// `model_dim` columns with heads laid out contiguously.
#[derive(Debug, Clone)]
pub struct LayerKv {
    pub k: RealMatrix,
    pub v: RealMatrix,
}

/// Append-only KV buffers, one (k, v) pair per layer. Positions are
/// absolute and strictly increasing; buffers only grow between explicit
/// truncations.
#[derive(Debug, Clone)]
pub struct Cache {
    positions: Vec<usize>,
    layers: Vec<LayerKv>,
    dim: usize,
}

impl Cache {
    pub fn new(num_layers: usize, dim: usize) -> Self {
        let layers = (0..num_layers)
            .map(|_| LayerKv { k: RealMatrix::zeros(0, dim), v: RealMatrix::zeros(0, dim) })
            .collect();
        Self { positions: Vec::new(), layers, dim }
    }

    pub fn committed_len(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }

    pub fn index_of(&self, pos: usize) -> Option<usize> {
        self.positions.binary_search(&pos).ok()
    }

    pub fn key_row(&self, layer: usize, idx: usize) -> &[f64] {
        self.layers[layer].k.row(idx)
    }

    pub fn value_row(&self, layer: usize, idx: usize) -> &[f64] {
        self.layers[layer].v.row(idx)
    }

    /// Appends per-layer KV rows for new positions. Positions must be
    /// strictly greater than everything already committed.
    pub fn append(&mut self, new_kv: &[LayerKv], positions: &[usize]) -> Result<()> {
        if new_kv.len() != self.layers.len() {
            return Err(Error::InvalidAppend(format!(
                "layer count {} != cache layers {}",
                new_kv.len(),
                self.layers.len()
            )));
        }
        for w in positions.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidAppend(format!(
                    "positions not strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if let (Some(&last), Some(&first)) = (self.positions.last(), positions.first()) {
            if first <= last {
                return Err(Error::InvalidAppend(format!(
                    "position {first} does not extend committed range ending at {last}"
                )));
            }
        }
        for (layer, kv) in self.layers.iter_mut().zip(new_kv.iter()) {
            if kv.k.rows != positions.len() || kv.v.rows != positions.len() || kv.k.cols != self.dim {
                return Err(Error::InvalidAppend(format!(
                    "kv rows {}x{} do not match {} positions x dim {}",
                    kv.k.rows, kv.k.cols, positions.len(), self.dim
                )));
            }
            layer.k.data.extend_from_slice(&kv.k.data);
            layer.k.rows += positions.len();
            layer.v.data.extend_from_slice(&kv.v.data);
            layer.v.rows += positions.len();
        }
        self.positions.extend_from_slice(positions);
        Ok(())
    }

    /// Drops committed entries beyond `len`. Provided for rollback
    /// experiments; the shipped decoders never call it.
    pub fn truncate_to(&mut self, len: usize) {
        if len >= self.positions.len() {
            return;
        }
        self.positions.truncate(len);
        for layer in self.layers.iter_mut() {
            layer.k.rows = len;
            layer.k.data.truncate(len * self.dim);
            layer.v.rows = len;
            layer.v.data.truncate(len * self.dim);
        }
    }

    /// Flattened per-layer (keys then values) for a contiguous range of
    /// committed indices. Used by the similarity diagnostics.
    pub fn snapshot_rows(&self, idx_range: std::ops::Range<usize>) -> KvSnapshot {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut flat = Vec::with_capacity(2 * idx_range.len() * self.dim);
            for i in idx_range.clone() {
                flat.extend_from_slice(layer.k.row(i));
            }
            for i in idx_range.clone() {
                flat.extend_from_slice(layer.v.row(i));
            }
            layers.push(flat);
        }
        KvSnapshot { layers }
    }
}

/// One iteration's flattened block KV: keys then values, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvSnapshot {
    pub layers: Vec<Vec<f64>>,
}

impl KvSnapshot {
    pub fn from_layer_kv(kv: &[LayerKv]) -> Self {
        let layers = kv
            .iter()
            .map(|l| {
                let mut flat = Vec::with_capacity(l.k.data.len() + l.v.data.len());
                flat.extend_from_slice(&l.k.data);
                flat.extend_from_slice(&l.v.data);
                flat
            })
            .collect();
        Self { layers }
    }
}

/// Pairwise cosine similarity matrices across snapshots: one per layer plus
/// their mean. Bit-identical snapshots score exactly 1.
#[derive(Debug, Clone)]
pub struct SimilarityTrace {
    pub mean: RealMatrix,
    pub per_layer: Vec<RealMatrix>,
}

pub fn similarity_trace(snapshots: &[KvSnapshot]) -> Result<SimilarityTrace> {
    if snapshots.len() < 2 {
        return Err(Error::InvalidInput("similarity trace needs at least 2 snapshots".into()));
    }
    let num_layers = snapshots[0].layers.len();
    let n = snapshots.len();
    for (i, s) in snapshots.iter().enumerate() {
        if s.layers.len() != num_layers {
            return Err(Error::InvalidInput(format!("snapshot {i} has inconsistent layer count")));
        }
        for l in &s.layers {
            let norm_sq: f64 = l.iter().map(|x| x * x).sum();
            if norm_sq == 0.0 {
                return Err(Error::UndefinedSimilarity(i));
            }
        }
    }
    let mut per_layer = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let mut m = RealMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, cosine(&snapshots[i].layers[layer], &snapshots[j].layers[layer]));
            }
        }
        per_layer.push(m);
    }
    let mut mean = RealMatrix::zeros(n, n);
    for m in &per_layer {
        mean.add_assign(m);
    }
    mean.scale(1.0 / num_layers as f64);
    Ok(SimilarityTrace { mean, per_layer })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Computes logits for block `upto_block` (1-based) twice -- incrementally
/// with per-block cached KV, and monolithically without cache -- and returns
/// the maximum absolute difference. Blocks 1..=upto_block must be fully
/// unmasked in `action`.
pub fn equivalence_check(
    bundle: &ModelBundle,
    cond: &TokenSeq,
    action: &TokenSeq,
    layout: &BlockLayout,
    upto_block: usize,
    bidirectional: bool,
) -> Result<f64> {
    if bidirectional {
        return Err(Error::UnsupportedCombination(
            "equivalence check requires block-causal attention; bidirectional KV is not reusable".into(),
        ));
    }
    if upto_block == 0 || upto_block > layout.num_blocks {
        return Err(Error::InvalidInput(format!(
            "upto_block {upto_block} outside 1..={}",
            layout.num_blocks
        )));
    }
    let cfg = &bundle.weights.config;
    let mask_token = cfg.mask_token;
    for b in 0..upto_block {
        for pos in layout.rel_range(b) {
            if action.get(pos) == mask_token {
                return Err(Error::InvalidInput(format!(
                    "masked token at region position {pos} inside checked range"
                )));
            }
        }
    }
    let pattern = build_attention_pattern_for_layout(*layout);
    let cond_positions: Vec<usize> = (0..cfg.cond_len).collect();

    // Incremental path: condition first, then one block at a time.
    let mut cache = Cache::new(cfg.layers, cfg.model_dim);
    let out = forward(
        bundle,
        &ForwardRequest {
            cond,
            action,
            pattern: &pattern,
            cache: Some(&cache),
            query_positions: &cond_positions,
        },
    )?;
    cache.append(&out.new_kv, &cond_positions)?;
    let mut incremental_logits = None;
    for b in 0..upto_block {
        let positions: Vec<usize> = layout.abs_range(b).collect();
        let out = forward(
            bundle,
            &ForwardRequest {
                cond,
                action,
                pattern: &pattern,
                cache: Some(&cache),
                query_positions: &positions,
            },
        )?;
        if b + 1 == upto_block {
            incremental_logits = Some(out.logits);
        } else {
            cache.append(&out.new_kv, &positions)?;
        }
    }
    let incremental = incremental_logits.expect("upto_block >= 1");

    // Monolithic path: everything in one pass, no cache.
    let mut all_positions = cond_positions;
    all_positions.extend(layout.abs_range(0).start..layout.abs_range(upto_block - 1).end);
    let out = forward(
        bundle,
        &ForwardRequest {
            cond,
            action,
            pattern: &pattern,
            cache: None,
            query_positions: &all_positions,
        },
    )?;
    let rows = out.logits.rows;
    let block_rows = layout.block_size;
    let start = rows - block_rows;
    let mut max_diff: f64 = 0.0;
    for r in 0..block_rows {
        for c in 0..out.logits.cols {
            let d = (incremental.at(r, c) - out.logits.at(start + r, c)).abs();
            max_diff = max_diff.max(d);
        }
    }
    Ok(max_diff)
}
