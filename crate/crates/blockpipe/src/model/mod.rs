//! Masked-denoising transformer with switchable attention pattern, optional
//! low-rank adapters, and incremental forwards against an append-only KV
//! cache.
//!
//! Masked positions are fed as the literal mask-token embedding. Condition
//! tokens are always visible to action queries under both patterns;
//! condition queries see only the condition.

mod weights;

pub use weights::{
    init_adapters, init_weights, load_checkpoint, save_checkpoint, AdapterWeights, LayerAdapters,
    LayerWeights, ModelBundle, ModelConfig, Weights,
};

use crate::diffusion::BlockLayout;
use crate::error::{Error, Result};
use crate::kvcache::{Cache, LayerKv};
use crate::numerics::{masked_attention, AttnMask, RealMatrix};
use crate::tokens::TokenSeq;

/// Attention visibility pattern over the (condition, action) sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionPattern {
    Bidirectional,
    BlockCausal(BlockLayout),
}

pub fn build_attention_pattern_for_layout(layout: BlockLayout) -> AttentionPattern {
    AttentionPattern::BlockCausal(layout)
}

/// Source of externally materialized per-layer KV rows for key positions
/// that are not recomputed in a forward pass.
pub trait KvSource {
    fn kv_positions(&self) -> &[usize];
    fn kv_key_row(&self, layer: usize, idx: usize) -> &[f64];
    fn kv_value_row(&self, layer: usize, idx: usize) -> &[f64];
}

impl KvSource for Cache {
    fn kv_positions(&self) -> &[usize] {
        self.positions()
    }
    fn kv_key_row(&self, layer: usize, idx: usize) -> &[f64] {
        self.key_row(layer, idx)
    }
    fn kv_value_row(&self, layer: usize, idx: usize) -> &[f64] {
        self.value_row(layer, idx)
    }
}

/// Everything a forward pass needs besides the model itself.
pub struct ForwardRequest<'a> {
    pub cond: &'a TokenSeq,
    /// Action-region tokens; masked positions hold the mask token.
    pub action: &'a TokenSeq,
    pub pattern: &'a AttentionPattern,
    /// Committed KV for positions that must not be recomputed. Only valid
    /// together with block-causal attention.
    pub cache: Option<&'a Cache>,
    /// Absolute positions to compute, sorted ascending.
    pub query_positions: &'a [usize],
}

pub struct ForwardOutput {
    /// One row per query position, vocab-size columns.
    pub logits: RealMatrix,
    /// Per-layer keys/values for exactly the query positions.
    pub new_kv: Vec<LayerKv>,
    /// (query, key) pairs evaluated, summed over layers and heads.
    pub attention_pairs: u64,
    pub query_count: u64,
}

/// Builds the visibility mask for a set of query/key positions.
///
/// Bidirectional: action queries see the condition and every action key;
/// block-causal: a query in block i sees the condition, blocks before i,
/// and block i itself. Condition queries see only the condition.
pub fn build_attention_mask(
    pattern: &AttentionPattern,
    cond_len: usize,
    query_positions: &[usize],
    key_positions: &[usize],
) -> Result<AttnMask> {
    for w in query_positions.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidInput("query positions not strictly increasing".into()));
        }
    }
    for w in key_positions.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidInput("key positions not strictly increasing".into()));
        }
    }
    if let AttentionPattern::BlockCausal(layout) = pattern {
        for &p in query_positions.iter().chain(key_positions.iter()) {
            if p >= cond_len && layout.block_of_abs(p).is_none() {
                return Err(Error::InvalidInput(format!(
                    "position {p} outside condition and block layout"
                )));
            }
        }
    }
    AttnMask::from_fn(query_positions.len(), key_positions.len(), |qi, ki| {
        let qp = query_positions[qi];
        let kp = key_positions[ki];
        if qp < cond_len {
            return kp < cond_len;
        }
        match pattern {
            AttentionPattern::Bidirectional => true,
            AttentionPattern::BlockCausal(layout) => {
                kp < cond_len || layout.block_of_abs(kp) <= layout.block_of_abs(qp)
            }
        }
    })
}

/// Forward pass over the query positions. With a cache, keys/values for
/// committed positions are read from it and never recomputed; this is only
/// sound under block-causal attention, so supplying a cache with the
/// bidirectional pattern is an error.
pub fn forward(bundle: &ModelBundle, req: &ForwardRequest) -> Result<ForwardOutput> {
    if req.cache.is_some() && matches!(req.pattern, AttentionPattern::Bidirectional) {
        return Err(Error::UnsupportedCombination(
            "KV cache with bidirectional attention: cached keys/values go stale".into(),
        ));
    }
    let pinned = req.cache.map(|c| c as &dyn KvSource);
    forward_impl(bundle, req.cond, req.action, req.pattern, pinned, req.query_positions)
}

/// Bidirectional forward that trusts externally frozen KV rows for some
/// positions. This is the deliberately approximate path used by the
/// stale-cache baseline; the frozen rows are biased because bidirectional
/// keys/values legitimately depend on positions that keep changing.
pub fn forward_with_stale_kv(
    bundle: &ModelBundle,
    cond: &TokenSeq,
    action: &TokenSeq,
    query_positions: &[usize],
    stale: &dyn KvSource,
) -> Result<ForwardOutput> {
    forward_impl(
        bundle,
        cond,
        action,
        &AttentionPattern::Bidirectional,
        Some(stale),
        query_positions,
    )
}

fn forward_impl(
    bundle: &ModelBundle,
    cond: &TokenSeq,
    action: &TokenSeq,
    pattern: &AttentionPattern,
    pinned: Option<&dyn KvSource>,
    query_positions: &[usize],
) -> Result<ForwardOutput> {
    let cfg = bundle.weights.config;
    let w = &bundle.weights;
    if cond.len() != cfg.cond_len {
        return Err(Error::InvalidInput(format!(
            "condition length {} != cond_len {}",
            cond.len(),
            cfg.cond_len
        )));
    }
    if query_positions.is_empty() {
        return Err(Error::InvalidInput("no query positions".into()));
    }
    for &p in query_positions {
        if p >= cfg.max_len {
            return Err(Error::InvalidInput(format!("position {p} >= max_len {}", cfg.max_len)));
        }
        if p >= cfg.cond_len && p - cfg.cond_len >= action.len() {
            return Err(Error::InvalidInput(format!("position {p} beyond action region")));
        }
    }
    if let AttentionPattern::BlockCausal(layout) = pattern {
        if layout.region_start != cfg.cond_len || layout.region_len() != action.len() {
            return Err(Error::InvalidInput(format!(
                "layout [{}, {}) does not cover the action region [{}, {})",
                layout.region_start,
                layout.region_end(),
                cfg.cond_len,
                cfg.cond_len + action.len()
            )));
        }
    }
    if let Some(src) = pinned {
        for &p in query_positions {
            if src.kv_positions().binary_search(&p).is_ok() {
                return Err(Error::InvalidInput(format!(
                    "position {p} is both cached and queried"
                )));
            }
        }
    }

    // Key set: pinned positions plus this pass's rows, in position order.
    let pinned_positions: &[usize] = pinned.map_or(&[], |s| s.kv_positions());
    let mut key_positions = Vec::with_capacity(pinned_positions.len() + query_positions.len());
    let mut key_source = Vec::with_capacity(key_positions.capacity());
    {
        let (mut i, mut j) = (0usize, 0usize);
        while i < pinned_positions.len() || j < query_positions.len() {
            let take_pinned = match (pinned_positions.get(i), query_positions.get(j)) {
                (Some(&a), Some(&b)) => a < b,
                (Some(_), None) => true,
                _ => false,
            };
            if take_pinned {
                key_positions.push(pinned_positions[i]);
                key_source.push(KeyOrigin::Pinned(i));
                i += 1;
            } else {
                key_positions.push(query_positions[j]);
                key_source.push(KeyOrigin::Row(j));
                j += 1;
            }
        }
    }

    let mask = build_attention_mask(pattern, cfg.cond_len, query_positions, &key_positions)?;

    let rows = query_positions.len();
    let d = cfg.model_dim;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    let mut x = RealMatrix::zeros(rows, d);
    for (r, &p) in query_positions.iter().enumerate() {
        let token = if p < cfg.cond_len { cond.get(p) } else { action.get(p - cfg.cond_len) };
        if (token as usize) >= cfg.vocab_size {
            return Err(Error::InvalidInput(format!("token {token} >= vocab {}", cfg.vocab_size)));
        }
        let te = w.tok_emb.row(token as usize);
        let pe = w.pos_emb.row(p);
        for (o, (a, b)) in x.row_mut(r).iter_mut().zip(te.iter().zip(pe.iter())) {
            *o = a + b;
        }
    }

    let adapters = bundle.adapters_active.then_some(()).and(bundle.adapters.as_ref());
    let mut new_kv: Vec<LayerKv> = Vec::with_capacity(cfg.layers);
    for (l, lw) in w.layers.iter().enumerate() {
        let a = layer_norm(&x, lw.ln1_g.row(0), lw.ln1_b.row(0));
        let mut q = a.matmul(&lw.wq);
        let k = a.matmul(&lw.wk);
        let mut v = a.matmul(&lw.wv);
        if let Some(ad) = adapters {
            q.add_assign(&a.matmul(&ad.layers[l].q_a).matmul(&ad.layers[l].q_b));
            v.add_assign(&a.matmul(&ad.layers[l].v_a).matmul(&ad.layers[l].v_b));
        }

        let mut k_all = RealMatrix::zeros(key_positions.len(), d);
        let mut v_all = RealMatrix::zeros(key_positions.len(), d);
        for (ki, origin) in key_source.iter().enumerate() {
            match *origin {
                KeyOrigin::Pinned(idx) => {
                    let src = pinned.expect("pinned origin without source");
                    k_all.row_mut(ki).copy_from_slice(src.kv_key_row(l, idx));
                    v_all.row_mut(ki).copy_from_slice(src.kv_value_row(l, idx));
                }
                KeyOrigin::Row(r) => {
                    k_all.row_mut(ki).copy_from_slice(k.row(r));
                    v_all.row_mut(ki).copy_from_slice(v.row(r));
                }
            }
        }

        let hd = cfg.head_dim();
        let mut ctx = RealMatrix::zeros(rows, d);
        for h in 0..cfg.heads {
            let q_h = take_head(&q, h, hd);
            let k_h = take_head(&k_all, h, hd);
            let v_h = take_head(&v_all, h, hd);
            let out_h = masked_attention(&q_h, &k_h, &v_h, &mask, scale)?;
            put_head(&mut ctx, h, hd, &out_h);
        }
        let o = ctx.matmul(&lw.wo);
        x.add_assign(&o);

        let a2 = layer_norm(&x, lw.ln2_g.row(0), lw.ln2_b.row(0));
        let mut h1 = affine(&a2, &lw.ff_w1, lw.ff_b1.row(0));
        silu_in_place(&mut h1);
        let f = affine(&h1, &lw.ff_w2, lw.ff_b2.row(0));
        x.add_assign(&f);

        new_kv.push(LayerKv { k, v });
    }

    let a = layer_norm(&x, w.ln_f_g.row(0), w.ln_f_b.row(0));
    let mut logits = affine(&a, &w.head_w, w.head_b.row(0));
    if let Some(ad) = adapters {
        logits.add_assign(&a.matmul(&ad.head_a).matmul(&ad.head_b));
    }

    let attention_pairs = mask.allowed_pairs() * (cfg.layers as u64) * (cfg.heads as u64);
    Ok(ForwardOutput { logits, new_kv, attention_pairs, query_count: rows as u64 })
}

#[derive(Clone, Copy)]
enum KeyOrigin {
    Pinned(usize),
    Row(usize),
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn layer_norm(x: &RealMatrix, g: &[f64], b: &[f64]) -> RealMatrix {
    let d = x.cols;
    let mut out = RealMatrix::zeros(x.rows, d);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (row[j] - mean) * rstd * g[j] + b[j];
        }
    }
    out
}

pub(crate) fn affine(x: &RealMatrix, w: &RealMatrix, b: &[f64]) -> RealMatrix {
    let mut out = x.matmul(w);
    for i in 0..out.rows {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(b.iter()) {
            *o += bv;
        }
    }
    out
}

pub(crate) fn silu_in_place(x: &mut RealMatrix) {
    for v in x.data.iter_mut() {
        *v = *v / (1.0 + (-*v).exp());
    }
}

pub(crate) fn take_head(m: &RealMatrix, h: usize, hd: usize) -> RealMatrix {
    let mut out = RealMatrix::zeros(m.rows, hd);
    for i in 0..m.rows {
        out.row_mut(i).copy_from_slice(&m.row(i)[h * hd..(h + 1) * hd]);
    }
    out
}

fn put_head(dst: &mut RealMatrix, h: usize, hd: usize, src: &RealMatrix) {
    for i in 0..src.rows {
        dst.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(src.row(i));
    }
}
