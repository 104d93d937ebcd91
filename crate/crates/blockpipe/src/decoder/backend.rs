//! Decode backends: the real block-causal cached model, the full-recompute
//! bidirectional model, and a stub driven by synthetic confidence streams
//! for scheduler conformance tests.

use super::confidence_scores;
use crate::diffusion::BlockLayout;
use crate::error::{Error, Result};
use crate::kvcache::{Cache, KvSnapshot, LayerKv};
use crate::model::{forward, AttentionPattern, ForwardRequest, ModelBundle};
use crate::numerics::RealMatrix;
use crate::tokens::{Token, TokenSeq};

/// Confidence and argmax token per queried position, aligned with the
/// positions passed to `step`.
#[derive(Debug, Clone)]
pub struct StepScores {
    pub conf: Vec<f64>,
    pub token: Vec<Token>,
}

/// What the decode loops need from a model: score masked positions and
/// commit finalized KV rows to the cache. Stubs ignore the KV side.
pub trait DecodeBackend {
    fn begin(&mut self, cond: &TokenSeq) -> Result<()>;
    /// One forward over the given region-relative positions, returning
    /// scores aligned with them.
    fn step(&mut self, action: &TokenSeq, positions: &[usize]) -> Result<StepScores>;
    /// Appends cache entries for a subset of the immediately preceding
    /// step's positions (their tokens must have been final in that step).
    fn commit_cache(&mut self, positions: &[usize]) -> Result<()>;
    fn attention_pairs(&self) -> u64;
    fn query_rows(&self) -> u64;
    fn cache_len(&self) -> usize {
        0
    }
}

/// Real block-causal backend: incremental forwards against an append-only
/// cache seeded with the condition KV.
pub struct BlockCausalBackend<'a> {
    bundle: &'a ModelBundle,
    layout: BlockLayout,
    cache: Cache,
    pattern: AttentionPattern,
    cond: Option<TokenSeq>,
    pairs: u64,
    rows: u64,
    last_positions: Vec<usize>,
    last_kv: Vec<LayerKv>,
    probe_range: Option<std::ops::Range<usize>>,
    pub snapshots: Vec<KvSnapshot>,
}

impl<'a> BlockCausalBackend<'a> {
    pub fn new(bundle: &'a ModelBundle, layout: BlockLayout) -> Self {
        let cfg = bundle.weights.config;
        Self {
            bundle,
            layout,
            cache: Cache::new(cfg.layers, cfg.model_dim),
            pattern: AttentionPattern::BlockCausal(layout),
            cond: None,
            pairs: 0,
            rows: 0,
            last_positions: Vec::new(),
            last_kv: Vec::new(),
            probe_range: None,
            snapshots: Vec::new(),
        }
    }

    /// Capture flattened KV for this region-relative range after every step.
    pub fn set_probe(&mut self, rel_range: std::ops::Range<usize>) {
        self.probe_range = Some(rel_range);
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    fn abs(&self, rel: usize) -> usize {
        self.bundle.weights.config.cond_len + rel
    }

    fn record_probe(&mut self) {
        let Some(range) = self.probe_range.clone() else { return };
        let cfg = self.bundle.weights.config;
        let dim = cfg.model_dim;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut flat_k = Vec::with_capacity(range.len() * dim);
            let mut flat_v = Vec::with_capacity(range.len() * dim);
            for rel in range.clone() {
                let pos = self.abs(rel);
                if let Some(idx) = self.cache.index_of(pos) {
                    flat_k.extend_from_slice(self.cache.key_row(l, idx));
                    flat_v.extend_from_slice(self.cache.value_row(l, idx));
                } else if let Ok(row) = self.last_positions.binary_search(&pos) {
                    flat_k.extend_from_slice(self.last_kv[l].k.row(row));
                    flat_v.extend_from_slice(self.last_kv[l].v.row(row));
                } else {
                    return; // probe positions not materialized this step
                }
            }
            flat_k.extend_from_slice(&flat_v);
            layers.push(flat_k);
        }
        self.snapshots.push(KvSnapshot { layers });
    }
}

impl DecodeBackend for BlockCausalBackend<'_> {
    fn begin(&mut self, cond: &TokenSeq) -> Result<()> {
        let cfg = self.bundle.weights.config;
        let action = TokenSeq::filled(self.layout.region_len(), cfg.mask_token);
        let cond_positions: Vec<usize> = (0..cfg.cond_len).collect();
        let out = forward(
            self.bundle,
            &ForwardRequest {
                cond,
                action: &action,
                pattern: &self.pattern,
                cache: Some(&self.cache),
                query_positions: &cond_positions,
            },
        )?;
        self.pairs += out.attention_pairs;
        self.rows += out.query_count;
        self.cache.append(&out.new_kv, &cond_positions)?;
        self.cond = Some(cond.clone());
        Ok(())
    }

    fn step(&mut self, action: &TokenSeq, positions: &[usize]) -> Result<StepScores> {
        let cfg = self.bundle.weights.config;
        let cond = self
            .cond
            .clone()
            .ok_or_else(|| Error::InvalidInput("step before begin: condition unbound".into()))?;
        let abs: Vec<usize> = positions.iter().map(|&p| self.abs(p)).collect();
        let out = forward(
            self.bundle,
            &ForwardRequest {
                cond: &cond,
                action,
                pattern: &self.pattern,
                cache: Some(&self.cache),
                query_positions: &abs,
            },
        )?;
        self.pairs += out.attention_pairs;
        self.rows += out.query_count;
        let scored = confidence_scores(&out.logits, cfg.mask_token);
        self.last_positions = abs;
        self.last_kv = out.new_kv;
        self.record_probe();
        Ok(StepScores {
            conf: scored.iter().map(|(c, _)| *c).collect(),
            token: scored.iter().map(|(_, t)| *t).collect(),
        })
    }

    fn commit_cache(&mut self, positions: &[usize]) -> Result<()> {
        if positions.is_empty() {
            return Ok(());
        }
        let cfg = self.bundle.weights.config;
        let abs: Vec<usize> = positions.iter().map(|&p| self.abs(p)).collect();
        let rows: Vec<usize> = abs
            .iter()
            .map(|p| {
                self.last_positions.binary_search(p).map_err(|_| {
                    Error::InvalidAppend(format!("position {p} was not computed in the last step"))
                })
            })
            .collect::<Result<_>>()?;
        let mut slices = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut k = RealMatrix::zeros(rows.len(), cfg.model_dim);
            let mut v = RealMatrix::zeros(rows.len(), cfg.model_dim);
            for (i, &r) in rows.iter().enumerate() {
                k.row_mut(i).copy_from_slice(self.last_kv[l].k.row(r));
                v.row_mut(i).copy_from_slice(self.last_kv[l].v.row(r));
            }
            slices.push(LayerKv { k, v });
        }
        self.cache.append(&slices, &abs)
    }

    fn attention_pairs(&self) -> u64 {
        self.pairs
    }

    fn query_rows(&self) -> u64 {
        self.rows
    }

    fn cache_len(&self) -> usize {
        self.cache.committed_len()
    }
}

/// Full-recompute bidirectional backend: every step forwards the condition
/// and the whole action region with no cache.
pub struct BidirectionalBackend<'a> {
    bundle: &'a ModelBundle,
    region_len: usize,
    cond: TokenSeq,
    pairs: u64,
    rows: u64,
    probe_range: Option<std::ops::Range<usize>>,
    pub snapshots: Vec<KvSnapshot>,
}

impl<'a> BidirectionalBackend<'a> {
    pub fn new(bundle: &'a ModelBundle, region_len: usize, cond: TokenSeq) -> Self {
        Self {
            bundle,
            region_len,
            cond,
            pairs: 0,
            rows: 0,
            probe_range: None,
            snapshots: Vec::new(),
        }
    }

    pub fn set_probe(&mut self, rel_range: std::ops::Range<usize>) {
        self.probe_range = Some(rel_range);
    }

    /// Scores for every action position via one full forward.
    pub fn full_step(&mut self, action: &TokenSeq) -> Result<StepScores> {
        let cfg = self.bundle.weights.config;
        let n = cfg.cond_len + self.region_len;
        let all: Vec<usize> = (0..n).collect();
        let out = forward(
            self.bundle,
            &ForwardRequest {
                cond: &self.cond,
                action,
                pattern: &AttentionPattern::Bidirectional,
                cache: None,
                query_positions: &all,
            },
        )?;
        self.pairs += out.attention_pairs;
        self.rows += out.query_count;
        if let Some(range) = self.probe_range.clone() {
            let mut layers = Vec::with_capacity(cfg.layers);
            for l in 0..cfg.layers {
                let mut flat = Vec::new();
                for rel in range.clone() {
                    flat.extend_from_slice(out.new_kv[l].k.row(cfg.cond_len + rel));
                }
                for rel in range.clone() {
                    flat.extend_from_slice(out.new_kv[l].v.row(cfg.cond_len + rel));
                }
                layers.push(flat);
            }
            self.snapshots.push(KvSnapshot { layers });
        }
        // Score only the action rows.
        let mut action_logits = RealMatrix::zeros(self.region_len, out.logits.cols);
        for rel in 0..self.region_len {
            action_logits
                .row_mut(rel)
                .copy_from_slice(out.logits.row(cfg.cond_len + rel));
        }
        let scored = confidence_scores(&action_logits, cfg.mask_token);
        Ok(StepScores {
            conf: scored.iter().map(|(c, _)| *c).collect(),
            token: scored.iter().map(|(_, t)| *t).collect(),
        })
    }

    pub fn attention_pairs(&self) -> u64 {
        self.pairs
    }

    pub fn query_rows(&self) -> u64 {
        self.rows
    }
}

/// Scheduler-test stub: confidence comes from a caller-provided stream
/// keyed by (step index, region position); committed tokens come from a
/// fixed answer sequence. No model, no KV, no cost.
pub struct StubBackend<F: FnMut(usize, usize) -> f64> {
    conf_fn: F,
    answers: Vec<Token>,
    calls: usize,
}

impl<F: FnMut(usize, usize) -> f64> StubBackend<F> {
    pub fn new(answers: Vec<Token>, conf_fn: F) -> Self {
        Self { conf_fn, answers, calls: 0 }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}

impl<F: FnMut(usize, usize) -> f64> DecodeBackend for StubBackend<F> {
    fn begin(&mut self, _cond: &TokenSeq) -> Result<()> {
        Ok(())
    }

    fn step(&mut self, _action: &TokenSeq, positions: &[usize]) -> Result<StepScores> {
        self.calls += 1;
        let step = self.calls;
        let conf: Vec<f64> = positions.iter().map(|&p| (self.conf_fn)(step, p)).collect();
        let token: Vec<Token> = positions.iter().map(|&p| self.answers[p]).collect();
        Ok(StepScores { conf, token })
    }

    fn commit_cache(&mut self, _positions: &[usize]) -> Result<()> {
        Ok(())
    }

    fn attention_pairs(&self) -> u64 {
        0
    }

    fn query_rows(&self) -> u64 {
        0
    }
}
