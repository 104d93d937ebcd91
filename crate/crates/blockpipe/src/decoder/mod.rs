//! Decoding paradigms: confidence-guided pipelined block decoding with
//! logarithmic scheduling, strict block diffusion, autoregressive decoding,
//! full-recompute vanilla diffusion, and the stale-KV approximation
//! baseline.
//!
//! All decoders commit argmax tokens only (no sampling); determinism comes
//! from fixed tie-breaking (lower position, lower token id). Cost is
//! tracked as attention (query, key) pairs summed over layers and heads,
//! including the condition prefill and the trailing cache-fill pass.

mod backend;
mod baselines;
mod loops;

pub use backend::{BidirectionalBackend, BlockCausalBackend, DecodeBackend, StepScores, StubBackend};
pub use baselines::{
    decode_ar, decode_ar_with_cache, decode_fast_dllm_baseline, decode_vanilla_dvla,
    decode_vanilla_probed,
};
pub use loops::{
    decode_block_diffusion, decode_block_diffusion_with, decode_pipelined, decode_pipelined_with,
};

use crate::diffusion::BlockLayout;
use crate::error::{Error, Result};
use crate::numerics::RealMatrix;
use crate::tokens::{Token, TokenSeq};
use serde::{Deserialize, Serialize};

/// Thresholds and scheduling knobs for the pipelined decoder. Defaults
/// follow the ablation sweet spot: tau_add 0.5, tau_act 0.7, tau_conf 0.5,
/// log factor 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub tau_add: f64,
    pub tau_act: f64,
    pub tau_conf: f64,
    /// Logarithmic scheduling factor n: fully activated blocks commit at
    /// least max(1, floor(remaining / n)) tokens per pass.
    pub log_factor: usize,
    pub max_iters: usize,
    pub layout: BlockLayout,
    /// Fixed-length mode decodes every block; otherwise generation stops
    /// appending blocks once an EOA token is committed.
    pub fixed_length: bool,
}

impl DecodeConfig {
    pub fn defaults_for(layout: BlockLayout) -> Self {
        Self {
            tau_add: 0.5,
            tau_act: 0.7,
            tau_conf: 0.5,
            log_factor: 2,
            max_iters: layout.region_len() + 2 * layout.num_blocks + 8,
            layout,
            fixed_length: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_add", self.tau_add), ("tau_act", self.tau_act), ("tau_conf", self.tau_conf)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0,1]")));
            }
        }
        if self.tau_add > self.tau_act {
            return Err(Error::Config(format!(
                "tau_add {} must be <= tau_act {}",
                self.tau_add, self.tau_act
            )));
        }
        if self.log_factor < 2 {
            return Err(Error::Config("log factor must be >= 2".into()));
        }
        if self.max_iters < self.layout.num_blocks {
            return Err(Error::Config("max_iters must be >= number of blocks".into()));
        }
        Ok(())
    }
}

/// Lifecycle of a block. Transitions only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockState {
    Pending,
    SemiActivated,
    FullyActivated,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateTransition {
    pub block: usize,
    pub iteration: usize,
    pub state: BlockState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationCost {
    pub iteration: usize,
    pub query_count: u64,
    pub attention_pairs: u64,
    pub commits: usize,
}

/// Per-position decode iterations plus per-iteration cost rows and block
/// state transitions.
#[derive(Debug, Clone, Default)]
pub struct DecodeTrace {
    pub decode_iteration_of: Vec<Option<usize>>,
    pub per_iteration: Vec<IterationCost>,
    pub state_transitions: Vec<StateTransition>,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Final action-region tokens. Mask tokens remain only for blocks
    /// cancelled by an EOA commit.
    pub tokens: TokenSeq,
    pub iterations: usize,
    /// Forwards inside the decode loop. The condition prefill and the
    /// trailing cache-fill pass are not forwards but their attention pairs
    /// are included in `attention_pairs`.
    pub forwards: usize,
    pub attention_pairs: u64,
    pub trace: DecodeTrace,
}

impl DecodeResult {
    pub fn committed_tokens(&self) -> usize {
        self.trace.decode_iteration_of.iter().filter(|d| d.is_some()).count()
    }
}

/// Per-row confidence: the maximum probability of the softmax taken over
/// the vocabulary with the mask token excluded, plus the argmax token from
/// the same restricted set.
pub fn confidence_scores(logits: &RealMatrix, mask_token: Token) -> Vec<(f64, Token)> {
    let mut out = Vec::with_capacity(logits.rows);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let mut max_logit = f64::NEG_INFINITY;
        for (v, &l) in row.iter().enumerate() {
            if v != mask_token as usize && l > max_logit {
                max_logit = l;
            }
        }
        let mut denom = 0.0;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (v, &l) in row.iter().enumerate() {
            if v == mask_token as usize {
                continue;
            }
            denom += (l - max_logit).exp();
            if l > best.1 {
                best = (v, l);
            }
        }
        out.push(((best.1 - max_logit).exp() / denom, best.0 as Token));
    }
    out
}

/// Selects which remaining positions of a block to commit this pass.
///
/// Semi-activated blocks take everything at or above the confidence
/// threshold (possibly nothing). Fully activated blocks lower the
/// threshold to the k'-th largest confidence with k' = max(1,
/// floor(remaining / n)), guaranteeing progress every pass.
pub fn select_positions(
    scores: &[(usize, f64)],
    state: BlockState,
    cfg: &DecodeConfig,
) -> Vec<usize> {
    match state {
        BlockState::SemiActivated => scores
            .iter()
            .filter(|(_, c)| *c >= cfg.tau_conf)
            .map(|(p, _)| *p)
            .collect(),
        BlockState::FullyActivated => {
            let k = (scores.len() / cfg.log_factor).max(1);
            let mut confs: Vec<f64> = scores.iter().map(|(_, c)| *c).collect();
            confs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let kth = confs[k - 1];
            let tau = cfg.tau_conf.min(kth);
            scores.iter().filter(|(_, c)| *c >= tau).map(|(p, _)| *p).collect()
        }
        BlockState::Pending | BlockState::Complete => Vec::new(),
    }
}
