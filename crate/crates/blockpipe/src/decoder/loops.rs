//! The pipelined parallel decoder (confidence-guided block decoding with
//! logarithmic scheduling) and the strict sequential block-diffusion
//! decoder. Both run against any `DecodeBackend`.
//!
//! Cache discipline: a block's KV is final only once every block before it
//! is final, so the cache frontier advances over the contiguous prefix of
//! blocks that were already complete when the current pass ran. Blocks past
//! the frontier stay in the query set and are recomputed each pass.

use super::backend::{BlockCausalBackend, DecodeBackend};
use super::{BlockState, DecodeConfig, DecodeResult, DecodeTrace, IterationCost, StateTransition};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tokens::{Token, TokenSeq};

struct Session {
    tokens: TokenSeq,
    states: Vec<BlockState>,
    decoded: Vec<usize>,
    complete_since: Vec<Option<usize>>,
    cancelled: Vec<bool>,
    appended: usize,
    cached_upto: usize,
    eoa_cut: Option<usize>,
    trace: DecodeTrace,
}

impl Session {
    fn new(cfg: &DecodeConfig, mask_token: Token) -> Self {
        let n = cfg.layout.num_blocks;
        let mut trace = DecodeTrace::default();
        trace.decode_iteration_of = vec![None; cfg.layout.region_len()];
        trace
            .state_transitions
            .push(StateTransition { block: 0, iteration: 0, state: BlockState::FullyActivated });
        let mut states = vec![BlockState::Pending; n];
        // The first block has no predecessor; it is born fully activated.
        states[0] = BlockState::FullyActivated;
        Self {
            tokens: TokenSeq::filled(cfg.layout.region_len(), mask_token),
            states,
            decoded: vec![0; n],
            complete_since: vec![None; n],
            cancelled: vec![false; n],
            appended: 1,
            cached_upto: 0,
            eoa_cut: None,
            trace,
        }
    }

    fn ratio(&self, block: usize, k: usize) -> f64 {
        self.decoded[block] as f64 / k as f64
    }

    fn all_resolved(&self) -> bool {
        self.states
            .iter()
            .zip(self.cancelled.iter())
            .all(|(s, &c)| c || *s == BlockState::Complete)
    }

    /// Region positions of all appended, not-yet-cached, non-cancelled
    /// blocks: the query set of one pass.
    fn query_positions(&self, cfg: &DecodeConfig) -> Vec<usize> {
        let mut out = Vec::new();
        for b in self.cached_upto..self.appended {
            if !self.cancelled[b] {
                out.extend(cfg.layout.rel_range(b));
            }
        }
        out
    }

    /// Advance the cache frontier over blocks whose tokens were final
    /// before this iteration's forward ran.
    fn advance_frontier<B: DecodeBackend>(
        &mut self,
        backend: &mut B,
        cfg: &DecodeConfig,
        iteration: usize,
    ) -> Result<()> {
        let mut newly = Vec::new();
        while self.cached_upto < self.appended
            && self.states[self.cached_upto] == BlockState::Complete
            && self.complete_since[self.cached_upto].is_some_and(|s| s < iteration)
        {
            newly.extend(cfg.layout.rel_range(self.cached_upto));
            self.cached_upto += 1;
        }
        backend.commit_cache(&newly)
    }

    /// Trailing cache fill: one extra pass over complete-but-uncached
    /// blocks so the cache covers every complete block.
    fn finalize<B: DecodeBackend>(&mut self, backend: &mut B, cfg: &DecodeConfig) -> Result<()> {
        let mut rest = Vec::new();
        let mut upto = self.cached_upto;
        while upto < cfg.layout.num_blocks && self.states[upto] == BlockState::Complete {
            rest.extend(cfg.layout.rel_range(upto));
            upto += 1;
        }
        if !rest.is_empty() {
            backend.step(&self.tokens, &rest)?;
            backend.commit_cache(&rest)?;
            self.cached_upto = upto;
        }
        Ok(())
    }

    fn commit(&mut self, pos: usize, token: Token, iteration: usize, cfg: &DecodeConfig, eoa: Option<Token>) {
        self.tokens.set(pos, token);
        let b = cfg.layout.block_of_rel(pos);
        self.decoded[b] += 1;
        self.trace.decode_iteration_of[pos] = Some(iteration);
        if !cfg.fixed_length {
            if let Some(eoa_token) = eoa {
                if token == eoa_token {
                    self.eoa_cut = Some(self.eoa_cut.map_or(pos, |c| c.min(pos)));
                }
            }
        }
    }

    fn mark_complete(&mut self, iteration: usize, cfg: &DecodeConfig) {
        for b in 0..self.appended {
            if self.states[b] != BlockState::Complete && self.decoded[b] == cfg.layout.block_size {
                self.states[b] = BlockState::Complete;
                self.complete_since[b] = Some(iteration);
                self.trace.state_transitions.push(StateTransition {
                    block: b,
                    iteration,
                    state: BlockState::Complete,
                });
            }
        }
        if let Some(cut) = self.eoa_cut {
            let cut_block = cfg.layout.block_of_rel(cut);
            for b in (cut_block + 1)..cfg.layout.num_blocks {
                if self.states[b] == BlockState::Pending && !self.cancelled[b] {
                    self.cancelled[b] = true;
                }
            }
        }
    }
}

/// Confidence-guided pipelined block decoding with logarithmic scheduling,
/// over any backend.
pub fn decode_pipelined_with<B: DecodeBackend>(
    backend: &mut B,
    cond: &TokenSeq,
    cfg: &DecodeConfig,
    mask_token: Token,
    eoa_token: Option<Token>,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let k = cfg.layout.block_size;
    let mut s = Session::new(cfg, mask_token);
    backend.begin(cond)?;
    let mut iterations = 0usize;
    let mut forwards = 0usize;

    while !s.all_resolved() {
        iterations += 1;
        if iterations > cfg.max_iters {
            return Err(Error::NonTermination(cfg.max_iters));
        }

        // (a) Append the next block once the tail block's decoded ratio
        // reaches the expansion threshold.
        let may_append = s.appended < cfg.layout.num_blocks
            && !s.cancelled[s.appended]
            && (cfg.fixed_length || s.eoa_cut.is_none());
        if may_append && s.ratio(s.appended - 1, k) >= cfg.tau_add {
            s.states[s.appended] = BlockState::SemiActivated;
            s.trace.state_transitions.push(StateTransition {
                block: s.appended,
                iteration: iterations,
                state: BlockState::SemiActivated,
            });
            s.appended += 1;
        }

        // (b) One forward over every appended, uncached block.
        let positions = s.query_positions(cfg);
        let pairs_before = backend.attention_pairs();
        let scores = backend.step(&s.tokens, &positions)?;
        forwards += 1;

        // (c) Commit confident tokens per active block.
        let mut commits = 0usize;
        for b in 0..s.appended {
            let state = s.states[b];
            if !matches!(state, BlockState::SemiActivated | BlockState::FullyActivated) {
                continue;
            }
            let remaining: Vec<(usize, f64)> = cfg
                .layout
                .rel_range(b)
                .filter(|&p| s.tokens.get(p) == mask_token)
                .map(|p| {
                    let qi = positions.binary_search(&p).expect("active block queried");
                    (p, scores.conf[qi])
                })
                .collect();
            if remaining.is_empty() {
                continue;
            }
            for p in super::select_positions(&remaining, state, cfg) {
                let qi = positions.binary_search(&p).expect("selected position queried");
                s.commit(p, scores.token[qi], iterations, cfg, eoa_token);
                commits += 1;
            }
        }

        // (d) Promote semi-activated blocks whose predecessor crossed the
        // activation threshold (evaluated after this iteration's commits).
        for b in 1..s.appended {
            if s.states[b] == BlockState::SemiActivated && s.ratio(b - 1, k) >= cfg.tau_act {
                s.states[b] = BlockState::FullyActivated;
                s.trace.state_transitions.push(StateTransition {
                    block: b,
                    iteration: iterations,
                    state: BlockState::FullyActivated,
                });
            }
        }

        // (e) Completions, EOA cancellation, cache frontier.
        s.mark_complete(iterations, cfg);
        s.advance_frontier(backend, cfg, iterations)?;
        s.trace.per_iteration.push(IterationCost {
            iteration: iterations,
            query_count: positions.len() as u64,
            attention_pairs: backend.attention_pairs() - pairs_before,
            commits,
        });
    }

    s.finalize(backend, cfg)?;
    Ok(DecodeResult {
        tokens: s.tokens,
        iterations,
        forwards,
        attention_pairs: backend.attention_pairs(),
        trace: s.trace,
    })
}

/// Strict sequential block diffusion: one active block at a time, commits
/// at the confidence threshold with a forced top-1 per pass.
pub fn decode_block_diffusion_with<B: DecodeBackend>(
    backend: &mut B,
    cond: &TokenSeq,
    cfg: &DecodeConfig,
    mask_token: Token,
    eoa_token: Option<Token>,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let mut s = Session::new(cfg, mask_token);
    backend.begin(cond)?;
    let mut iterations = 0usize;
    let mut forwards = 0usize;
    let mut current = 0usize;

    loop {
        // Advance to the next undecoded block, respecting an EOA stop.
        while current < cfg.layout.num_blocks
            && (s.states[current] == BlockState::Complete || s.cancelled[current])
        {
            current += 1;
        }
        if current >= cfg.layout.num_blocks {
            break;
        }
        if s.states[current] == BlockState::Pending {
            if !cfg.fixed_length && s.eoa_cut.is_some() {
                break;
            }
            s.states[current] = BlockState::FullyActivated;
            s.appended = current + 1;
            s.trace.state_transitions.push(StateTransition {
                block: current,
                iteration: iterations + 1,
                state: BlockState::FullyActivated,
            });
        }

        iterations += 1;
        if iterations > cfg.max_iters {
            return Err(Error::NonTermination(cfg.max_iters));
        }
        let positions = s.query_positions(cfg);
        let pairs_before = backend.attention_pairs();
        let scores = backend.step(&s.tokens, &positions)?;
        forwards += 1;

        let remaining: Vec<(usize, f64)> = cfg
            .layout
            .rel_range(current)
            .filter(|&p| s.tokens.get(p) == mask_token)
            .map(|p| {
                let qi = positions.binary_search(&p).expect("current block queried");
                (p, scores.conf[qi])
            })
            .collect();
        // Threshold commits, with the single most confident position forced
        // through when nothing clears the threshold.
        let mut selected: Vec<usize> = remaining
            .iter()
            .filter(|(_, c)| *c >= cfg.tau_conf)
            .map(|(p, _)| *p)
            .collect();
        if selected.is_empty() {
            let best = remaining
                .iter()
                .fold(None::<(usize, f64)>, |acc, &(p, c)| match acc {
                    Some((_, bc)) if bc >= c => acc,
                    _ => Some((p, c)),
                })
                .expect("non-complete block has remaining positions");
            selected.push(best.0);
        }
        let mut commits = 0usize;
        for p in selected {
            let qi = positions.binary_search(&p).expect("selected position queried");
            s.commit(p, scores.token[qi], iterations, cfg, eoa_token);
            commits += 1;
        }
        s.mark_complete(iterations, cfg);
        s.advance_frontier(backend, cfg, iterations)?;
        s.trace.per_iteration.push(IterationCost {
            iteration: iterations,
            query_count: positions.len() as u64,
            attention_pairs: backend.attention_pairs() - pairs_before,
            commits,
        });
    }

    s.finalize(backend, cfg)?;
    Ok(DecodeResult {
        tokens: s.tokens,
        iterations,
        forwards,
        attention_pairs: backend.attention_pairs(),
        trace: s.trace,
    })
}

/// Pipelined decoding with the real block-causal cached model.
pub fn decode_pipelined(
    bundle: &ModelBundle,
    cond: &TokenSeq,
    cfg: &DecodeConfig,
    _seed: u64,
) -> Result<DecodeResult> {
    let mcfg = bundle.weights.config;
    let mut backend = BlockCausalBackend::new(bundle, cfg.layout);
    decode_pipelined_with(&mut backend, cond, cfg, mcfg.mask_token, mcfg.eoa_token)
}

/// Strict block diffusion with the real block-causal cached model.
pub fn decode_block_diffusion(
    bundle: &ModelBundle,
    cond: &TokenSeq,
    cfg: &DecodeConfig,
    _seed: u64,
) -> Result<DecodeResult> {
    let mcfg = bundle.weights.config;
    let mut backend = BlockCausalBackend::new(bundle, cfg.layout);
    decode_block_diffusion_with(&mut backend, cond, cfg, mcfg.mask_token, mcfg.eoa_token)
}
