//! Synthetic action-chunk tasks with deterministic ground truth,
//! uniform-bin action tokenization, and success evaluation.
//!
//! Ground truth is always a pure function of the condition tokens: episode
//! generation first draws the condition, then derives the truth chunk from
//! it, so the two can never drift apart.

use crate::error::{Error, Result};
use crate::numerics::RealMatrix;
use crate::tokens::{Token, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Uniform-bin action tokenizer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub bins: usize,
    pub range_lo: f64,
    pub range_hi: f64,
    /// Action dimensions per timestep (D).
    pub action_dims: usize,
    /// Timesteps per chunk (T).
    pub chunk_steps: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { bins: 256, range_lo: -1.0, range_hi: 1.0, action_dims: 7, chunk_steps: 8 }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config("tokenizer needs at least 2 bins".into()));
        }
        if !(self.range_lo < self.range_hi) {
            return Err(Error::Config("tokenizer range_lo must be < range_hi".into()));
        }
        if self.action_dims == 0 || self.chunk_steps == 0 {
            return Err(Error::Config("action_dims and chunk_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Token sequence length L = T * D.
    pub fn seq_len(&self) -> usize {
        self.chunk_steps * self.action_dims
    }

    pub fn bin_width(&self) -> f64 {
        (self.range_hi - self.range_lo) / self.bins as f64
    }

    pub fn bin_of(&self, v: f64) -> Token {
        let v = v.clamp(self.range_lo, self.range_hi);
        let ratio = (v - self.range_lo) / (self.range_hi - self.range_lo);
        ((ratio * self.bins as f64).floor() as usize).min(self.bins - 1) as Token
    }

    pub fn center_of(&self, bin: Token) -> f64 {
        self.range_lo + (bin as f64 + 0.5) * self.bin_width()
    }
}

/// T x D matrix of continuous controls, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub values: RealMatrix,
}

impl ActionChunk {
    pub fn new(values: RealMatrix) -> Self {
        Self { values }
    }

    pub fn steps(&self) -> usize {
        self.values.rows
    }

    pub fn dims(&self) -> usize {
        self.values.cols
    }
}

/// Uniform binning: clamp to range, floor into bins, top edge maps to the
/// last bin. Flattening is time-major.
pub fn tokenize_actions(chunk: &ActionChunk, cfg: &TokenizerConfig) -> TokenSeq {
    let mut out = Vec::with_capacity(chunk.values.data.len());
    for &v in &chunk.values.data {
        out.push(cfg.bin_of(v));
    }
    TokenSeq::new(out)
}

/// Inverse of uniform binning via bin centers.
pub fn detokenize_actions(seq: &TokenSeq, cfg: &TokenizerConfig) -> Result<ActionChunk> {
    if seq.len() != cfg.seq_len() {
        return Err(Error::InvalidInput(format!(
            "token sequence length {} != T*D = {}",
            seq.len(),
            cfg.seq_len()
        )));
    }
    let mut data = Vec::with_capacity(seq.len());
    for &t in seq.iter() {
        if (t as usize) >= cfg.bins {
            return Err(Error::InvalidToken(format!("token {t} is not a bin id (bins={})", cfg.bins)));
        }
        data.push(cfg.center_of(t));
    }
    Ok(ActionChunk::new(RealMatrix::from_vec(cfg.chunk_steps, cfg.action_dims, data)?))
}

/// Task family. `Integrate` induces a strict temporal dependency: the truth
/// at step t is a running sum of per-step deltas up to t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskFamily {
    Copy,
    Integrate,
    Reach,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub cond_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(family: TaskFamily, cond_len: usize, seed: u64) -> Self {
        Self { family, cond_len, seed }
    }
}

/// Number of distinct start anchors used by the Integrate family.
const INTEGRATE_ANCHORS: usize = 16;
/// Per-step delta range (in bin units) for the Integrate family.
const INTEGRATE_DELTA_MAX: i64 = 2;
/// Condition-token encoding of a delta: base + (delta + max) * stride.
const INTEGRATE_DELTA_BASE: i64 = 8;
const INTEGRATE_DELTA_STRIDE: i64 = 4;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic per-episode seed derived from a base seed and an index.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(0x517cc1b727220a95)))
}

/// Integrate-family anchor bins: evenly spread over the middle half of the
/// bin range so that running sums rarely clamp.
fn integrate_anchor(cfg: &TokenizerConfig, idx: usize) -> i64 {
    let lo = cfg.bins as i64 / 4;
    let span = (cfg.bins as i64 / 2).max(1);
    lo + idx as i64 * span / INTEGRATE_ANCHORS as i64
}

fn integrate_filler(cfg: &TokenizerConfig) -> Token {
    (cfg.bins as Token).saturating_sub(1)
}

/// Recovers the truth chunk from the condition tokens alone.
pub fn truth_from_condition(cond: &TokenSeq, family: TaskFamily, cfg: &TokenizerConfig) -> Result<ActionChunk> {
    let t_steps = cfg.chunk_steps;
    let dims = cfg.action_dims;
    let mut values = RealMatrix::zeros(t_steps, dims);
    match family {
        TaskFamily::Copy => {
            for t in 0..t_steps {
                for d in 0..dims {
                    let bin = cond.get((t * dims + d) % cond.len());
                    values.set(t, d, cfg.center_of(bin));
                }
            }
        }
        TaskFamily::Integrate => {
            if cond.len() < t_steps + dims {
                return Err(Error::InvalidInput(format!(
                    "integrate condition needs at least T+D={} tokens, got {}",
                    t_steps + dims,
                    cond.len()
                )));
            }
            let mut running: i64 = 0;
            for t in 0..t_steps {
                let delta = (cond.get(t) as i64 - INTEGRATE_DELTA_BASE) / INTEGRATE_DELTA_STRIDE
                    - INTEGRATE_DELTA_MAX;
                running += delta;
                for d in 0..dims {
                    let start = cond.get(t_steps + d) as i64;
                    let bin = (start + running).clamp(0, cfg.bins as i64 - 1);
                    values.set(t, d, cfg.center_of(bin as Token));
                }
            }
        }
        TaskFamily::Reach => {
            if cond.len() < 2 * dims {
                return Err(Error::InvalidInput(format!(
                    "reach condition needs at least 2*D={} tokens, got {}",
                    2 * dims,
                    cond.len()
                )));
            }
            for d in 0..dims {
                let start = cfg.center_of(cond.get(d));
                let target = cfg.center_of(cond.get(dims + d));
                for t in 0..t_steps {
                    let frac = if t_steps > 1 { t as f64 / (t_steps - 1) as f64 } else { 0.0 };
                    values.set(t, d, start + (target - start) * frac);
                }
            }
        }
    }
    Ok(ActionChunk::new(values))
}

/// Generates one episode: a condition token sequence plus its ground-truth
/// chunk. Deterministic in (spec, seed).
pub fn generate_episode(spec: &TaskSpec, cfg: &TokenizerConfig, seed: u64) -> Result<(TokenSeq, ActionChunk)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed) ^ splitmix64(seed));
    let t_steps = cfg.chunk_steps;
    let dims = cfg.action_dims;
    let mut cond = vec![0 as Token; spec.cond_len];
    match spec.family {
        TaskFamily::Copy => {
            for c in cond.iter_mut() {
                *c = rng.gen_range(0..cfg.bins as u32);
            }
        }
        TaskFamily::Integrate => {
            if spec.cond_len < t_steps + dims {
                return Err(Error::Config(format!(
                    "integrate needs cond_len >= T+D = {}",
                    t_steps + dims
                )));
            }
            for t in 0..t_steps {
                let delta = rng.gen_range(-INTEGRATE_DELTA_MAX..=INTEGRATE_DELTA_MAX);
                cond[t] = (INTEGRATE_DELTA_BASE + (delta + INTEGRATE_DELTA_MAX) * INTEGRATE_DELTA_STRIDE)
                    as Token;
            }
            for d in 0..dims {
                let anchor = integrate_anchor(cfg, rng.gen_range(0..INTEGRATE_ANCHORS));
                cond[t_steps + d] = anchor as Token;
            }
            for c in cond.iter_mut().skip(t_steps + dims) {
                *c = integrate_filler(cfg);
            }
        }
        TaskFamily::Reach => {
            if spec.cond_len < 2 * dims {
                return Err(Error::Config(format!("reach needs cond_len >= 2*D = {}", 2 * dims)));
            }
            for c in cond.iter_mut().take(2 * dims) {
                *c = rng.gen_range(0..cfg.bins as u32);
            }
            for c in cond.iter_mut().skip(2 * dims) {
                *c = integrate_filler(cfg);
            }
        }
    }
    let cond = TokenSeq::new(cond);
    let truth = truth_from_condition(&cond, spec.family, cfg)?;
    Ok((cond, truth))
}

/// Evaluation of a decoded token sequence against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    /// Every decoded token within one bin of the truth token.
    pub success: bool,
    /// Fraction of exact token matches.
    pub token_match_rate: f64,
    /// Max |decoded value - truth value| after detokenization; infinite if a
    /// decoded token is not a bin id.
    pub max_action_error: f64,
}

/// Success iff every decoded token is within +-1 bin of the truth token.
/// Tokens outside the bin range (e.g. a stray EOA) simply fail the bound.
pub fn evaluate_success(
    decoded: &TokenSeq,
    truth: &ActionChunk,
    cfg: &TokenizerConfig,
    mask_token: Token,
) -> Result<EpisodeEval> {
    let masked = decoded.count_of(mask_token);
    if masked > 0 {
        return Err(Error::IncompleteDecode(masked));
    }
    let truth_tokens = tokenize_actions(truth, cfg);
    if decoded.len() != truth_tokens.len() {
        return Err(Error::InvalidInput(format!(
            "decoded length {} != truth length {}",
            decoded.len(),
            truth_tokens.len()
        )));
    }
    let mut success = true;
    let mut matches = 0usize;
    let mut max_err: f64 = 0.0;
    for i in 0..decoded.len() {
        let d = decoded.get(i) as i64;
        let t = truth_tokens.get(i) as i64;
        if d == t {
            matches += 1;
        }
        if (d - t).abs() > 1 {
            success = false;
        }
        if (d as usize) < cfg.bins {
            let err = (cfg.center_of(decoded.get(i)) - truth.values.data[i]).abs();
            max_err = max_err.max(err);
        } else {
            success = false;
            max_err = f64::INFINITY;
        }
    }
    Ok(EpisodeEval {
        success,
        token_match_rate: matches as f64 / decoded.len() as f64,
        max_action_error: max_err,
    })
}

/// One dataset line: condition tokens, truth tokens, family, seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub family: TaskFamily,
    pub seed: u64,
    pub cond: Vec<Token>,
    pub truth_tokens: Vec<Token>,
}

/// Writes episodes as JSON lines.
pub fn write_dataset_jsonl(
    path: &std::path::Path,
    spec: &TaskSpec,
    cfg: &TokenizerConfig,
    count: usize,
    base_seed: u64,
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..count {
        let seed = episode_seed(base_seed, i as u64);
        let (cond, truth) = generate_episode(spec, cfg, seed)?;
        let rec = EpisodeRecord {
            family: spec.family,
            seed,
            cond: cond.as_slice().to_vec(),
            truth_tokens: tokenize_actions(&truth, cfg).as_slice().to_vec(),
        };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
