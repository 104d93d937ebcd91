//! Forward corruption processes: uniform masking and block-wise
//! monotone-noise (diffusion forcing) corruption.
//!
//! All corruption is reproducible from (inputs, seed); each call owns its
//! seeded generator. Positions are drawn in sequence order so that the
//! single-block forcing case consumes the exact same random stream as plain
//! uniform corruption.

use crate::error::{Error, Result};
use crate::tokens::{Token, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Contiguous equal-size blocks covering the action region.
///
/// Block `i` (0-based) covers absolute positions
/// `region_start + i*block_size .. region_start + (i+1)*block_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub block_size: usize,
    pub num_blocks: usize,
    pub region_start: usize,
}

impl BlockLayout {
    pub fn new(block_size: usize, num_blocks: usize, region_start: usize) -> Result<Self> {
        if block_size == 0 || num_blocks == 0 {
            return Err(Error::InvalidInput(
                "block layout requires block_size >= 1 and num_blocks >= 1".into(),
            ));
        }
        Ok(Self { block_size, num_blocks, region_start })
    }

    /// Splits a region of `region_len` tokens into blocks of size `k`.
    pub fn for_region(k: usize, region_start: usize, region_len: usize) -> Result<Self> {
        if k == 0 || region_len == 0 || region_len % k != 0 {
            return Err(Error::InvalidInput(format!(
                "region length {region_len} is not a positive multiple of block size {k}"
            )));
        }
        Self::new(k, region_len / k, region_start)
    }

    pub fn region_len(&self) -> usize {
        self.block_size * self.num_blocks
    }

    pub fn region_end(&self) -> usize {
        self.region_start + self.region_len()
    }

    /// Absolute position range of block `i`.
    pub fn abs_range(&self, block: usize) -> std::ops::Range<usize> {
        let lo = self.region_start + block * self.block_size;
        lo..lo + self.block_size
    }

    /// Region-relative position range of block `i`.
    pub fn rel_range(&self, block: usize) -> std::ops::Range<usize> {
        let lo = block * self.block_size;
        lo..lo + self.block_size
    }

    /// Block index of a region-relative position.
    pub fn block_of_rel(&self, rel_pos: usize) -> usize {
        rel_pos / self.block_size
    }

    /// Block index of an absolute position, if it lies in the region.
    pub fn block_of_abs(&self, pos: usize) -> Option<usize> {
        if pos < self.region_start || pos >= self.region_end() {
            return None;
        }
        Some((pos - self.region_start) / self.block_size)
    }
}

/// Strictly increasing per-block noise levels t_1 < ... < t_N in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidInput("empty noise schedule".into()));
        }
        for (i, &t) in levels.iter().enumerate() {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidInput(format!("noise level {t} at {i} outside (0,1]")));
            }
            if i > 0 && levels[i - 1] >= t {
                return Err(Error::InvalidInput(format!(
                    "noise schedule not strictly increasing at {i}: {} >= {t}",
                    levels[i - 1]
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Output of a corruption pass over the action region.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionResult {
    pub corrupted: TokenSeq,
    /// Region-relative masked positions, ascending.
    pub masked_set: Vec<usize>,
}

/// Mask ratio as a function of the noise level. Linear schedule.
pub fn gamma_of_t(t: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidInput(format!("noise level {t} outside (0,1]")));
    }
    Ok(t)
}

/// Masks each position independently with probability `gamma`.
pub fn corrupt(seq: &TokenSeq, gamma: f64, seed: u64, mask_token: Token) -> Result<CorruptionResult> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidInput(format!("mask ratio {gamma} outside (0,1]")));
    }
    if seq.contains(mask_token) {
        return Err(Error::InvalidInput("sequence to corrupt already contains mask tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(bernoulli_mask(seq, mask_token, &mut rng, |_| gamma))
}

/// Diffusion-forcing corruption: positions in block i are masked
/// independently with probability gamma_of_t(t_i).
pub fn forcing_corrupt(
    seq: &TokenSeq,
    layout: &BlockLayout,
    sched: &NoiseSchedule,
    seed: u64,
    mask_token: Token,
) -> Result<CorruptionResult> {
    if sched.len() != layout.num_blocks {
        return Err(Error::InvalidInput(format!(
            "schedule length {} != num_blocks {}",
            sched.len(),
            layout.num_blocks
        )));
    }
    if seq.len() != layout.region_len() {
        return Err(Error::InvalidInput(format!(
            "sequence length {} != region length {}",
            seq.len(),
            layout.region_len()
        )));
    }
    if seq.contains(mask_token) {
        return Err(Error::InvalidInput("sequence to corrupt already contains mask tokens".into()));
    }
    let gammas: Vec<f64> = sched
        .levels()
        .iter()
        .map(|&t| gamma_of_t(t))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(bernoulli_mask(seq, mask_token, &mut rng, |pos| {
        gammas[layout.block_of_rel(pos)]
    }))
}

fn bernoulli_mask(
    seq: &TokenSeq,
    mask_token: Token,
    rng: &mut ChaCha8Rng,
    gamma_at: impl Fn(usize) -> f64,
) -> CorruptionResult {
    let mut corrupted = seq.clone();
    let mut masked_set = Vec::new();
    for pos in 0..seq.len() {
        let u: f64 = rng.gen();
        if u < gamma_at(pos) {
            corrupted.set(pos, mask_token);
            masked_set.push(pos);
        }
    }
    CorruptionResult { corrupted, masked_set }
}

/// Draws N noise levels uniformly from (0,1], sorted ascending, with ties
/// nudged apart by minimal f64 increments.
pub fn sample_schedule(n: usize, seed: u64) -> Result<NoiseSchedule> {
    if n == 0 {
        return Err(Error::InvalidInput("schedule length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels: Vec<f64> = (0..n).map(|_| 1.0 - rng.gen::<f64>()).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for i in 1..n {
        if levels[i] <= levels[i - 1] {
            levels[i] = levels[i - 1].next_up();
        }
    }
    // If the up-nudges pushed past 1.0, walk back down from the top.
    if levels[n - 1] > 1.0 {
        levels[n - 1] = 1.0;
        for i in (0..n - 1).rev() {
            if levels[i] >= levels[i + 1] {
                levels[i] = levels[i + 1].next_down();
            }
        }
    }
    NoiseSchedule::new(levels)
}
