//! Shared fixtures for integration tests: a small random model.

use blockpipe::diffusion::BlockLayout;
use blockpipe::model::{init_weights, ModelBundle, ModelConfig};
use blockpipe::tokens::TokenSeq;

pub const COND_LEN: usize = 4;
pub const REGION_LEN: usize = 8;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        mask_token: 20,
        eoa_token: Some(21),
        max_len: 32,
        cond_len: COND_LEN,
        layers: 2,
        heads: 2,
        model_dim: 8,
        adapter_rank: 0,
    }
}

pub fn tiny_bundle(seed: u64) -> ModelBundle {
    ModelBundle::base(init_weights(&tiny_config(), seed).unwrap())
}

pub fn tiny_layout(k: usize) -> BlockLayout {
    BlockLayout::for_region(k, COND_LEN, REGION_LEN).unwrap()
}

pub fn tiny_cond(seed: u64) -> TokenSeq {
    TokenSeq::new((0..COND_LEN as u32).map(|i| (i * 3 + seed as u32) % 20).collect())
}

#[allow(dead_code)]
pub fn tiny_action(seed: u64) -> TokenSeq {
    TokenSeq::new((0..REGION_LEN as u32).map(|i| (i * 7 + seed as u32 + 1) % 20).collect())
}
