//! Model configuration, dense weights, low-rank adapters, deterministic
//! initialization, and the checkpoint format (JSON manifest + little-endian
//! f64 blob in manifest order).

use crate::error::{Error, Result};
use crate::numerics::RealMatrix;
use crate::tokens::Token;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub mask_token: Token,
    pub eoa_token: Option<Token>,
    pub max_len: usize,
    pub cond_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub adapter_rank: usize,
}

impl Default for ModelConfig {
    /// Toy defaults: 256 action bins plus mask, EOA, and two reserved ids.
    /// Sized to train to high accuracy on the synthetic suite in minutes on
    /// a small CPU while exercising every mechanism.
    fn default() -> Self {
        Self {
            vocab_size: 260,
            mask_token: 256,
            eoa_token: Some(257),
            max_len: 128,
            cond_len: 16,
            layers: 4,
            heads: 4,
            model_dim: 64,
            adapter_rank: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.mask_token as usize) >= self.vocab_size {
            return Err(Error::Config("mask token must be < vocab_size".into()));
        }
        if let Some(eoa) = self.eoa_token {
            if (eoa as usize) >= self.vocab_size || eoa == self.mask_token {
                return Err(Error::Config("eoa token must be < vocab_size and distinct from mask".into()));
            }
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config("model_dim must be a positive multiple of heads".into()));
        }
        if self.layers == 0 || self.max_len == 0 || self.cond_len >= self.max_len {
            return Err(Error::Config("need layers >= 1 and cond_len < max_len".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        2 * self.model_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_g: RealMatrix,
    pub ln1_b: RealMatrix,
    pub wq: RealMatrix,
    pub wk: RealMatrix,
    pub wv: RealMatrix,
    pub wo: RealMatrix,
    pub ln2_g: RealMatrix,
    pub ln2_b: RealMatrix,
    pub ff_w1: RealMatrix,
    pub ff_b1: RealMatrix,
    pub ff_w2: RealMatrix,
    pub ff_b2: RealMatrix,
}

/// Dense transformer weights. Shapes are fixed by the config.
#[derive(Debug, Clone)]
pub struct Weights {
    pub config: ModelConfig,
    pub tok_emb: RealMatrix,
    pub pos_emb: RealMatrix,
    pub layers: Vec<LayerWeights>,
    pub ln_f_g: RealMatrix,
    pub ln_f_b: RealMatrix,
    pub head_w: RealMatrix,
    pub head_b: RealMatrix,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> RealMatrix {
    let s = 1.0 / (fan_in as f64).sqrt();
    let mut m = RealMatrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.gen_range(-s..s);
    }
    m
}

fn ones(cols: usize) -> RealMatrix {
    RealMatrix::from_vec(1, cols, vec![1.0; cols]).unwrap()
}

/// Deterministic scaled-uniform initialization: same seed, same bits.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<Weights> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let ff = cfg.ff_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok_emb = uniform(&mut rng, cfg.vocab_size, d, d);
    let pos_emb = uniform(&mut rng, cfg.max_len, d, d);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        layers.push(LayerWeights {
            ln1_g: ones(d),
            ln1_b: RealMatrix::zeros(1, d),
            wq: uniform(&mut rng, d, d, d),
            wk: uniform(&mut rng, d, d, d),
            wv: uniform(&mut rng, d, d, d),
            wo: uniform(&mut rng, d, d, d),
            ln2_g: ones(d),
            ln2_b: RealMatrix::zeros(1, d),
            ff_w1: uniform(&mut rng, d, ff, d),
            ff_b1: RealMatrix::zeros(1, ff),
            ff_w2: uniform(&mut rng, ff, d, ff),
            ff_b2: RealMatrix::zeros(1, d),
        });
    }
    let ln_f_g = ones(d);
    let ln_f_b = RealMatrix::zeros(1, d);
    let head_w = uniform(&mut rng, d, cfg.vocab_size, d);
    let head_b = RealMatrix::zeros(1, cfg.vocab_size);
    Ok(Weights { config: *cfg, tok_emb, pos_emb, layers, ln_f_g, ln_f_b, head_w, head_b })
}

impl Weights {
    /// All tensors in fixed registry order (checkpoint and gradient order).
    pub fn tensors(&self) -> Vec<(String, &RealMatrix)> {
        let mut out: Vec<(String, &RealMatrix)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_g"), &l.ln1_g));
            out.push((format!("layer{i}.ln1_b"), &l.ln1_b));
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.ln2_g"), &l.ln2_g));
            out.push((format!("layer{i}.ln2_b"), &l.ln2_b));
            out.push((format!("layer{i}.ff_w1"), &l.ff_w1));
            out.push((format!("layer{i}.ff_b1"), &l.ff_b1));
            out.push((format!("layer{i}.ff_w2"), &l.ff_w2));
            out.push((format!("layer{i}.ff_b2"), &l.ff_b2));
        }
        out.push(("ln_f_g".into(), &self.ln_f_g));
        out.push(("ln_f_b".into(), &self.ln_f_b));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut RealMatrix> {
        let mut out: Vec<&mut RealMatrix> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in self.layers.iter_mut() {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            out.push(&mut l.ff_w1);
            out.push(&mut l.ff_b1);
            out.push(&mut l.ff_w2);
            out.push(&mut l.ff_b2);
        }
        out.push(&mut self.ln_f_g);
        out.push(&mut self.ln_f_b);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub q_a: RealMatrix,
    pub q_b: RealMatrix,
    pub v_a: RealMatrix,
    pub v_b: RealMatrix,
}

/// Low-rank adapters on the attention query/value projections and the
/// output head. When active, each adapted matrix gains `A * B`.
#[derive(Debug, Clone)]
pub struct AdapterWeights {
    pub rank: usize,
    pub layers: Vec<LayerAdapters>,
    pub head_a: RealMatrix,
    pub head_b: RealMatrix,
}

/// A initialized scaled-uniform, B at zero, so fresh adapters contribute
/// nothing until trained.
pub fn init_adapters(cfg: &ModelConfig, seed: u64) -> Result<Option<AdapterWeights>> {
    cfg.validate()?;
    let r = cfg.adapter_rank;
    if r == 0 {
        return Ok(None);
    }
    let d = cfg.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        layers.push(LayerAdapters {
            q_a: uniform(&mut rng, d, r, d),
            q_b: RealMatrix::zeros(r, d),
            v_a: uniform(&mut rng, d, r, d),
            v_b: RealMatrix::zeros(r, d),
        });
    }
    let head_a = uniform(&mut rng, d, r, d);
    let head_b = RealMatrix::zeros(r, cfg.vocab_size);
    Ok(Some(AdapterWeights { rank: r, layers, head_a, head_b }))
}

impl AdapterWeights {
    pub fn tensors(&self) -> Vec<(String, &RealMatrix)> {
        let mut out: Vec<(String, &RealMatrix)> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.adapter_q_a"), &l.q_a));
            out.push((format!("layer{i}.adapter_q_b"), &l.q_b));
            out.push((format!("layer{i}.adapter_v_a"), &l.v_a));
            out.push((format!("layer{i}.adapter_v_b"), &l.v_b));
        }
        out.push(("head_adapter_a".into(), &self.head_a));
        out.push(("head_adapter_b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut RealMatrix> {
        let mut out: Vec<&mut RealMatrix> = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(&mut l.q_a);
            out.push(&mut l.q_b);
            out.push(&mut l.v_a);
            out.push(&mut l.v_b);
        }
        out.push(&mut self.head_a);
        out.push(&mut self.head_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }
}

/// Weights plus optional adapters. `adapters_active` selects the student
/// view (adapters applied) versus the teacher view (adapters bypassed).
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub weights: Weights,
    pub adapters: Option<AdapterWeights>,
    pub adapters_active: bool,
}

impl ModelBundle {
    pub fn base(weights: Weights) -> Self {
        Self { weights, adapters: None, adapters_active: false }
    }

    pub fn with_adapters(weights: Weights, adapters: Option<AdapterWeights>) -> Self {
        let adapters_active = adapters.is_some();
        Self { weights, adapters, adapters_active }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    step: u64,
    adapters: bool,
    adapter_rank: usize,
    tensors: Vec<TensorMeta>,
}

fn manifest_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("json")
}

fn blob_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("bin")
}

/// Writes `<prefix>.json` (manifest) and `<prefix>.bin` (f64 LE blob).
pub fn save_checkpoint(bundle: &ModelBundle, step: u64, prefix: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &RealMatrix)> = bundle.weights.tensors();
    if let Some(a) = &bundle.adapters {
        tensors.extend(a.tensors());
    }
    let manifest = Manifest {
        version: 1,
        config: bundle.weights.config,
        step,
        adapters: bundle.adapters.is_some(),
        adapter_rank: bundle.adapters.as_ref().map_or(0, |a| a.rank),
        tensors: tensors
            .iter()
            .map(|(n, m)| TensorMeta { name: n.clone(), rows: m.rows, cols: m.cols })
            .collect(),
    };
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path(prefix), json)?;
    let mut blob = std::io::BufWriter::new(std::fs::File::create(blob_path(prefix))?);
    for (_, m) in &tensors {
        for v in &m.data {
            blob.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads a checkpoint written by `save_checkpoint`. Returns the bundle and
/// the training step recorded in the manifest.
pub fn load_checkpoint(prefix: &Path) -> Result<(ModelBundle, u64)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(prefix))?)?;
    if manifest.version != 1 {
        return Err(Error::Config(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let cfg = manifest.config;
    cfg.validate()?;
    let mut weights = init_weights(&cfg, 0)?;
    let mut adapters = if manifest.adapters { init_adapters(&cfg, 0)? } else { None };
    if manifest.adapters && adapters.is_none() {
        return Err(Error::Config("manifest declares adapters but adapter_rank is 0".into()));
    }

    let mut blob = Vec::new();
    std::fs::File::open(blob_path(prefix))?.read_to_end(&mut blob)?;
    let expected: usize = manifest.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if blob.len() != expected {
        return Err(Error::Config(format!(
            "checkpoint blob is {} bytes, manifest expects {expected}",
            blob.len()
        )));
    }

    let mut dest: Vec<&mut RealMatrix> = weights.tensors_mut();
    if let Some(a) = adapters.as_mut() {
        dest.extend(a.tensors_mut());
    }
    if dest.len() != manifest.tensors.len() {
        return Err(Error::Config(format!(
            "manifest has {} tensors, model expects {}",
            manifest.tensors.len(),
            dest.len()
        )));
    }
    let mut offset = 0usize;
    for (meta, m) in manifest.tensors.iter().zip(dest.into_iter()) {
        if meta.rows != m.rows || meta.cols != m.cols {
            return Err(Error::Config(format!(
                "tensor {} has shape {}x{}, expected {}x{}",
                meta.name, meta.rows, meta.cols, m.rows, m.cols
            )));
        }
        for v in m.data.iter_mut() {
            let bytes: [u8; 8] = blob[offset..offset + 8].try_into().unwrap();
            *v = f64::from_le_bytes(bytes);
            offset += 8;
        }
    }
    let has_adapters = adapters.is_some();
    Ok((ModelBundle { weights, adapters, adapters_active: has_adapters }, manifest.step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            mask_token: 16,
            eoa_token: Some(17),
            max_len: 24,
            cond_len: 4,
            layers: 2,
            heads: 2,
            model_dim: 8,
            adapter_rank: 3,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = small_cfg();
        let a = init_weights(&cfg, 7).unwrap();
        let b = init_weights(&cfg, 7).unwrap();
        for ((_, x), (_, y)) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(x.data, y.data);
        }
        let c = init_weights(&cfg, 8).unwrap();
        let differs = a
            .tensors()
            .iter()
            .zip(c.tensors().iter())
            .any(|((_, x), (_, y))| x.data != y.data);
        assert!(differs);
    }

    #[test]
    fn rank_zero_allocates_no_adapters() {
        let cfg = ModelConfig { adapter_rank: 0, ..small_cfg() };
        assert!(init_adapters(&cfg, 1).unwrap().is_none());
    }

    #[test]
    fn adapters_b_start_at_zero() {
        let cfg = small_cfg();
        let a = init_adapters(&cfg, 1).unwrap().unwrap();
        assert!(a.layers.iter().all(|l| l.q_b.data.iter().all(|&v| v == 0.0)));
        assert!(a.head_b.data.iter().all(|&v| v == 0.0));
        assert!(a.layers[0].q_a.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.mask_token = 20;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.model_dim = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.eoa_token = Some(16);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = small_cfg();
        let weights = init_weights(&cfg, 3).unwrap();
        let adapters = init_adapters(&cfg, 4).unwrap();
        let bundle = ModelBundle::with_adapters(weights, adapters);
        let dir = std::env::temp_dir().join("blockpipe_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("model");
        save_checkpoint(&bundle, 123, &prefix).unwrap();
        let (loaded, step) = load_checkpoint(&prefix).unwrap();
        assert_eq!(step, 123);
        assert_eq!(loaded.weights.config, cfg);
        for ((_, x), (_, y)) in bundle.weights.tensors().iter().zip(loaded.weights.tensors().iter()) {
            assert_eq!(x.data, y.data);
        }
        let la = loaded.adapters.as_ref().unwrap();
        let ba = bundle.adapters.as_ref().unwrap();
        for ((_, x), (_, y)) in ba.tensors().iter().zip(la.tensors().iter()) {
            assert_eq!(x.data, y.data);
        }
    }
}
