//! Command implementations behind the `blockpipe` binary: training,
//! distillation, benchmarking, decode-order traces, KV-similarity
//! diagnostics, and threshold sweeps. One versioned JSON document carries
//! every knob; reports re-parse losslessly from their own JSON.

use crate::decoder::{
    decode_ar, decode_block_diffusion, decode_fast_dllm_baseline, decode_pipelined,
    decode_pipelined_with, decode_vanilla_dvla, decode_vanilla_probed, BlockCausalBackend,
    DecodeConfig, DecodeResult,
};
use crate::diffusion::BlockLayout;
use crate::error::{Error, Result};
use crate::kvcache::{similarity_trace, SimilarityTrace};
use crate::model::{
    init_adapters, init_weights, load_checkpoint, save_checkpoint, ModelBundle,
    ModelConfig,
};
use crate::numerics::RealMatrix;
use crate::taskbench::{
    episode_seed, evaluate_success, generate_episode, write_dataset_jsonl,
    TaskFamily, TaskSpec, TokenizerConfig,
};
use crate::training::{
    make_episodes, masked_argmax_agreement, run_training, write_train_log_csv, Regime, TrainHooks,
    TrainLogRow, TrainOptions, EVAL_SEED_SALT,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;
const BENCH_SEED_SALT: u64 = 0x6e42_aa01_93d7_55c3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub tau_add: f64,
    pub tau_act: f64,
    pub tau_conf: f64,
    pub log_factor: usize,
    pub fixed_length: bool,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { tau_add: 0.5, tau_act: 0.7, tau_conf: 0.5, log_factor: 2, fixed_length: true }
    }
}

impl DecodeParams {
    pub fn to_config(self, layout: BlockLayout) -> DecodeConfig {
        DecodeConfig {
            tau_add: self.tau_add,
            tau_act: self.tau_act,
            tau_conf: self.tau_conf,
            log_factor: self.log_factor,
            max_iters: layout.region_len() + 2 * layout.num_blocks + 8,
            layout,
            fixed_length: self.fixed_length,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adapter_lr: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub target_accuracy: Option<f64>,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 3e-4,
            adapter_lr: 1e-3,
            eval_every: 100,
            eval_episodes: 48,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Vanilla,
    FastDllm,
    BlockDiffusion,
    Pipelined,
    Ar,
}

impl DecoderKind {
    pub fn all() -> Vec<DecoderKind> {
        vec![
            DecoderKind::Vanilla,
            DecoderKind::FastDllm,
            DecoderKind::BlockDiffusion,
            DecoderKind::Pipelined,
            DecoderKind::Ar,
        ]
    }

    fn name(&self) -> &'static str {
        match self {
            DecoderKind::Vanilla => "vanilla",
            DecoderKind::FastDllm => "fast_dllm",
            DecoderKind::BlockDiffusion => "block_diffusion",
            DecoderKind::Pipelined => "pipelined",
            DecoderKind::Ar => "ar",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPaths {
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub ar: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub tau_add: Vec<f64>,
    pub tau_act: Vec<f64>,
    pub tau_conf: Vec<f64>,
    pub log_factor: Vec<usize>,
    pub block_size: Vec<usize>,
}

/// The one configuration document. `version` is checked on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub task_family: TaskFamily,
    pub block_size: usize,
    pub decode: DecodeParams,
    pub regime: Regime,
    pub train: TrainParams,
    /// Denoising steps for the vanilla baseline; 0 means one per token.
    pub vanilla_steps: usize,
    pub bench_episodes: usize,
    pub trace_episodes: usize,
    pub trace_decoder: DecoderKind,
    pub bench_rows: Vec<DecoderKind>,
    pub checkpoints: CheckpointPaths,
    pub sweep: SweepGrid,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            tokenizer: TokenizerConfig::default(),
            task_family: TaskFamily::Integrate,
            block_size: 7,
            decode: DecodeParams::default(),
            regime: Regime::ActFinetune,
            train: TrainParams::default(),
            vanilla_steps: 0,
            bench_episodes: 500,
            trace_episodes: 500,
            trace_decoder: DecoderKind::Vanilla,
            bench_rows: DecoderKind::all(),
            checkpoints: CheckpointPaths::default(),
            sweep: SweepGrid::default(),
            seed: 0,
            out_dir: PathBuf::from("blockpipe_out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("malformed config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.tokenizer.validate()?;
        let region_len = self.tokenizer.seq_len();
        if self.model.cond_len + region_len > self.model.max_len {
            return Err(Error::Config("condition plus action region exceeds max_len".into()));
        }
        self.layout()?;
        self.decode.to_config(self.layout()?).validate()?;
        Ok(())
    }

    pub fn layout(&self) -> Result<BlockLayout> {
        BlockLayout::for_region(self.block_size, self.model.cond_len, self.tokenizer.seq_len())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::new(self.task_family, self.model.cond_len, self.seed)
    }

    pub fn vanilla_steps_resolved(&self) -> usize {
        if self.vanilla_steps == 0 {
            self.tokenizer.seq_len()
        } else {
            self.vanilla_steps
        }
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.checkpoints.teacher.clone().unwrap_or_else(|| self.out_dir.join("teacher"))
    }

    pub fn student_path(&self) -> PathBuf {
        self.checkpoints.student.clone().unwrap_or_else(|| self.out_dir.join("student"))
    }

    pub fn ar_path(&self) -> PathBuf {
        self.checkpoints.ar.clone().unwrap_or_else(|| self.out_dir.join("ar"))
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: if self.regime == Regime::AdFromFinetuned {
                self.train.adapter_lr
            } else {
                self.train.lr
            },
            eval_every: self.train.eval_every,
            eval_episodes: self.train.eval_episodes,
            target_accuracy: self.train.target_accuracy,
            seed: self.seed,
        }
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn load_bundle(path: &Path, what: &str) -> Result<ModelBundle> {
    if !path.with_extension("json").exists() {
        return Err(Error::Config(format!(
            "missing {what} checkpoint at {}",
            path.display()
        )));
    }
    let (bundle, _) = load_checkpoint(path)?;
    Ok(bundle)
}

/// Trains the bidirectional teacher (or a block-diffusion model, per the
/// configured regime) and writes a checkpoint plus a CSV log. A diverged
/// run still writes the partial log before reporting the error.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let layout = cfg.layout()?;
    let task = cfg.task_spec();
    let regime = match cfg.regime {
        Regime::AdFromFinetuned => {
            return Err(Error::Config("use the distill command for the AD regime".into()))
        }
        r => r,
    };
    let mut bundle = match regime {
        Regime::BdFromFinetuned => load_bundle(&cfg.teacher_path(), "teacher")?,
        _ => ModelBundle::base(init_weights(&cfg.model, cfg.seed)?),
    };
    let name = match regime {
        Regime::ActFinetune => "teacher",
        Regime::BdFromScratch => "bd_scratch",
        Regime::BdFromFinetuned => "bd_finetuned",
        Regime::AdFromFinetuned => unreachable!(),
    };
    let mut log: Vec<TrainLogRow> = Vec::new();
    let outcome = run_training(
        &mut bundle,
        None,
        regime,
        &task,
        &cfg.tokenizer,
        &layout,
        &cfg.train_options(),
        TrainHooks { log: Some(&mut log), on_eval: None },
    );
    let log_path = cfg.out_dir.join(format!("{name}_train_log.csv"));
    write_train_log_csv(&log_path, &log)?;
    let outcome = outcome?;
    let ckpt = cfg.out_dir.join(name);
    save_checkpoint(&bundle, outcome.steps_run as u64, &ckpt)?;
    write_dataset_jsonl(
        &cfg.out_dir.join(format!("{name}_heldout.jsonl")),
        &task,
        &cfg.tokenizer,
        cfg.train.eval_episodes,
        cfg.seed ^ EVAL_SEED_SALT,
    )?;
    println!(
        "trained {name}: {} steps, held-out masked-token accuracy {:.4}",
        outcome.steps_run, outcome.final_accuracy
    );
    Ok(ckpt)
}

/// Distills the block-causal student (adapters only) from a frozen
/// bidirectional teacher checkpoint, logging held-out accuracy and
/// student/teacher argmax agreement per eval interval.
pub fn cmd_distill(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let layout = cfg.layout()?;
    let task = cfg.task_spec();
    let teacher = load_bundle(&cfg.teacher_path(), "teacher")?;
    if cfg.model.adapter_rank == 0 {
        return Err(Error::Config("distillation needs adapter_rank >= 1".into()));
    }
    let adapters = init_adapters(&teacher.weights.config, cfg.seed ^ 0xada9)?;
    let mut student = ModelBundle::with_adapters(teacher.weights.clone(), adapters);

    let agreement_eps = make_episodes(&task, &cfg.tokenizer, cfg.seed ^ EVAL_SEED_SALT, cfg.train.eval_episodes)?;
    let mut log: Vec<TrainLogRow> = Vec::new();
    let mut agreement_rows: Vec<(usize, f64)> = Vec::new();
    let outcome = {
        let teacher_ref = &teacher;
        let mut on_eval = |step: usize, bundle: &ModelBundle, _acc: f64| {
            let agree = masked_argmax_agreement(
                bundle,
                teacher_ref,
                &layout,
                &agreement_eps,
                cfg.seed ^ 0xa9ee,
            )
            .unwrap_or(f64::NAN);
            agreement_rows.push((step, agree));
        };
        let mut opts = cfg.train_options();
        opts.lr = cfg.train.adapter_lr;
        run_training(
            &mut student,
            Some(&teacher),
            Regime::AdFromFinetuned,
            &task,
            &cfg.tokenizer,
            &layout,
            &opts,
            TrainHooks { log: Some(&mut log), on_eval: Some(&mut on_eval) },
        )
    };
    write_train_log_csv(&cfg.out_dir.join("student_train_log.csv"), &log)?;
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            cfg.out_dir.join("student_agreement.csv"),
        )?);
        writeln!(f, "step,teacher_agreement")?;
        for (step, a) in &agreement_rows {
            writeln!(f, "{step},{a}")?;
        }
    }
    let outcome = outcome?;
    let ckpt = cfg.out_dir.join("student");
    save_checkpoint(&student, outcome.steps_run as u64, &ckpt)?;
    println!(
        "distilled student: {} steps, held-out masked-token accuracy {:.4}",
        outcome.steps_run, outcome.final_accuracy
    );
    Ok(ckpt)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub seed: u64,
    pub success: bool,
    pub token_match_rate: f64,
    pub forwards: usize,
    pub iterations: usize,
    pub attention_pairs: u64,
    pub committed_tokens: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub decoder: DecoderKind,
    pub success_rate: f64,
    pub mean_token_match: f64,
    pub tokens_per_second: f64,
    pub forwards_per_seq: f64,
    pub attention_pairs_per_seq: f64,
    pub speedup_vs_vanilla: f64,
    pub pairs_ratio_vs_vanilla: f64,
    pub episodes: Vec<EpisodeStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub seed: u64,
    pub episodes: usize,
    pub tokens_per_episode: usize,
    /// Throughput counts generated action tokens only; condition tokens and
    /// prefill work are excluded from the numerator.
    pub throughput_note: String,
    pub rows: Vec<BenchRow>,
}

struct BenchModels {
    teacher: Option<ModelBundle>,
    student: Option<ModelBundle>,
    ar: Option<ModelBundle>,
}

fn decode_one(
    kind: DecoderKind,
    models: &BenchModels,
    cfg: &RunConfig,
    dcfg: &DecodeConfig,
    cond: &crate::tokens::TokenSeq,
    seed: u64,
) -> Result<DecodeResult> {
    let region_len = cfg.tokenizer.seq_len();
    match kind {
        DecoderKind::Vanilla => decode_vanilla_dvla(
            models.teacher.as_ref().expect("checked"),
            cond,
            region_len,
            cfg.vanilla_steps_resolved(),
            seed,
        ),
        DecoderKind::FastDllm => decode_fast_dllm_baseline(
            models.teacher.as_ref().expect("checked"),
            cond,
            region_len,
            dcfg,
            seed,
        ),
        DecoderKind::BlockDiffusion => {
            decode_block_diffusion(models.student.as_ref().expect("checked"), cond, dcfg, seed)
        }
        DecoderKind::Pipelined => {
            decode_pipelined(models.student.as_ref().expect("checked"), cond, dcfg, seed)
        }
        DecoderKind::Ar => {
            decode_ar(models.ar.as_ref().expect("checked"), cond, region_len, seed)
        }
    }
}

fn bench_models(cfg: &RunConfig, rows: &[DecoderKind]) -> Result<BenchModels> {
    let needs_teacher =
        rows.iter().any(|r| matches!(r, DecoderKind::Vanilla | DecoderKind::FastDllm));
    let needs_student =
        rows.iter().any(|r| matches!(r, DecoderKind::BlockDiffusion | DecoderKind::Pipelined));
    let needs_ar = rows.contains(&DecoderKind::Ar);
    Ok(BenchModels {
        teacher: if needs_teacher { Some(load_bundle(&cfg.teacher_path(), "teacher")?) } else { None },
        student: if needs_student { Some(load_bundle(&cfg.student_path(), "student")?) } else { None },
        ar: if needs_ar { Some(load_bundle(&cfg.ar_path(), "ar (block size 1)")?) } else { None },
    })
}

/// Runs every configured decoder over the same episodes (identical seeds
/// across rows) and assembles the comparison report.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let mut rows = cfg.bench_rows.clone();
    if !rows.contains(&DecoderKind::Vanilla) {
        rows.insert(0, DecoderKind::Vanilla);
    }
    let report = run_bench(cfg, &rows, cfg.bench_episodes)?;
    let json_path = cfg.out_dir.join("bench_report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    write_bench_csv(&cfg.out_dir.join("bench_report.csv"), &report)?;
    for row in &report.rows {
        println!(
            "{:<16} success {:.3}  match {:.3}  tokens/s {:>10.1} (x{:.2})  forwards/seq {:>6.2}  pairs/seq {:>12.1} ({:.3}x vanilla)",
            row.decoder.name(),
            row.success_rate,
            row.mean_token_match,
            row.tokens_per_second,
            row.speedup_vs_vanilla,
            row.forwards_per_seq,
            row.attention_pairs_per_seq,
            row.pairs_ratio_vs_vanilla,
        );
    }
    Ok(report)
}

/// Bench over explicit rows and episode count; used by `cmd_bench`, the
/// sweep, and the acceptance suite.
pub fn run_bench(cfg: &RunConfig, rows: &[DecoderKind], episodes: usize) -> Result<BenchReport> {
    use rayon::prelude::*;
    let models = bench_models(cfg, rows)?;
    let layout = cfg.layout()?;
    let dcfg = cfg.decode.to_config(layout);
    dcfg.validate()?;
    let task = cfg.task_spec();
    let region_len = cfg.tokenizer.seq_len();
    let mask_token = cfg.model.mask_token;

    let episode_inputs: Vec<(u64, crate::tokens::TokenSeq, crate::taskbench::ActionChunk)> = (0
        ..episodes)
        .map(|i| {
            let seed = episode_seed(cfg.seed ^ BENCH_SEED_SALT, i as u64);
            let (cond, truth) = generate_episode(&task, &cfg.tokenizer, seed)?;
            Ok((seed, cond, truth))
        })
        .collect::<Result<_>>()?;

    let mut report_rows = Vec::new();
    for &kind in rows {
        let stats: Vec<Result<EpisodeStats>> = episode_inputs
            .par_iter()
            .map(|(seed, cond, truth)| {
                let start = std::time::Instant::now();
                let result = decode_one(kind, &models, cfg, &dcfg, cond, *seed)?;
                let wall = start.elapsed().as_secs_f64();
                let eval = evaluate_success(&result.tokens, truth, &cfg.tokenizer, mask_token)?;
                Ok(EpisodeStats {
                    seed: *seed,
                    success: eval.success,
                    token_match_rate: eval.token_match_rate,
                    forwards: result.forwards,
                    iterations: result.iterations,
                    attention_pairs: result.attention_pairs,
                    committed_tokens: result.committed_tokens(),
                    wall_seconds: wall,
                })
            })
            .collect();
        let stats: Vec<EpisodeStats> = stats.into_iter().collect::<Result<_>>()?;
        let n = stats.len() as f64;
        let total_tokens: usize = stats.iter().map(|s| s.committed_tokens).sum();
        let total_wall: f64 = stats.iter().map(|s| s.wall_seconds).sum();
        report_rows.push(BenchRow {
            decoder: kind,
            success_rate: stats.iter().filter(|s| s.success).count() as f64 / n,
            mean_token_match: stats.iter().map(|s| s.token_match_rate).sum::<f64>() / n,
            tokens_per_second: total_tokens as f64 / total_wall.max(1e-12),
            forwards_per_seq: stats.iter().map(|s| s.forwards as f64).sum::<f64>() / n,
            attention_pairs_per_seq: stats.iter().map(|s| s.attention_pairs as f64).sum::<f64>()
                / n,
            speedup_vs_vanilla: f64::NAN,
            pairs_ratio_vs_vanilla: f64::NAN,
            episodes: stats,
        });
    }
    let vanilla_speed = report_rows
        .iter()
        .find(|r| r.decoder == DecoderKind::Vanilla)
        .map(|r| (r.tokens_per_second, r.attention_pairs_per_seq))
        .ok_or_else(|| Error::Config("bench requires a vanilla row".into()))?;
    for row in report_rows.iter_mut() {
        row.speedup_vs_vanilla = row.tokens_per_second / vanilla_speed.0;
        row.pairs_ratio_vs_vanilla = row.attention_pairs_per_seq / vanilla_speed.1;
    }
    Ok(BenchReport {
        version: CONFIG_VERSION,
        seed: cfg.seed,
        episodes,
        tokens_per_episode: region_len,
        throughput_note: "tokens/s counts generated action tokens only (no condition/prefill)"
            .into(),
        rows: report_rows,
    })
}

fn write_bench_csv(path: &Path, report: &BenchReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "decoder,success_rate,mean_token_match,tokens_per_second,speedup_vs_vanilla,forwards_per_seq,attention_pairs_per_seq,pairs_ratio_vs_vanilla"
    )?;
    for r in &report.rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.decoder.name(),
            r.success_rate,
            r.mean_token_match,
            r.tokens_per_second,
            r.speedup_vs_vanilla,
            r.forwards_per_seq,
            r.attention_pairs_per_seq,
            r.pairs_ratio_vs_vanilla,
        )?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSummary {
    pub decoder: DecoderKind,
    pub episodes: usize,
    pub spearman_position_vs_mean_iteration: f64,
    pub mean_decode_iteration: Vec<f64>,
}

/// Aggregates decode order over many episodes into a position-by-iteration
/// frequency matrix, per-position means, and the Spearman correlation
/// between position index and mean decode iteration.
pub fn cmd_trace(cfg: &RunConfig) -> Result<TraceSummary> {
    use rayon::prelude::*;
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let kind = cfg.trace_decoder;
    let models = bench_models(cfg, &[kind])?;
    let layout = cfg.layout()?;
    let dcfg = cfg.decode.to_config(layout);
    let task = cfg.task_spec();
    let region_len = cfg.tokenizer.seq_len();

    let traces: Vec<Result<DecodeResult>> = (0..cfg.trace_episodes)
        .into_par_iter()
        .map(|i| {
            let seed = episode_seed(cfg.seed ^ BENCH_SEED_SALT ^ 0x7ace, i as u64);
            let (cond, _) = generate_episode(&task, &cfg.tokenizer, seed)?;
            decode_one(kind, &models, cfg, &dcfg, &cond, seed)
        })
        .collect();
    let traces: Vec<DecodeResult> = traces.into_iter().collect::<Result<_>>()?;

    let max_iter = traces
        .iter()
        .flat_map(|t| t.trace.decode_iteration_of.iter().flatten().copied())
        .max()
        .unwrap_or(1);
    let mut freq = vec![vec![0u64; max_iter]; region_len];
    let mut sums = vec![0f64; region_len];
    let mut counts = vec![0u64; region_len];
    for t in &traces {
        for (p, d) in t.trace.decode_iteration_of.iter().enumerate() {
            if let Some(it) = d {
                freq[p][it - 1] += 1;
                sums[p] += *it as f64;
                counts[p] += 1;
            }
        }
    }
    let mean: Vec<f64> = sums
        .iter()
        .zip(counts.iter())
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    let positions: Vec<f64> = (0..region_len).map(|p| p as f64).collect();
    let rho = spearman(&positions, &mean);

    // Frequency matrix CSV: one row per position, one column per iteration.
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            cfg.out_dir.join("trace_matrix.csv"),
        )?);
        write!(f, "position,block")?;
        for it in 1..=max_iter {
            write!(f, ",iter_{it}")?;
        }
        writeln!(f)?;
        for p in 0..region_len {
            write!(f, "{p},{}", layout.block_of_rel(p))?;
            for c in &freq[p] {
                write!(f, ",{c}")?;
            }
            writeln!(f)?;
        }
    }
    // Per-position mean decode iteration.
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            cfg.out_dir.join("trace_mean.csv"),
        )?);
        writeln!(f, "position,block,mean_decode_iteration")?;
        for p in 0..region_len {
            writeln!(f, "{p},{},{}", layout.block_of_rel(p), mean[p])?;
        }
    }
    // One per-episode trace plus its per-iteration costs, as examples of
    // the decoder's trace file interfaces.
    if let Some(t) = traces.first() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            cfg.out_dir.join("trace_example.csv"),
        )?);
        writeln!(f, "position,block,decode_iteration")?;
        for (p, d) in t.trace.decode_iteration_of.iter().enumerate() {
            writeln!(
                f,
                "{p},{},{}",
                layout.block_of_rel(p),
                d.map(|i| i.to_string()).unwrap_or_default()
            )?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            cfg.out_dir.join("trace_example_costs.csv"),
        )?);
        writeln!(f, "iteration,forwards,query_count,attention_pairs,commits")?;
        for row in &t.trace.per_iteration {
            writeln!(
                f,
                "{},1,{},{},{}",
                row.iteration, row.query_count, row.attention_pairs, row.commits
            )?;
        }
    }
    let summary = TraceSummary {
        decoder: kind,
        episodes: cfg.trace_episodes,
        spearman_position_vs_mean_iteration: rho,
        mean_decode_iteration: mean,
    };
    std::fs::write(
        cfg.out_dir.join("trace_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "trace[{}]: spearman(position, mean decode iteration) = {:.4} over {} episodes",
        kind.name(),
        rho,
        cfg.trace_episodes
    );
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KvSimSummary {
    pub bidirectional_min_offdiag: f64,
    pub blockcausal_post_completion_min: f64,
    pub blockcausal_completion_iteration: usize,
}

/// Emits block-1 KV similarity matrices for the bidirectional and
/// block-causal patterns over one decoding run each.
pub fn cmd_kvsim(cfg: &RunConfig) -> Result<KvSimSummary> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let teacher = load_bundle(&cfg.teacher_path(), "teacher")?;
    let student = load_bundle(&cfg.student_path(), "student")?;
    let layout = cfg.layout()?;
    let dcfg = cfg.decode.to_config(layout);
    let task = cfg.task_spec();
    let region_len = cfg.tokenizer.seq_len();
    let seed = episode_seed(cfg.seed ^ BENCH_SEED_SALT ^ 0x51a1, 0);
    let (cond, _) = generate_episode(&task, &cfg.tokenizer, seed)?;
    let block1 = 0..layout.block_size;

    // Bidirectional: vanilla decode with a probe on block 1.
    let (_, bidi_snaps) = decode_vanilla_probed(
        &teacher,
        &cond,
        region_len,
        cfg.vanilla_steps_resolved(),
        Some(block1.clone()),
    )?;
    let bidi = similarity_trace(&bidi_snaps)?;
    write_similarity_csvs(&cfg.out_dir, "kvsim_bidirectional", &bidi)?;
    let mut bidi_min: f64 = 1.0;
    for i in 0..bidi.mean.rows {
        for j in 0..bidi.mean.cols {
            if i != j {
                bidi_min = bidi_min.min(bidi.mean.at(i, j));
            }
        }
    }

    // Block-causal: pipelined decode with the same probe.
    let mcfg = student.weights.config;
    let mut backend = BlockCausalBackend::new(&student, layout);
    backend.set_probe(block1);
    let result = decode_pipelined_with(&mut backend, &cond, &dcfg, mcfg.mask_token, mcfg.eoa_token)?;
    let bc = similarity_trace(&backend.snapshots)?;
    write_similarity_csvs(&cfg.out_dir, "kvsim_blockcausal", &bc)?;
    let completion = result
        .trace
        .state_transitions
        .iter()
        .find(|t| t.block == 0 && t.state == crate::decoder::BlockState::Complete)
        .map(|t| t.iteration)
        .unwrap_or(1);
    let mut bc_min: f64 = 1.0;
    for i in completion..bc.mean.rows {
        for j in completion..bc.mean.cols {
            bc_min = bc_min.min(bc.mean.at(i, j));
        }
    }
    let summary = KvSimSummary {
        bidirectional_min_offdiag: bidi_min,
        blockcausal_post_completion_min: bc_min,
        blockcausal_completion_iteration: completion,
    };
    std::fs::write(
        cfg.out_dir.join("kvsim_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "kvsim: bidirectional min off-diagonal similarity {:.6}; block-causal post-completion min {:.15}",
        summary.bidirectional_min_offdiag, summary.blockcausal_post_completion_min
    );
    Ok(summary)
}

fn write_similarity_csvs(dir: &Path, prefix: &str, trace: &SimilarityTrace) -> Result<()> {
    write_matrix_csv(&dir.join(format!("{prefix}_mean.csv")), &trace.mean)?;
    for (l, m) in trace.per_layer.iter().enumerate() {
        write_matrix_csv(&dir.join(format!("{prefix}_layer{l}.csv")), m)?;
    }
    Ok(())
}

fn write_matrix_csv(path: &Path, m: &RealMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "iteration")?;
    for j in 0..m.cols {
        write!(f, ",{}", j + 1)?;
    }
    writeln!(f)?;
    for i in 0..m.rows {
        write!(f, "{}", i + 1)?;
        for j in 0..m.cols {
            write!(f, ",{}", m.at(i, j))?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// One sweep row: the grid point plus its bench outcome (or a warning
/// status for invalid points).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub block_size: usize,
    pub tau_add: f64,
    pub tau_act: f64,
    pub tau_conf: f64,
    pub log_factor: usize,
    pub status: String,
    pub success_rate: f64,
    pub tokens_per_second: f64,
    pub forwards_per_seq: f64,
    pub attention_pairs_per_seq: f64,
}

/// Grid sweep over thresholds, the log factor, and the block size; each
/// valid point benches the pipelined decoder (with the vanilla baseline for
/// speedups). Invalid points are kept as warning rows.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let g = &cfg.sweep;
    let one_or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let tau_adds = one_or(&g.tau_add, cfg.decode.tau_add);
    let tau_acts = one_or(&g.tau_act, cfg.decode.tau_act);
    let tau_confs = one_or(&g.tau_conf, cfg.decode.tau_conf);
    let log_factors =
        if g.log_factor.is_empty() { vec![cfg.decode.log_factor] } else { g.log_factor.clone() };
    let block_sizes =
        if g.block_size.is_empty() { vec![cfg.block_size] } else { g.block_size.clone() };

    let mut rows = Vec::new();
    for &k in &block_sizes {
        for &ta in &tau_adds {
            for &tc in &tau_acts {
                for &tf in &tau_confs {
                    for &n in &log_factors {
                        let mut point = cfg.clone();
                        point.block_size = k;
                        point.decode.tau_add = ta;
                        point.decode.tau_act = tc;
                        point.decode.tau_conf = tf;
                        point.decode.log_factor = n;
                        let mut row = SweepRow {
                            block_size: k,
                            tau_add: ta,
                            tau_act: tc,
                            tau_conf: tf,
                            log_factor: n,
                            status: "ok".into(),
                            success_rate: f64::NAN,
                            tokens_per_second: f64::NAN,
                            forwards_per_seq: f64::NAN,
                            attention_pairs_per_seq: f64::NAN,
                        };
                        let valid = point
                            .layout()
                            .and_then(|l| point.decode.to_config(l).validate());
                        match valid {
                            Err(e) => {
                                row.status = format!("skipped: {e}");
                                eprintln!(
                                    "warning: skipping grid point k={k} tau_add={ta} tau_act={tc}: {e}"
                                );
                            }
                            Ok(()) => {
                                let report = run_bench(
                                    &point,
                                    &[DecoderKind::Vanilla, DecoderKind::Pipelined],
                                    point.bench_episodes,
                                )?;
                                let pipe = report
                                    .rows
                                    .iter()
                                    .find(|r| r.decoder == DecoderKind::Pipelined)
                                    .expect("pipelined row");
                                row.success_rate = pipe.success_rate;
                                row.tokens_per_second = pipe.tokens_per_second;
                                row.forwards_per_seq = pipe.forwards_per_seq;
                                row.attention_pairs_per_seq = pipe.attention_pairs_per_seq;
                            }
                        }
                        rows.push(row);
                    }
                }
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join("sweep.csv"))?);
    writeln!(
        f,
        "block_size,tau_add,tau_act,tau_conf,log_factor,status,success_rate,tokens_per_second,forwards_per_seq,attention_pairs_per_seq"
    )?;
    for r in &rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            r.block_size,
            r.tau_add,
            r.tau_act,
            r.tau_conf,
            r.log_factor,
            r.status,
            r.success_rate,
            r.tokens_per_second,
            r.forwards_per_seq,
            r.attention_pairs_per_seq
        )?;
    }
    Ok(rows)
}

/// Trains the block-size-1 model used by the autoregressive bench row.
pub fn cmd_train_ar(cfg: &RunConfig) -> Result<PathBuf> {
    let mut ar_cfg = cfg.clone();
    ar_cfg.block_size = 1;
    ar_cfg.regime = Regime::BdFromScratch;
    ar_cfg.validate()?;
    ensure_out_dir(&ar_cfg)?;
    let layout = ar_cfg.layout()?;
    let task = ar_cfg.task_spec();
    let mut bundle = ModelBundle::base(init_weights(&ar_cfg.model, ar_cfg.seed ^ 0xa12)?);
    let mut log = Vec::new();
    let outcome = run_training(
        &mut bundle,
        None,
        Regime::BdFromScratch,
        &task,
        &ar_cfg.tokenizer,
        &layout,
        &ar_cfg.train_options(),
        TrainHooks { log: Some(&mut log), on_eval: None },
    );
    write_train_log_csv(&ar_cfg.out_dir.join("ar_train_log.csv"), &log)?;
    let outcome = outcome?;
    let ckpt = ar_cfg.out_dir.join("ar");
    save_checkpoint(&bundle, outcome.steps_run as u64, &ckpt)?;
    println!(
        "trained ar (k=1): {} steps, held-out masked-token accuracy {:.4}",
        outcome.steps_run, outcome.final_accuracy
    );
    Ok(ckpt)
}

/// Eval helper shared with the acceptance suite: decode-order trace of the
/// vanilla decoder on fresh episodes, returning the Spearman correlation.
pub fn vanilla_trace_spearman(cfg: &RunConfig, teacher: &ModelBundle, episodes: usize) -> Result<f64> {
    use rayon::prelude::*;
    let task = cfg.task_spec();
    let region_len = cfg.tokenizer.seq_len();
    let steps = cfg.vanilla_steps_resolved();
    let traces: Vec<Result<DecodeResult>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let seed = episode_seed(cfg.seed ^ BENCH_SEED_SALT ^ 0x7ace, i as u64);
            let (cond, _) = generate_episode(&task, &cfg.tokenizer, seed)?;
            decode_vanilla_dvla(teacher, &cond, region_len, steps, seed)
        })
        .collect();
    let traces: Vec<DecodeResult> = traces.into_iter().collect::<Result<_>>()?;
    let mut sums = vec![0f64; region_len];
    let mut counts = vec![0u64; region_len];
    for t in &traces {
        for (p, d) in t.trace.decode_iteration_of.iter().enumerate() {
            if let Some(it) = d {
                sums[p] += *it as f64;
                counts[p] += 1;
            }
        }
    }
    let mean: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect();
    let positions: Vec<f64> = (0..region_len).map(|p| p as f64).collect();
    Ok(spearman(&positions, &mean))
}
