//! Training: masked cross-entropy, block-diffusion, and asymmetric
//! distillation objectives with hand-written backpropagation, an Adam
//! optimizer, finite-difference gradient verification, and the training
//! regimes compared by the benchmark suite.

use crate::diffusion::{
    corrupt, forcing_corrupt, gamma_of_t, sample_schedule, BlockLayout, CorruptionResult,
    NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::model::{
    build_attention_mask, forward, AttentionPattern, ForwardRequest, ModelBundle, LN_EPS,
};
use crate::numerics::{argmax_where, AttnMask, RealMatrix};
use crate::taskbench::{episode_seed, generate_episode, tokenize_actions, TaskSpec, TokenizerConfig};
use crate::tokens::{Token, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Training strategies: plain masked-CE finetuning of a bidirectional model,
/// block-diffusion training (from scratch or from a finetuned checkpoint),
/// and adapter-only asymmetric distillation from a frozen teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    ActFinetune,
    BdFromScratch,
    BdFromFinetuned,
    AdFromFinetuned,
}

impl Regime {
    pub fn trains_adapters_only(&self) -> bool {
        matches!(self, Regime::AdFromFinetuned)
    }
}

/// One training batch: conditions, clean actions, and their corruptions.
/// `schedules` holds the per-sample forcing schedule for block regimes.
#[derive(Debug, Clone)]
pub struct Batch {
    pub cond: Vec<TokenSeq>,
    pub clean: Vec<TokenSeq>,
    pub corruption: Vec<CorruptionResult>,
    pub schedules: Vec<Option<NoiseSchedule>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }
}

/// Uniform corruption: one mask ratio per sample drawn from (0,1].
pub fn make_uniform_batch(
    episodes: &[(TokenSeq, TokenSeq)],
    mask_token: Token,
    seed: u64,
) -> Result<Batch> {
    let mut cond = Vec::new();
    let mut clean = Vec::new();
    let mut corruption = Vec::new();
    let mut schedules = Vec::new();
    for (i, (c, a)) in episodes.iter().enumerate() {
        let s = episode_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = 1.0 - rng.gen::<f64>();
        let gamma = gamma_of_t(t)?;
        corruption.push(corrupt(a, gamma, s ^ 0x5eed, mask_token)?);
        cond.push(c.clone());
        clean.push(a.clone());
        schedules.push(None);
    }
    Ok(Batch { cond, clean, corruption, schedules })
}

/// Diffusion-forcing corruption with a per-sample monotone schedule.
pub fn make_forcing_batch(
    episodes: &[(TokenSeq, TokenSeq)],
    layout: &BlockLayout,
    mask_token: Token,
    seed: u64,
) -> Result<Batch> {
    let mut cond = Vec::new();
    let mut clean = Vec::new();
    let mut corruption = Vec::new();
    let mut schedules = Vec::new();
    for (i, (c, a)) in episodes.iter().enumerate() {
        let s = episode_seed(seed, i as u64);
        let sched = sample_schedule(layout.num_blocks, s)?;
        corruption.push(forcing_corrupt(a, layout, &sched, s ^ 0x5eed, mask_token)?);
        schedules.push(Some(sched));
        cond.push(c.clone());
        clean.push(a.clone());
    }
    Ok(Batch { cond, clean, corruption, schedules })
}

// ---------------------------------------------------------------------------
// Losses on logit rows.
// ---------------------------------------------------------------------------

/// Masked cross-entropy: sum of -log p(target) over the given rows, plus the
/// gradient w.r.t. the logits. Rows correspond to masked positions.
pub fn loss_masked_ce(
    logits: &RealMatrix,
    targets: &[Token],
    mask_token: Token,
) -> Result<(f64, RealMatrix)> {
    if logits.rows != targets.len() {
        return Err(Error::InvalidInput(format!(
            "{} logit rows vs {} targets",
            logits.rows,
            targets.len()
        )));
    }
    let mut dlogits = RealMatrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        if target == mask_token {
            return Err(Error::InvalidInput("target contains the mask token".into()));
        }
        if (target as usize) >= logits.cols {
            return Err(Error::InvalidInput(format!("target {target} >= vocab {}", logits.cols)));
        }
        let row = logits.row(r);
        let (logp, p) = log_softmax(row);
        loss -= logp[target as usize];
        let drow = dlogits.row_mut(r);
        drow.copy_from_slice(&p);
        drow[target as usize] -= 1.0;
    }
    Ok((loss, dlogits))
}

/// Per-row KL(student || teacher) summed over rows, plus the gradient
/// w.r.t. the student logits. The teacher side receives no gradient.
pub fn kl_student_teacher(
    student_logits: &RealMatrix,
    teacher_logits: &RealMatrix,
) -> Result<(f64, RealMatrix)> {
    if student_logits.rows != teacher_logits.rows || student_logits.cols != teacher_logits.cols {
        return Err(Error::InvalidInput("student/teacher logit shapes differ".into()));
    }
    let mut dstudent = RealMatrix::zeros(student_logits.rows, student_logits.cols);
    let mut total = 0.0;
    for r in 0..student_logits.rows {
        let (logp_s, p_s) = log_softmax(student_logits.row(r));
        let (logp_t, _) = log_softmax(teacher_logits.row(r));
        let mut kl = 0.0;
        for v in 0..student_logits.cols {
            kl += p_s[v] * (logp_s[v] - logp_t[v]);
        }
        total += kl;
        for (v, d) in dstudent.row_mut(r).iter_mut().enumerate() {
            *d = p_s[v] * ((logp_s[v] - logp_t[v]) - kl);
        }
    }
    Ok((total, dstudent))
}

fn log_softmax(row: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    let logp: Vec<f64> = row.iter().map(|&v| v - lse).collect();
    let p: Vec<f64> = logp.iter().map(|&lp| lp.exp()).collect();
    (logp, p)
}

// ---------------------------------------------------------------------------
// Forward with tape + backward.
// ---------------------------------------------------------------------------

struct LnTape {
    xhat: RealMatrix,
    rstd: Vec<f64>,
}

struct LayerTape {
    ln1: LnTape,
    a1: RealMatrix,
    q: RealMatrix,
    k: RealMatrix,
    v: RealMatrix,
    q_lora_in: Option<RealMatrix>,
    v_lora_in: Option<RealMatrix>,
    probs: Vec<RealMatrix>,
    ctx: RealMatrix,
    ln2: LnTape,
    a2: RealMatrix,
    h1: RealMatrix,
    act: RealMatrix,
}

/// Activation record of one full-sequence forward pass.
pub struct Tape {
    rows: usize,
    row_tokens: Vec<Token>,
    layers: Vec<LayerTape>,
    ln_f: LnTape,
    final_normed: RealMatrix,
    head_lora_in: Option<RealMatrix>,
    logits_rows: Vec<usize>,
    /// Logits for exactly `logits_rows`, in order.
    pub logits: RealMatrix,
}

fn layer_norm_tape(x: &RealMatrix, g: &[f64], b: &[f64]) -> (RealMatrix, LnTape) {
    let d = x.cols;
    let mut out = RealMatrix::zeros(x.rows, d);
    let mut xhat = RealMatrix::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat.set(i, j, xh);
            out.set(i, j, xh * g[j] + b[j]);
        }
    }
    (out, LnTape { xhat, rstd })
}

fn layer_norm_backward(
    dy: &RealMatrix,
    tape: &LnTape,
    g: &[f64],
    dg: &mut RealMatrix,
    db: &mut RealMatrix,
) -> RealMatrix {
    let d = dy.cols;
    let mut dx = RealMatrix::zeros(dy.rows, d);
    for i in 0..dy.rows {
        let dyr = dy.row(i);
        let xh = tape.xhat.row(i);
        let rs = tape.rstd[i];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxhat = dyr[j] * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh[j];
            dg.data[j] += dyr[j] * xh[j];
            db.data[j] += dyr[j];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let dxhat = dyr[j] * g[j];
            dx.set(i, j, rs * (dxhat - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat));
        }
    }
    dx
}

const NEG_INF_SCORE: f64 = -1.0e30;

/// Full-sequence training forward. Dense attention with additive masking;
/// numerically identical to the sparse inference kernel because disallowed
/// scores underflow to exactly zero weight.
pub fn train_forward(
    bundle: &ModelBundle,
    tokens: &[Token],
    mask: &AttnMask,
    logits_rows: &[usize],
) -> Result<Tape> {
    let cfg = bundle.weights.config;
    let w = &bundle.weights;
    let n = tokens.len();
    if mask.q_len != n || mask.k_len != n {
        return Err(Error::InvalidInput("training mask must be full-sequence".into()));
    }
    if n > cfg.max_len {
        return Err(Error::InvalidInput(format!("sequence length {n} > max_len {}", cfg.max_len)));
    }
    let d = cfg.model_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let adapters = bundle.adapters_active.then_some(()).and(bundle.adapters.as_ref());

    let mut x = RealMatrix::zeros(n, d);
    for (r, &t) in tokens.iter().enumerate() {
        if (t as usize) >= cfg.vocab_size {
            return Err(Error::InvalidInput(format!("token {t} >= vocab {}", cfg.vocab_size)));
        }
        let te = w.tok_emb.row(t as usize);
        let pe = w.pos_emb.row(r);
        for (o, (a, b)) in x.row_mut(r).iter_mut().zip(te.iter().zip(pe.iter())) {
            *o = a + b;
        }
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, lw) in w.layers.iter().enumerate() {
        let (a1, ln1) = layer_norm_tape(&x, lw.ln1_g.row(0), lw.ln1_b.row(0));
        let mut q = a1.matmul(&lw.wq);
        let k = a1.matmul(&lw.wk);
        let mut v = a1.matmul(&lw.wv);
        let (mut q_lora_in, mut v_lora_in) = (None, None);
        if let Some(ad) = adapters {
            let ql = a1.matmul(&ad.layers[l].q_a);
            q.add_assign(&ql.matmul(&ad.layers[l].q_b));
            q_lora_in = Some(ql);
            let vl = a1.matmul(&ad.layers[l].v_a);
            v.add_assign(&vl.matmul(&ad.layers[l].v_b));
            v_lora_in = Some(vl);
        }

        let mut ctx = RealMatrix::zeros(n, d);
        let mut probs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let q_h = crate::model::take_head(&q, h, hd);
            let k_h = crate::model::take_head(&k, h, hd);
            let v_h = crate::model::take_head(&v, h, hd);
            let mut scores = q_h.matmul(&k_h.transpose());
            for i in 0..n {
                let srow = scores.row_mut(i);
                for (j, s) in srow.iter_mut().enumerate() {
                    if mask.allowed(i, j) {
                        *s *= scale;
                    } else {
                        *s = NEG_INF_SCORE;
                    }
                }
                crate::numerics::softmax_in_place(srow);
            }
            let out_h = scores.matmul(&v_h);
            for i in 0..n {
                ctx.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(out_h.row(i));
            }
            probs.push(scores);
        }
        let o = ctx.matmul(&lw.wo);
        let mut x_mid = x;
        x_mid.add_assign(&o);

        let (a2, ln2) = layer_norm_tape(&x_mid, lw.ln2_g.row(0), lw.ln2_b.row(0));
        let h1 = crate::model::affine(&a2, &lw.ff_w1, lw.ff_b1.row(0));
        let mut act = h1.clone();
        crate::model::silu_in_place(&mut act);
        let f = crate::model::affine(&act, &lw.ff_w2, lw.ff_b2.row(0));
        let mut x_out = x_mid;
        x_out.add_assign(&f);

        layers.push(LayerTape { ln1, a1, q, k, v, q_lora_in, v_lora_in, probs, ctx, ln2, a2, h1, act });
        x = x_out;
    }

    let (final_normed, ln_f) = layer_norm_tape(&x, w.ln_f_g.row(0), w.ln_f_b.row(0));
    let mut sel = RealMatrix::zeros(logits_rows.len(), d);
    for (i, &r) in logits_rows.iter().enumerate() {
        sel.row_mut(i).copy_from_slice(final_normed.row(r));
    }
    let mut logits = crate::model::affine(&sel, &w.head_w, w.head_b.row(0));
    let mut head_lora_in = None;
    if let Some(ad) = adapters {
        let hl = sel.matmul(&ad.head_a);
        logits.add_assign(&hl.matmul(&ad.head_b));
        head_lora_in = Some(hl);
    }

    Ok(Tape {
        rows: n,
        row_tokens: tokens.to_vec(),
        layers,
        ln_f,
        final_normed,
        head_lora_in,
        logits_rows: logits_rows.to_vec(),
        logits,
    })
}

/// Gradients aligned with the weight and adapter tensor registries.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub base: Vec<RealMatrix>,
    pub adapters: Vec<RealMatrix>,
}

impl Gradients {
    pub fn zeros_like(bundle: &ModelBundle) -> Self {
        let base = bundle
            .weights
            .tensors()
            .iter()
            .map(|(_, m)| RealMatrix::zeros(m.rows, m.cols))
            .collect();
        let adapters = bundle
            .adapters
            .as_ref()
            .map(|a| {
                a.tensors()
                    .iter()
                    .map(|(_, m)| RealMatrix::zeros(m.rows, m.cols))
                    .collect()
            })
            .unwrap_or_default();
        Self { base, adapters }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.base.iter_mut().zip(other.base.iter()) {
            a.add_assign(b);
        }
        for (a, b) in self.adapters.iter_mut().zip(other.adapters.iter()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.base.iter_mut().chain(self.adapters.iter_mut()) {
            m.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base.iter().chain(self.adapters.iter()).all(|m| m.is_finite())
    }
}

// Registry indices into Weights::tensors(); must match its order.
const G_TOK_EMB: usize = 0;
const G_POS_EMB: usize = 1;
const LAYER_STRIDE: usize = 12;
const G_LN1_G: usize = 0;
const G_LN1_B: usize = 1;
const G_WQ: usize = 2;
const G_WK: usize = 3;
const G_WV: usize = 4;
const G_WO: usize = 5;
const G_LN2_G: usize = 6;
const G_LN2_B: usize = 7;
const G_FF_W1: usize = 8;
const G_FF_B1: usize = 9;
const G_FF_W2: usize = 10;
const G_FF_B2: usize = 11;
// Adapter registry: per layer [q_a, q_b, v_a, v_b], then head_a, head_b.
const A_STRIDE: usize = 4;

fn layer_base(l: usize) -> usize {
    2 + l * LAYER_STRIDE
}

fn tail_base(num_layers: usize) -> usize {
    2 + num_layers * LAYER_STRIDE
}

/// Backpropagates `dlogits` (rows aligned with the tape's logits rows)
/// through the tape, accumulating into `grads`.
pub fn backward(bundle: &ModelBundle, tape: &Tape, dlogits: &RealMatrix, grads: &mut Gradients) {
    let cfg = bundle.weights.config;
    let w = &bundle.weights;
    let d = cfg.model_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let n = tape.rows;
    let nl = cfg.layers;
    let adapters = bundle.adapters_active.then_some(()).and(bundle.adapters.as_ref());

    // Head.
    let mut sel = RealMatrix::zeros(tape.logits_rows.len(), d);
    for (i, &r) in tape.logits_rows.iter().enumerate() {
        sel.row_mut(i).copy_from_slice(tape.final_normed.row(r));
    }
    let tb = tail_base(nl);
    grads.base[tb + 2].add_assign(&sel.transpose().matmul(dlogits)); // head_w
    for r in 0..dlogits.rows {
        for (j, &v) in dlogits.row(r).iter().enumerate() {
            grads.base[tb + 3].data[j] += v; // head_b
        }
    }
    let mut dsel = dlogits.matmul(&w.head_w.transpose());
    if let Some(ad) = adapters {
        let hl = tape.head_lora_in.as_ref().expect("adapter tape");
        let ha = nl * A_STRIDE;
        grads.adapters[ha + 1].add_assign(&hl.transpose().matmul(dlogits)); // head_b (lora up)
        let dhl = dlogits.matmul(&ad.head_b.transpose());
        grads.adapters[ha].add_assign(&sel.transpose().matmul(&dhl)); // head_a
        dsel.add_assign(&dhl.matmul(&ad.head_a.transpose()));
    }
    let mut dfinal = RealMatrix::zeros(n, d);
    for (i, &r) in tape.logits_rows.iter().enumerate() {
        dfinal.row_mut(r).copy_from_slice(dsel.row(i));
    }

    // Final layer norm.
    let (dg, db) = (tb, tb + 1);
    let split = split_two(&mut grads.base, dg, db);
    let mut dx = layer_norm_backward(&dfinal, &tape.ln_f, w.ln_f_g.row(0), split.0, split.1);

    // Layers in reverse.
    for l in (0..nl).rev() {
        let lw = &w.layers[l];
        let lt = &tape.layers[l];
        let lb = layer_base(l);

        // Feed-forward branch: x_out = x_mid + ff(a2).
        let dff_out = dx.clone();
        grads.base[lb + G_FF_W2].add_assign(&lt.act.transpose().matmul(&dff_out));
        add_colsum(&mut grads.base[lb + G_FF_B2], &dff_out);
        let dact = dff_out.matmul(&lw.ff_w2.transpose());
        let mut dh1 = dact;
        for (dv, &pre) in dh1.data.iter_mut().zip(lt.h1.data.iter()) {
            let sig = 1.0 / (1.0 + (-pre).exp());
            *dv *= sig * (1.0 + pre * (1.0 - sig));
        }
        grads.base[lb + G_FF_W1].add_assign(&lt.a2.transpose().matmul(&dh1));
        add_colsum(&mut grads.base[lb + G_FF_B1], &dh1);
        let da2 = dh1.matmul(&lw.ff_w1.transpose());
        {
            let split = split_two(&mut grads.base, lb + G_LN2_G, lb + G_LN2_B);
            let dmid_ln = layer_norm_backward(&da2, &lt.ln2, lw.ln2_g.row(0), split.0, split.1);
            dx.add_assign(&dmid_ln);
        }

        // Attention branch: x_mid = x_in + wo(ctx).
        let do_ = dx.clone();
        grads.base[lb + G_WO].add_assign(&lt.ctx.transpose().matmul(&do_));
        let dctx = do_.matmul(&lw.wo.transpose());

        let mut dq = RealMatrix::zeros(n, d);
        let mut dk = RealMatrix::zeros(n, d);
        let mut dv = RealMatrix::zeros(n, d);
        for h in 0..cfg.heads {
            let probs = &lt.probs[h];
            let mut dctx_h = RealMatrix::zeros(n, hd);
            for i in 0..n {
                dctx_h.row_mut(i).copy_from_slice(&dctx.row(i)[h * hd..(h + 1) * hd]);
            }
            let k_h = crate::model::take_head(&lt.k, h, hd);
            let v_h = crate::model::take_head(&lt.v, h, hd);
            let q_h = crate::model::take_head(&lt.q, h, hd);

            let dv_h = probs.transpose().matmul(&dctx_h);
            let dprobs = dctx_h.matmul(&v_h.transpose());
            // Softmax backward per row.
            let mut dscores = RealMatrix::zeros(n, n);
            for i in 0..n {
                let p = probs.row(i);
                let dp = dprobs.row(i);
                let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
                for (j, out) in dscores.row_mut(i).iter_mut().enumerate() {
                    *out = p[j] * (dp[j] - dot);
                }
            }
            let mut dq_h = dscores.matmul(&k_h);
            dq_h.scale(scale);
            let mut dk_h = dscores.transpose().matmul(&q_h);
            dk_h.scale(scale);
            for i in 0..n {
                dq.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(dq_h.row(i));
                dk.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(dk_h.row(i));
                dv.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(dv_h.row(i));
            }
        }

        grads.base[lb + G_WQ].add_assign(&lt.a1.transpose().matmul(&dq));
        grads.base[lb + G_WK].add_assign(&lt.a1.transpose().matmul(&dk));
        grads.base[lb + G_WV].add_assign(&lt.a1.transpose().matmul(&dv));
        let mut da1 = dq.matmul(&lw.wq.transpose());
        da1.add_assign(&dk.matmul(&lw.wk.transpose()));
        da1.add_assign(&dv.matmul(&lw.wv.transpose()));
        if let Some(ad) = adapters {
            let ab = l * A_STRIDE;
            let la = &ad.layers[l];
            let ql = lt.q_lora_in.as_ref().expect("adapter tape");
            grads.adapters[ab + 1].add_assign(&ql.transpose().matmul(&dq)); // q_b
            let dql = dq.matmul(&la.q_b.transpose());
            grads.adapters[ab].add_assign(&lt.a1.transpose().matmul(&dql)); // q_a
            da1.add_assign(&dql.matmul(&la.q_a.transpose()));
            let vl = lt.v_lora_in.as_ref().expect("adapter tape");
            grads.adapters[ab + 3].add_assign(&vl.transpose().matmul(&dv)); // v_b
            let dvl = dv.matmul(&la.v_b.transpose());
            grads.adapters[ab + 2].add_assign(&lt.a1.transpose().matmul(&dvl)); // v_a
            da1.add_assign(&dvl.matmul(&la.v_a.transpose()));
        }
        {
            let split = split_two(&mut grads.base, lb + G_LN1_G, lb + G_LN1_B);
            let dx_in = layer_norm_backward(&da1, &lt.ln1, lw.ln1_g.row(0), split.0, split.1);
            dx.add_assign(&dx_in);
        }
    }

    // Embeddings.
    for (r, &t) in tape.row_tokens.iter().enumerate() {
        let drow = dx.row(r);
        let te = grads.base[G_TOK_EMB].row_mut(t as usize);
        for (o, &v) in te.iter_mut().zip(drow.iter()) {
            *o += v;
        }
        let pe = grads.base[G_POS_EMB].row_mut(r);
        for (o, &v) in pe.iter_mut().zip(drow.iter()) {
            *o += v;
        }
    }
}

fn add_colsum(dst: &mut RealMatrix, src: &RealMatrix) {
    for i in 0..src.rows {
        for (o, &v) in dst.data.iter_mut().zip(src.row(i).iter()) {
            *o += v;
        }
    }
}

fn split_two(v: &mut [RealMatrix], i: usize, j: usize) -> (&mut RealMatrix, &mut RealMatrix) {
    assert!(i < j);
    let (a, b) = v.split_at_mut(j);
    (&mut a[i], &mut b[0])
}

// ---------------------------------------------------------------------------
// Batch-level objectives.
// ---------------------------------------------------------------------------

fn full_positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn full_mask(pattern: &AttentionPattern, cond_len: usize, n: usize) -> Result<AttnMask> {
    let all = full_positions(n);
    build_attention_mask(pattern, cond_len, &all, &all)
}

enum Objective<'a> {
    MaskedCe,
    Distill { teacher: &'a ModelBundle },
}

/// Loss and gradient for one sample. Returns the unscaled loss (sum over
/// masked positions); the gradient contribution is scaled by `inv_batch`.
fn sample_loss_and_grad(
    bundle: &ModelBundle,
    objective: &Objective,
    mask: &AttnMask,
    cond: &TokenSeq,
    clean: &TokenSeq,
    corruption: &CorruptionResult,
    inv_batch: f64,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let cfg = bundle.weights.config;
    if corruption.masked_set.is_empty() {
        return Ok(0.0);
    }
    let n = cond.len() + clean.len();
    let mut tokens = Vec::with_capacity(n);
    tokens.extend_from_slice(cond.as_slice());
    tokens.extend_from_slice(corruption.corrupted.as_slice());
    let rows: Vec<usize> = corruption.masked_set.iter().map(|&p| cfg.cond_len + p).collect();

    let tape = train_forward(bundle, &tokens, mask, &rows)?;
    let (loss, mut dlogits) = match objective {
        Objective::MaskedCe => {
            let targets: Vec<Token> =
                corruption.masked_set.iter().map(|&p| clean.get(p)).collect();
            loss_masked_ce(&tape.logits, &targets, cfg.mask_token)?
        }
        Objective::Distill { teacher } => {
            let all = full_positions(n);
            let out = forward(
                teacher,
                &ForwardRequest {
                    cond,
                    action: &corruption.corrupted,
                    pattern: &AttentionPattern::Bidirectional,
                    cache: None,
                    query_positions: &all,
                },
            )?;
            let mut teacher_rows = RealMatrix::zeros(rows.len(), out.logits.cols);
            for (i, &r) in rows.iter().enumerate() {
                teacher_rows.row_mut(i).copy_from_slice(out.logits.row(r));
            }
            kl_student_teacher(&tape.logits, &teacher_rows)?
        }
    };
    if let Some(grads) = grads {
        dlogits.scale(inv_batch);
        backward(bundle, &tape, &dlogits, grads);
    }
    Ok(loss)
}

fn objective_for<'a>(
    regime: Regime,
    teacher: Option<&'a ModelBundle>,
) -> Result<(Objective<'a>, bool)> {
    match regime {
        Regime::ActFinetune => Ok((Objective::MaskedCe, true)),
        Regime::BdFromScratch | Regime::BdFromFinetuned => Ok((Objective::MaskedCe, false)),
        Regime::AdFromFinetuned => {
            let teacher = teacher
                .ok_or_else(|| Error::Config("asymmetric distillation requires a teacher".into()))?;
            if teacher.adapters_active {
                return Err(Error::ProtocolViolation(
                    "teacher adapters must be disabled when computing teacher logits".into(),
                ));
            }
            Ok((Objective::Distill { teacher }, false))
        }
    }
}

/// Fixed number of gradient accumulation chunks, independent of thread
/// count, so batch sums are bit-reproducible under any parallelism.
const GRAD_CHUNKS: usize = 4;

/// Mean-over-batch loss and its gradients for the given regime.
pub fn batch_loss_and_grad(
    bundle: &ModelBundle,
    teacher: Option<&ModelBundle>,
    regime: Regime,
    layout: &BlockLayout,
    batch: &Batch,
) -> Result<(f64, Gradients)> {
    let cfg = bundle.weights.config;
    let (objective, bidirectional) = objective_for(regime, teacher)?;
    validate_batch_for(regime, batch)?;
    let pattern = if bidirectional {
        AttentionPattern::Bidirectional
    } else {
        AttentionPattern::BlockCausal(*layout)
    };
    let n = cfg.cond_len + batch.clean[0].len();
    let mask = full_mask(&pattern, cfg.cond_len, n)?;
    let b = batch.len();
    let inv_batch = 1.0 / b as f64;

    let chunk_size = b.div_ceil(GRAD_CHUNKS);
    let chunks: Vec<(usize, usize)> = (0..GRAD_CHUNKS)
        .map(|c| (c * chunk_size, ((c + 1) * chunk_size).min(b)))
        .filter(|(lo, hi)| lo < hi)
        .collect();
    let results: Vec<Result<(f64, Gradients)>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut grads = Gradients::zeros_like(bundle);
            let mut loss = 0.0;
            for i in lo..hi {
                loss += sample_loss_and_grad(
                    bundle,
                    &objective,
                    &mask,
                    &batch.cond[i],
                    &batch.clean[i],
                    &batch.corruption[i],
                    inv_batch,
                    Some(&mut grads),
                )?;
            }
            Ok((loss, grads))
        })
        .collect();

    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(bundle);
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.add_assign(&g);
    }
    Ok((total * inv_batch, grads))
}

fn validate_batch_for(regime: Regime, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let needs_forcing = !matches!(regime, Regime::ActFinetune);
    if needs_forcing && batch.schedules.iter().any(|s| s.is_none()) {
        return Err(Error::InvalidInput(
            "block-diffusion objectives need forcing-corrupted batches".into(),
        ));
    }
    Ok(())
}

/// Value-only Eq.-style losses (used by the gradient checker and tests).
pub fn loss_act_value(bundle: &ModelBundle, batch: &Batch) -> Result<f64> {
    batch_loss_value(bundle, None, Regime::ActFinetune, &dummy_layout(batch), batch)
}

/// Block-diffusion loss: masked CE under block-causal attention on a
/// forcing-corrupted batch.
pub fn loss_bd(bundle: &ModelBundle, layout: &BlockLayout, batch: &Batch) -> Result<f64> {
    batch_loss_value(bundle, None, Regime::BdFromScratch, layout, batch)
}

/// Asymmetric distillation loss: per-position KL(student || teacher) summed
/// over masked positions, mean over batch. The student sees the corrupted
/// sequence block-causally, the teacher bidirectionally.
pub fn loss_ad(
    student: &ModelBundle,
    teacher: &ModelBundle,
    layout: &BlockLayout,
    batch: &Batch,
) -> Result<f64> {
    batch_loss_value(student, Some(teacher), Regime::AdFromFinetuned, layout, batch)
}

fn dummy_layout(batch: &Batch) -> BlockLayout {
    let len = batch.clean.first().map_or(1, |c| c.len().max(1));
    BlockLayout { block_size: len, num_blocks: 1, region_start: 0 }
}

fn batch_loss_value(
    bundle: &ModelBundle,
    teacher: Option<&ModelBundle>,
    regime: Regime,
    layout: &BlockLayout,
    batch: &Batch,
) -> Result<f64> {
    let cfg = bundle.weights.config;
    let (objective, bidirectional) = objective_for(regime, teacher)?;
    validate_batch_for(regime, batch)?;
    let pattern = if bidirectional {
        AttentionPattern::Bidirectional
    } else {
        AttentionPattern::BlockCausal(*layout)
    };
    let n = cfg.cond_len + batch.clean[0].len();
    let mask = full_mask(&pattern, cfg.cond_len, n)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        total += sample_loss_and_grad(
            bundle,
            &objective,
            &mask,
            &batch.cond[i],
            &batch.clean[i],
            &batch.corruption[i],
            1.0,
            None,
        )?;
    }
    Ok(total / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainableSet {
    Base,
    Adapters,
}

/// Adam with bias correction over one trainable set (full weights, or
/// adapters only for the distillation regime).
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub trainable: TrainableSet,
    m: Vec<RealMatrix>,
    v: Vec<RealMatrix>,
}

impl OptimState {
    pub fn new(bundle: &ModelBundle, trainable: TrainableSet, lr: f64) -> Self {
        let shapes: Vec<(usize, usize)> = match trainable {
            TrainableSet::Base => {
                bundle.weights.tensors().iter().map(|(_, m)| (m.rows, m.cols)).collect()
            }
            TrainableSet::Adapters => bundle
                .adapters
                .as_ref()
                .map(|a| a.tensors().iter().map(|(_, m)| (m.rows, m.cols)).collect())
                .unwrap_or_default(),
        };
        let m = shapes.iter().map(|&(r, c)| RealMatrix::zeros(r, c)).collect::<Vec<_>>();
        let v = m.clone();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, trainable, m, v }
    }
}

/// One Adam update on a parameter slice. Exposed so the update rule can be
/// checked against a hand-stepped scalar reference.
#[allow(clippy::too_many_arguments)]
pub fn adam_update_slice(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

fn adam_apply(bundle: &mut ModelBundle, grads: &Gradients, optim: &mut OptimState) -> Result<()> {
    optim.step += 1;
    match optim.trainable {
        TrainableSet::Base => {
            let tensors = bundle.weights.tensors_mut();
            if tensors.len() != grads.base.len() || tensors.len() != optim.m.len() {
                return Err(Error::InvalidInput("optimizer/gradient registry mismatch".into()));
            }
            for (i, t) in tensors.into_iter().enumerate() {
                adam_update_slice(
                    &mut t.data,
                    &grads.base[i].data,
                    &mut optim.m[i].data,
                    &mut optim.v[i].data,
                    optim.step,
                    optim.lr,
                    optim.beta1,
                    optim.beta2,
                    optim.eps,
                );
            }
        }
        TrainableSet::Adapters => {
            let adapters = bundle
                .adapters
                .as_mut()
                .ok_or_else(|| Error::Config("adapter training without adapters".into()))?;
            let tensors = adapters.tensors_mut();
            if tensors.len() != grads.adapters.len() || tensors.len() != optim.m.len() {
                return Err(Error::InvalidInput("optimizer/gradient registry mismatch".into()));
            }
            for (i, t) in tensors.into_iter().enumerate() {
                adam_update_slice(
                    &mut t.data,
                    &grads.adapters[i].data,
                    &mut optim.m[i].data,
                    &mut optim.v[i].data,
                    optim.step,
                    optim.lr,
                    optim.beta1,
                    optim.beta2,
                    optim.eps,
                );
            }
        }
    }
    Ok(())
}

/// One optimization step: loss, gradients, Adam update on the regime's
/// trainable parameters. Deterministic given (bundle, batch, optimizer).
pub fn train_step(
    bundle: &mut ModelBundle,
    teacher: Option<&ModelBundle>,
    regime: Regime,
    layout: &BlockLayout,
    batch: &Batch,
    optim: &mut OptimState,
) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grad(bundle, teacher, regime, layout, batch)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {loss} at step {}", optim.step + 1)));
    }
    adam_apply(bundle, &grads, optim)?;
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Gradient verification.
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;

fn param_tensor_mut(bundle: &mut ModelBundle, set: TrainableSet, idx: usize) -> &mut RealMatrix {
    match set {
        TrainableSet::Base => bundle.weights.tensors_mut().into_iter().nth(idx).expect("tensor index"),
        TrainableSet::Adapters => bundle
            .adapters
            .as_mut()
            .expect("adapter set")
            .tensors_mut()
            .into_iter()
            .nth(idx)
            .expect("tensor index"),
    }
}

/// Central finite-difference check of `analytic` on randomly probed
/// parameters. Returns the maximum relative error with denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check(
    bundle: &ModelBundle,
    set: TrainableSet,
    analytic: &Gradients,
    loss_fn: &dyn Fn(&ModelBundle) -> Result<f64>,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return Err(Error::InvalidInput("need at least one probe".into()));
    }
    let grads = match set {
        TrainableSet::Base => &analytic.base,
        TrainableSet::Adapters => &analytic.adapters,
    };
    if grads.is_empty() {
        return Err(Error::InvalidInput("no tensors in the probed set".into()));
    }
    let mut work = bundle.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    for _ in 0..probes {
        let t = rng.gen_range(0..grads.len());
        let e = rng.gen_range(0..grads[t].data.len());
        let original = param_tensor_mut(&mut work, set, t).data[e];
        param_tensor_mut(&mut work, set, t).data[e] = original + FD_STEP;
        let plus = loss_fn(&work)?;
        param_tensor_mut(&mut work, set, t).data[e] = original - FD_STEP;
        let minus = loss_fn(&work)?;
        param_tensor_mut(&mut work, set, t).data[e] = original;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = grads[t].data[e];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

// ---------------------------------------------------------------------------
// Evaluation and the training driver.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionMode {
    Uniform,
    Forcing,
}

/// Fraction of masked positions where the block-causal student and the
/// bidirectional teacher pick the same argmax token (mask token excluded)
/// on forcing-corrupted episodes.
pub fn masked_argmax_agreement(
    student: &ModelBundle,
    teacher: &ModelBundle,
    layout: &BlockLayout,
    episodes: &[(TokenSeq, TokenSeq)],
    seed: u64,
) -> Result<f64> {
    let cfg = student.weights.config;
    let batch = make_forcing_batch(episodes, layout, cfg.mask_token, seed)?;
    let n = cfg.cond_len + batch.clean[0].len();
    let all: Vec<usize> = (0..n).collect();
    let student_pattern = AttentionPattern::BlockCausal(*layout);
    let counts: Vec<Result<(usize, usize)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let corruption = &batch.corruption[i];
            if corruption.masked_set.is_empty() {
                return Ok((0, 0));
            }
            let req = |bundle: &ModelBundle, pattern: &AttentionPattern| {
                forward(
                    bundle,
                    &ForwardRequest {
                        cond: &batch.cond[i],
                        action: &corruption.corrupted,
                        pattern,
                        cache: None,
                        query_positions: &all,
                    },
                )
            };
            let s_out = req(student, &student_pattern)?;
            let t_out = req(teacher, &AttentionPattern::Bidirectional)?;
            let mut agree = 0;
            for &p in &corruption.masked_set {
                let row = cfg.cond_len + p;
                let not_mask = |v: usize| v != cfg.mask_token as usize;
                let sp = argmax_where(s_out.logits.row(row), not_mask).expect("non-empty vocab");
                let tp = argmax_where(t_out.logits.row(row), not_mask).expect("non-empty vocab");
                if sp == tp {
                    agree += 1;
                }
            }
            Ok((agree, corruption.masked_set.len()))
        })
        .collect();
    let mut agree = 0usize;
    let mut total = 0usize;
    for c in counts {
        let (a, b) = c?;
        agree += a;
        total += b;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(agree as f64 / total as f64)
}

/// Held-out masked-token accuracy: argmax (mask token excluded) against the
/// clean tokens, over masked positions of freshly corrupted episodes.
pub fn masked_argmax_accuracy(
    bundle: &ModelBundle,
    pattern: &AttentionPattern,
    layout: &BlockLayout,
    episodes: &[(TokenSeq, TokenSeq)],
    mode: CorruptionMode,
    seed: u64,
) -> Result<f64> {
    let cfg = bundle.weights.config;
    let batch = match mode {
        CorruptionMode::Uniform => make_uniform_batch(episodes, cfg.mask_token, seed)?,
        CorruptionMode::Forcing => make_forcing_batch(episodes, layout, cfg.mask_token, seed)?,
    };
    let n = cfg.cond_len + batch.clean[0].len();
    let all = full_positions(n);
    let counts: Vec<Result<(usize, usize)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let corruption = &batch.corruption[i];
            if corruption.masked_set.is_empty() {
                return Ok((0, 0));
            }
            let out = forward(
                bundle,
                &ForwardRequest {
                    cond: &batch.cond[i],
                    action: &corruption.corrupted,
                    pattern,
                    cache: None,
                    query_positions: &all,
                },
            )?;
            let mut correct = 0;
            for &p in &corruption.masked_set {
                let row = out.logits.row(cfg.cond_len + p);
                let pred = argmax_where(row, |v| v != cfg.mask_token as usize)
                    .expect("non-empty vocab");
                if pred as Token == batch.clean[i].get(p) {
                    correct += 1;
                }
            }
            Ok((correct, corruption.masked_set.len()))
        })
        .collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for c in counts {
        let (a, b) = c?;
        correct += a;
        total += b;
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Stop once held-out masked-token accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 3e-4,
            eval_every: 100,
            eval_episodes: 48,
            target_accuracy: None,
            seed: 0,
        }
    }
}

/// Default adapter learning rate for the distillation regime.
pub const ADAPTER_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_accuracy: f64,
    pub steps_to_target: Option<usize>,
}

/// Observers for a training run. The log vector is caller-owned so a
/// diverged run still leaves its partial log behind; the eval hook fires at
/// every held-out evaluation with (step, model, accuracy).
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub log: Option<&'a mut Vec<TrainLogRow>>,
    pub on_eval: Option<&'a mut dyn FnMut(usize, &ModelBundle, f64)>,
}

pub const EVAL_SEED_SALT: u64 = 0x9d3c_0fa1_77ee_4210;

/// Generates (condition, clean action tokens) pairs for training or eval.
pub fn make_episodes(
    task: &TaskSpec,
    tok_cfg: &TokenizerConfig,
    base_seed: u64,
    count: usize,
) -> Result<Vec<(TokenSeq, TokenSeq)>> {
    (0..count)
        .map(|i| {
            let (cond, truth) = generate_episode(task, tok_cfg, episode_seed(base_seed, i as u64))?;
            Ok((cond, tokenize_actions(&truth, tok_cfg)))
        })
        .collect()
}

/// Runs a full training loop for the given regime, evaluating on held-out
/// episodes every `eval_every` steps and stopping early at the target
/// accuracy when one is set.
pub fn run_training(
    bundle: &mut ModelBundle,
    teacher: Option<&ModelBundle>,
    regime: Regime,
    task: &TaskSpec,
    tok_cfg: &TokenizerConfig,
    layout: &BlockLayout,
    opts: &TrainOptions,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let cfg = bundle.weights.config;
    if task.cond_len != cfg.cond_len {
        return Err(Error::Config(format!(
            "task cond_len {} != model cond_len {}",
            task.cond_len, cfg.cond_len
        )));
    }
    if layout.region_start != cfg.cond_len || layout.region_len() != tok_cfg.seq_len() {
        return Err(Error::Config("layout does not cover the action region".into()));
    }
    if regime.trains_adapters_only() && bundle.adapters.is_none() {
        return Err(Error::Config("distillation regime needs adapters".into()));
    }

    let eval_pattern = match regime {
        Regime::ActFinetune => AttentionPattern::Bidirectional,
        _ => AttentionPattern::BlockCausal(*layout),
    };
    let eval_mode = match regime {
        Regime::ActFinetune => CorruptionMode::Uniform,
        _ => CorruptionMode::Forcing,
    };
    let eval_episodes =
        make_episodes(task, tok_cfg, opts.seed ^ EVAL_SEED_SALT, opts.eval_episodes)?;

    let trainable = if regime.trains_adapters_only() {
        TrainableSet::Adapters
    } else {
        TrainableSet::Base
    };
    let mut optim = OptimState::new(bundle, trainable, opts.lr);
    let mask_token = cfg.mask_token;
    let start = std::time::Instant::now();
    let mut steps_to_target = None;
    let mut accuracy = f64::NAN;
    let mut steps_run = 0;
    let mut last_loss = f64::NAN;

    for step in 1..=opts.steps {
        let episodes = make_episodes(
            task,
            tok_cfg,
            episode_seed(opts.seed, step as u64),
            opts.batch_size,
        )?;
        let batch_seed = episode_seed(opts.seed ^ 0xbadc_0ffe, step as u64);
        let batch = match regime {
            Regime::ActFinetune => make_uniform_batch(&episodes, mask_token, batch_seed)?,
            _ => make_forcing_batch(&episodes, layout, mask_token, batch_seed)?,
        };
        // Cosine decay to 10% of the base rate over the configured steps.
        let progress = (step - 1) as f64 / opts.steps.max(1) as f64;
        optim.lr = opts.lr * (0.55 + 0.45 * (std::f64::consts::PI * progress).cos());
        last_loss = train_step(bundle, teacher, regime, layout, &batch, &mut optim)?;
        steps_run = step;

        if step % opts.eval_every == 0 || step == opts.steps {
            accuracy = masked_argmax_accuracy(
                bundle,
                &eval_pattern,
                layout,
                &eval_episodes,
                eval_mode,
                opts.seed ^ EVAL_SEED_SALT ^ 1,
            )?;
            let row = TrainLogRow {
                step,
                loss: last_loss,
                accuracy,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(log) = hooks.log.as_deref_mut() {
                log.push(row);
            }
            if let Some(cb) = hooks.on_eval.as_deref_mut() {
                cb(step, bundle, accuracy);
            }
            if let Some(target) = opts.target_accuracy {
                if accuracy >= target {
                    steps_to_target = Some(step);
                    break;
                }
            }
        }
    }
    if accuracy.is_nan() {
        accuracy = masked_argmax_accuracy(
            bundle,
            &eval_pattern,
            layout,
            &eval_episodes,
            eval_mode,
            opts.seed ^ EVAL_SEED_SALT ^ 1,
        )?;
        let row = TrainLogRow {
            step: steps_run,
            loss: last_loss,
            accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(log) = hooks.log.as_deref_mut() {
            log.push(row);
        }
        if let Some(cb) = hooks.on_eval.as_deref_mut() {
            cb(steps_run, bundle, accuracy);
        }
    }
    Ok(TrainOutcome { steps_run, final_accuracy: accuracy, steps_to_target })
}

/// Writes a training log as CSV: step, loss, masked-token accuracy, wall
/// seconds.
pub fn write_train_log_csv(path: &std::path::Path, log: &[TrainLogRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,masked_token_accuracy,wall_seconds")?;
    for row in log {
        writeln!(f, "{},{},{},{}", row.step, row.loss, row.accuracy, row.wall_seconds)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_adapters, init_weights, ModelConfig};

    const M_TOK: Token = 16;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            mask_token: M_TOK,
            eoa_token: Some(17),
            max_len: 24,
            cond_len: 4,
            layers: 2,
            heads: 2,
            model_dim: 8,
            adapter_rank: 3,
        }
    }

    fn small_layout() -> BlockLayout {
        BlockLayout::for_region(4, 4, 8).unwrap()
    }

    fn episodes(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<(TokenSeq, TokenSeq)> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64 * 7919 + 13));
                let cond =
                    TokenSeq::new((0..cfg.cond_len).map(|_| rng.gen_range(0..12u32)).collect());
                let clean = TokenSeq::new((0..8).map(|_| rng.gen_range(0..12u32)).collect());
                (cond, clean)
            })
            .collect()
    }

    #[test]
    fn uniform_ce_closed_form() {
        // Uniform logits over V=32 at 10 masked positions: 10 * ln 32.
        let logits = RealMatrix::zeros(10, 32);
        let targets: Vec<Token> = (0..10).collect();
        let (loss, dlogits) = loss_masked_ce(&logits, &targets, 31).unwrap();
        assert!((loss - 10.0 * 32.0_f64.ln()).abs() < 1e-9);
        // Gradient: softmax - onehot.
        assert!((dlogits.at(0, 0) - (1.0 / 32.0 - 1.0)).abs() < 1e-12);
        assert!((dlogits.at(0, 1) - 1.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn ce_of_certain_prediction_is_zero() {
        let mut logits = RealMatrix::zeros(1, 8);
        logits.set(0, 3, 60.0);
        let (loss, _) = loss_masked_ce(&logits, &[3], 7).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn ce_rejects_mask_target() {
        let logits = RealMatrix::zeros(1, 8);
        assert!(loss_masked_ce(&logits, &[7], 7).is_err());
    }

    #[test]
    fn empty_masked_set_gives_zero_loss() {
        let logits = RealMatrix::zeros(0, 8);
        let (loss, _) = loss_masked_ce(&logits, &[], 7).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn kl_zero_on_identical_and_matches_oracle() {
        let s = RealMatrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let (kl, _) = kl_student_teacher(&s, &s).unwrap();
        assert!(kl.abs() < 1e-12);

        let t = RealMatrix::from_fn(3, 5, |i, j| ((i + 2 * j) as f64 * 0.23).cos());
        let (kl, _) = kl_student_teacher(&s, &t).unwrap();
        // Brute-force oracle: sum q (ln q - ln p) from direct softmaxes.
        let mut oracle = 0.0;
        for r in 0..3 {
            let sr = s.row(r);
            let tr = t.row(r);
            let zs: f64 = sr.iter().map(|v| v.exp()).sum();
            let zt: f64 = tr.iter().map(|v| v.exp()).sum();
            for j in 0..5 {
                let q = sr[j].exp() / zs;
                let p = tr[j].exp() / zt;
                oracle += q * (q.ln() - p.ln());
            }
        }
        assert!((kl - oracle).abs() < 1e-9);
        assert!(kl >= 0.0);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // Quadratic toy f(x) = 0.5 x^2, grad = x, stepped by hand.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut x = [3.0f64];
        let mut m = [0.0f64];
        let mut v = [0.0f64];
        let mut rx = 3.0f64;
        let (mut rm, mut rv) = (0.0f64, 0.0f64);
        for step in 1..=25u64 {
            let g = x[0];
            adam_update_slice(&mut x, &[g], &mut m, &mut v, step, lr, b1, b2, eps);
            // Reference update.
            let rg = rx;
            rm = b1 * rm + (1.0 - b1) * rg;
            rv = b2 * rv + (1.0 - b2) * rg * rg;
            let mhat = rm / (1.0 - b1.powi(step as i32));
            let vhat = rv / (1.0 - b2.powi(step as i32));
            rx -= lr * mhat / (vhat.sqrt() + eps);
            assert!((x[0] - rx).abs() < 1e-12, "step {step}: {} vs {rx}", x[0]);
        }
        assert!(x[0].abs() < 3.0);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = small_cfg();
        let mut bundle = ModelBundle::base(init_weights(&cfg, 5).unwrap());
        let before: Vec<Vec<f64>> =
            bundle.weights.tensors().iter().map(|(_, m)| m.data.clone()).collect();
        let eps = episodes(&cfg, 4, 3);
        let batch = make_uniform_batch(&eps, M_TOK, 11).unwrap();
        let mut optim = OptimState::new(&bundle, TrainableSet::Base, 0.0);
        train_step(&mut bundle, None, Regime::ActFinetune, &small_layout(), &batch, &mut optim)
            .unwrap();
        for ((_, after), before) in bundle.weights.tensors().iter().zip(before.iter()) {
            assert_eq!(&after.data, before);
        }
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = small_cfg();
        let eps = episodes(&cfg, 6, 9);
        let batch = make_forcing_batch(&eps, &small_layout(), M_TOK, 21).unwrap();
        let run = || {
            let mut bundle = ModelBundle::base(init_weights(&cfg, 5).unwrap());
            let mut optim = OptimState::new(&bundle, TrainableSet::Base, 1e-3);
            let loss = train_step(
                &mut bundle,
                None,
                Regime::BdFromScratch,
                &small_layout(),
                &batch,
                &mut optim,
            )
            .unwrap();
            (loss, bundle.weights.tok_emb.data.clone())
        };
        let (l1, w1) = run();
        let (l2, w2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(w1.iter().zip(w2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bd_equals_masked_ce_for_single_block() {
        let cfg = small_cfg();
        let bundle = ModelBundle::base(init_weights(&cfg, 6).unwrap());
        let eps = episodes(&cfg, 5, 17);
        // Single block spanning the whole region: block-causal == bidirectional.
        let layout = BlockLayout::for_region(8, 4, 8).unwrap();
        let batch = make_forcing_batch(&eps, &layout, M_TOK, 33).unwrap();
        let bd = loss_bd(&bundle, &layout, &batch).unwrap();
        let act = loss_act_value(&bundle, &batch).unwrap();
        assert!((bd - act).abs() < 1e-9, "bd {bd} vs act {act}");
    }

    #[test]
    fn bd_on_unmasked_batch_is_zero() {
        let cfg = small_cfg();
        let bundle = ModelBundle::base(init_weights(&cfg, 6).unwrap());
        let eps = episodes(&cfg, 3, 2);
        let layout = small_layout();
        let mut batch = make_forcing_batch(&eps, &layout, M_TOK, 33).unwrap();
        for (c, clean) in batch.corruption.iter_mut().zip(batch.clean.iter()) {
            c.corrupted = clean.clone();
            c.masked_set.clear();
        }
        assert_eq!(loss_bd(&bundle, &layout, &batch).unwrap(), 0.0);
    }

    #[test]
    fn ad_zero_for_identical_views() {
        // Zero-contribution adapters and a single full-span block force the
        // student and teacher distributions to coincide.
        let cfg = small_cfg();
        let weights = init_weights(&cfg, 7).unwrap();
        let adapters = init_adapters(&cfg, 8).unwrap();
        let student = ModelBundle::with_adapters(weights.clone(), adapters);
        let teacher = ModelBundle::base(weights);
        let layout = BlockLayout::for_region(8, 4, 8).unwrap();
        let eps = episodes(&cfg, 4, 19);
        let batch = make_forcing_batch(&eps, &layout, M_TOK, 55).unwrap();
        let kl = loss_ad(&student, &teacher, &layout, &batch).unwrap();
        assert!(kl.abs() < 1e-9, "kl {kl}");
    }

    #[test]
    fn ad_rejects_active_teacher_adapters() {
        let cfg = small_cfg();
        let weights = init_weights(&cfg, 7).unwrap();
        let adapters = init_adapters(&cfg, 8).unwrap();
        let student = ModelBundle::with_adapters(weights.clone(), adapters.clone());
        let teacher = ModelBundle::with_adapters(weights, adapters); // active
        let layout = small_layout();
        let eps = episodes(&cfg, 2, 1);
        let batch = make_forcing_batch(&eps, &layout, M_TOK, 5).unwrap();
        assert!(matches!(
            loss_ad(&student, &teacher, &layout, &batch),
            Err(Error::ProtocolViolation(_))
        ));
    }

    #[test]
    fn teacher_unchanged_by_ad_steps() {
        let cfg = small_cfg();
        let weights = init_weights(&cfg, 7).unwrap();
        let adapters = init_adapters(&cfg, 8).unwrap();
        let mut student = ModelBundle::with_adapters(weights.clone(), adapters);
        let teacher = ModelBundle::base(weights);
        let teacher_before: Vec<Vec<f64>> =
            teacher.weights.tensors().iter().map(|(_, m)| m.data.clone()).collect();
        let layout = small_layout();
        let eps = episodes(&cfg, 4, 23);
        let batch = make_forcing_batch(&eps, &layout, M_TOK, 5).unwrap();
        let mut optim = OptimState::new(&student, TrainableSet::Adapters, 1e-3);
        for _ in 0..3 {
            train_step(
                &mut student,
                Some(&teacher),
                Regime::AdFromFinetuned,
                &layout,
                &batch,
                &mut optim,
            )
            .unwrap();
        }
        for ((_, after), before) in teacher.weights.tensors().iter().zip(teacher_before.iter()) {
            assert_eq!(&after.data, before);
        }
        // And the student's backbone is untouched; only adapters moved.
        for ((_, after), before) in student.weights.tensors().iter().zip(teacher_before.iter()) {
            assert_eq!(&after.data, before);
        }
    }

    #[test]
    fn train_forward_matches_inference_forward() {
        let cfg = small_cfg();
        let weights = init_weights(&cfg, 41).unwrap();
        let mut adapters = init_adapters(&cfg, 42).unwrap().unwrap();
        for t in adapters.tensors_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                if *v == 0.0 {
                    *v = 0.01 * ((i % 11) as f64 - 5.0);
                }
            }
        }
        let bundle = ModelBundle { weights, adapters: Some(adapters), adapters_active: true };
        let layout = small_layout();
        let pattern = AttentionPattern::BlockCausal(layout);
        let cond = TokenSeq::new(vec![1, 2, 3, 4]);
        let action = TokenSeq::new(vec![5, M_TOK, 7, M_TOK, 9, 10, M_TOK, 12]);
        let n = 12;
        let all = full_positions(n);
        let mut tokens = cond.as_slice().to_vec();
        tokens.extend_from_slice(action.as_slice());
        let mask = full_mask(&pattern, cfg.cond_len, n).unwrap();
        let tape = train_forward(&bundle, &tokens, &mask, &all).unwrap();
        let out = forward(
            &bundle,
            &ForwardRequest {
                cond: &cond,
                action: &action,
                pattern: &pattern,
                cache: None,
                query_positions: &all,
            },
        )
        .unwrap();
        assert_eq!(tape.logits.rows, out.logits.rows);
        for (a, b) in tape.logits.data.iter().zip(out.logits.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "training and inference forwards disagree");
        }
    }

    #[test]
    fn grad_check_masked_ce() {
        let cfg = small_cfg();
        let bundle = ModelBundle::base(init_weights(&cfg, 51).unwrap());
        let layout = small_layout();
        let eps = episodes(&cfg, 3, 61);
        let batch = make_uniform_batch(&eps, M_TOK, 71).unwrap();
        let (_, grads) =
            batch_loss_and_grad(&bundle, None, Regime::ActFinetune, &layout, &batch).unwrap();
        let loss_fn = |b: &ModelBundle| loss_act_value(b, &batch);
        let err = grad_check(&bundle, TrainableSet::Base, &grads, &loss_fn, 48, 5).unwrap();
        assert!(err <= 1e-4, "masked-ce grad error {err}");
    }

    #[test]
    fn grad_check_bd() {
        let cfg = small_cfg();
        let bundle = ModelBundle::base(init_weights(&cfg, 52).unwrap());
        let layout = small_layout();
        let eps = episodes(&cfg, 3, 62);
        let batch = make_forcing_batch(&eps, &layout, M_TOK, 72).unwrap();
        let (_, grads) =
            batch_loss_and_grad(&bundle, None, Regime::BdFromScratch, &layout, &batch).unwrap();
        let loss_fn = |b: &ModelBundle| loss_bd(b, &layout, &batch);
        let err = grad_check(&bundle, TrainableSet::Base, &grads, &loss_fn, 48, 6).unwrap();
        assert!(err <= 1e-4, "bd grad error {err}");
    }

    #[test]
    fn grad_check_ad_adapters() {
        let cfg = small_cfg();
        let weights = init_weights(&cfg, 53).unwrap();
        let mut adapters = init_adapters(&cfg, 54).unwrap().unwrap();
        for t in adapters.tensors_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                if *v == 0.0 {
                    *v = 0.02 * (((i * 13) % 9) as f64 - 4.0);
                }
            }
        }
        let student = ModelBundle { weights: weights.clone(), adapters: Some(adapters), adapters_active: true };
        let teacher = ModelBundle::base(weights);
        let layout = small_layout();
        let eps = episodes(&cfg, 3, 63);
        let batch = make_forcing_batch(&eps, &layout, M_TOK, 73).unwrap();
        let (_, grads) = batch_loss_and_grad(
            &student,
            Some(&teacher),
            Regime::AdFromFinetuned,
            &layout,
            &batch,
        )
        .unwrap();
        let loss_fn = |b: &ModelBundle| loss_ad(b, &teacher, &layout, &batch);
        let err = grad_check(&student, TrainableSet::Adapters, &grads, &loss_fn, 48, 7).unwrap();
        assert!(err <= 1e-4, "ad grad error {err}");
    }

    #[test]
    fn grad_check_constant_loss_is_flat() {
        // Empty masked sets: loss constant 0, analytic and numeric both 0.
        let cfg = small_cfg();
        let bundle = ModelBundle::base(init_weights(&cfg, 55).unwrap());
        let layout = small_layout();
        let eps = episodes(&cfg, 2, 64);
        let mut batch = make_uniform_batch(&eps, M_TOK, 74).unwrap();
        for (c, clean) in batch.corruption.iter_mut().zip(batch.clean.iter()) {
            c.corrupted = clean.clone();
            c.masked_set.clear();
        }
        let (loss, grads) =
            batch_loss_and_grad(&bundle, None, Regime::ActFinetune, &layout, &batch).unwrap();
        assert_eq!(loss, 0.0);
        let loss_fn = |b: &ModelBundle| loss_act_value(b, &batch);
        let err = grad_check(&bundle, TrainableSet::Base, &grads, &loss_fn, 16, 8).unwrap();
        assert!(err <= 1e-4, "constant-loss grad error {err}");
    }
}

