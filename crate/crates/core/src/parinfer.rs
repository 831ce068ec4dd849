//! Simulated multi-worker inference: pure data parallelism in non-attention
//! layers (contiguous sequence shards), head parallelism in attention via an
//! all-to-all exchange, and a positive/negative conditioning split across two
//! worker groups when guidance is active.
//!
//! Workers are in-process threads exchanging messages through a
//! [`Collective`] of per-pair channels; the exchange schedule is fixed
//! (send to peers ascending, then receive ascending), reductions gather in
//! ascending worker order, and every row-local kernel is shared with the
//! serial path, so parallel results are bit-equal to serial ones.

use crate::controlnet::{fused_denoise, ControlBranch};
use crate::denoiser::{positional_encoding, DiTParams, TextEmbedding};
use crate::diffusion::{cfg_combine, GuidanceConfig, NoiseSchedule, Sampler};
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tape::linear_rows;
use crate::tensor::{attention_single_head, Tensor};
use crate::tokenizer::{LatentGrid, Tokenizer};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Mutex;
use std::time::Instant;

// ── Shard plan ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ShardPlan {
    pub workers: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub guidance: bool,
    /// Worker ids per CFG group (one group without guidance, two with).
    pub groups: Vec<Vec<usize>>,
    /// Per worker: contiguous token range within its group's copy of the
    /// sequence.
    pub seq_ranges: Vec<(usize, usize)>,
    /// Per worker: attention heads owned within its group.
    pub head_assignments: Vec<Vec<usize>>,
}

/// Contiguous near-equal split of `[0, n)` into `parts` ranges.
pub fn split_ranges(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Build the worker layout. With guidance the workers split into a positive
/// and a negative group of W/2 each; heads are assigned round-robin within a
/// group and sequence shards are contiguous and near-equal.
pub fn make_shard_plan(workers: usize, seq_len: usize, heads: usize, guidance: bool) -> Result<ShardPlan> {
    if workers == 0 {
        return Err(CoreError::Plan("need at least one worker".into()));
    }
    if seq_len < workers {
        return Err(CoreError::Plan(format!(
            "sequence of {seq_len} tokens cannot feed {workers} workers"
        )));
    }
    let groups: Vec<Vec<usize>> = if guidance {
        if workers % 2 != 0 {
            return Err(CoreError::Plan(format!(
                "guidance needs an even worker count, got {workers}"
            )));
        }
        let half = workers / 2;
        if heads % half != 0 {
            return Err(CoreError::Plan(format!(
                "{heads} heads not divisible by group size {half}"
            )));
        }
        vec![(0..half).collect(), (half..workers).collect()]
    } else {
        if heads % workers != 0 {
            return Err(CoreError::Plan(format!(
                "{heads} heads not divisible by {workers} workers"
            )));
        }
        vec![(0..workers).collect()]
    };
    let mut seq_ranges = vec![(0usize, 0usize); workers];
    let mut head_assignments = vec![Vec::new(); workers];
    for group in &groups {
        let g = group.len();
        let ranges = split_ranges(seq_len, g);
        for (local, &w) in group.iter().enumerate() {
            seq_ranges[w] = ranges[local];
            head_assignments[w] = (0..heads).filter(|h| h % g == local).collect();
        }
    }
    Ok(ShardPlan { workers, seq_len, heads, guidance, groups, seq_ranges, head_assignments })
}

impl ShardPlan {
    pub fn group_of(&self, worker: usize) -> usize {
        self.groups.iter().position(|g| g.contains(&worker)).expect("worker in a group")
    }

    pub fn group_size(&self) -> usize {
        self.groups[0].len()
    }
}

// ── Standalone all-to-all (the pure permutation semantics) ───────────

/// Redistribute seq-sharded, all-heads tensors into head-sharded,
/// full-sequence tensors for one worker group.
///
/// `shards[i]` is worker i's (rows_i, d) matrix; the result's entry i is
/// (seq_len, dh * heads_i): worker i's assigned heads over the full sequence,
/// head columns concatenated in ascending head order.
pub fn all_to_all(shards: &[Tensor], plan: &ShardPlan, group: usize) -> Result<Vec<Tensor>> {
    let ids = &plan.groups[group];
    if shards.len() != ids.len() {
        return Err(CoreError::Shape(format!(
            "{} shards for a group of {}",
            shards.len(),
            ids.len()
        )));
    }
    let d = shards[0].shape[1];
    let dh = d / plan.heads;
    let s = plan.seq_len;
    let mut out = Vec::with_capacity(ids.len());
    for &w in ids {
        let heads = &plan.head_assignments[w];
        let mut t = Tensor::zeros(&[s, dh * heads.len()]);
        for (src_local, &src_w) in ids.iter().enumerate() {
            let (r0, r1) = plan.seq_ranges[src_w];
            let shard = &shards[src_local];
            if shard.shape != vec![r1 - r0, d] {
                return Err(CoreError::Shape(format!(
                    "shard {src_local} is {:?}, expected ({}, {d})",
                    shard.shape,
                    r1 - r0
                )));
            }
            for (hi, &h) in heads.iter().enumerate() {
                for r in r0..r1 {
                    let src = (r - r0) * d + h * dh;
                    let dst = r * (dh * heads.len()) + hi * dh;
                    t.data[dst..dst + dh].copy_from_slice(&shard.data[src..src + dh]);
                }
            }
        }
        out.push(t);
    }
    Ok(out)
}

/// Inverse redistribution: head-sharded full-sequence tensors back to
/// seq-sharded all-heads shards.
pub fn all_to_all_inverse(head_tensors: &[Tensor], plan: &ShardPlan, group: usize) -> Result<Vec<Tensor>> {
    let ids = &plan.groups[group];
    // Every head appears exactly once across the group.
    let d: usize = head_tensors.iter().map(|t| t.shape[1]).sum();
    let dh = d / plan.heads;
    let mut out: Vec<Tensor> = ids
        .iter()
        .map(|&w| {
            let (r0, r1) = plan.seq_ranges[w];
            Tensor::zeros(&[r1 - r0, d])
        })
        .collect();
    for (src_local, &src_w) in ids.iter().enumerate() {
        let heads = &plan.head_assignments[src_w];
        let t = &head_tensors[src_local];
        for (dst_local, &dst_w) in ids.iter().enumerate() {
            let (r0, r1) = plan.seq_ranges[dst_w];
            for (hi, &h) in heads.iter().enumerate() {
                for r in r0..r1 {
                    let src = r * (dh * heads.len()) + hi * dh;
                    let dst = (r - r0) * d + h * dh;
                    out[dst_local].data[dst..dst + dh].copy_from_slice(&t.data[src..src + dh]);
                }
            }
        }
    }
    Ok(out)
}

// ── Collective ───────────────────────────────────────────────────────

/// Per-ordered-pair message channels plus byte accounting. The scatter
/// direction carries Q/K/V toward head owners; the gather direction carries
/// attention outputs back; `result_bytes` covers final prediction gathering.
pub struct Collective {
    senders: Vec<Vec<Option<Sender<Vec<f32>>>>>,
    receivers: Vec<Vec<Option<Mutex<Receiver<Vec<f32>>>>>>,
    pub scatter_bytes: AtomicU64,
    pub gather_bytes: AtomicU64,
    pub result_bytes: AtomicU64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Scatter,
    Gather,
    Result,
}

impl Collective {
    pub fn new(workers: usize) -> Collective {
        let mut senders: Vec<Vec<Option<Sender<Vec<f32>>>>> = (0..workers).map(|_| Vec::new()).collect();
        let mut receivers: Vec<Vec<Option<Mutex<Receiver<Vec<f32>>>>>> =
            (0..workers).map(|_| (0..workers).map(|_| None).collect()).collect();
        for from in 0..workers {
            for to in 0..workers {
                if from == to {
                    senders[from].push(None);
                } else {
                    let (tx, rx) = channel();
                    senders[from].push(Some(tx));
                    receivers[to][from] = Some(Mutex::new(rx));
                }
            }
        }
        Collective {
            senders,
            receivers,
            scatter_bytes: AtomicU64::new(0),
            gather_bytes: AtomicU64::new(0),
            result_bytes: AtomicU64::new(0),
        }
    }

    pub fn send(&self, from: usize, to: usize, payload: Vec<f32>, dir: Direction) {
        let counter = match dir {
            Direction::Scatter => &self.scatter_bytes,
            Direction::Gather => &self.gather_bytes,
            Direction::Result => &self.result_bytes,
        };
        counter.fetch_add((payload.len() * 4) as u64, Ordering::Relaxed);
        self.senders[from][to]
            .as_ref()
            .expect("no self-channel")
            .send(payload)
            .expect("peer hung up");
    }

    pub fn recv(&self, me: usize, from: usize) -> Vec<f32> {
        self.receivers[me][from]
            .as_ref()
            .expect("no self-channel")
            .lock()
            .expect("receiver lock")
            .recv()
            .expect("peer hung up")
    }

    pub fn reset_counters(&self) {
        self.scatter_bytes.store(0, Ordering::Relaxed);
        self.gather_bytes.store(0, Ordering::Relaxed);
        self.result_bytes.store(0, Ordering::Relaxed);
    }
}

// ── Worker-side sharded attention ────────────────────────────────────

/// One worker's attention over its sequence shard: scatter Q/K/V columns to
/// head owners, attend over the full sequence for owned heads, gather rows
/// back. Returns the (rows, d) attention output for this worker's shard.
#[allow(clippy::too_many_arguments)]
fn sharded_attention(
    collective: &Collective,
    plan: &ShardPlan,
    me: usize,
    q: &[f32],
    k: &[f32],
    v: &[f32],
    d: usize,
) -> Vec<f32> {
    let group_idx = plan.group_of(me);
    let group = &plan.groups[group_idx];
    let dh = d / plan.heads;
    let (r0, r1) = plan.seq_ranges[me];
    let rows = r1 - r0;
    let s = plan.seq_len;

    // Scatter: to each peer, this shard's columns for the peer's heads
    // (Q, then K, then V, heads ascending).
    let pack = |dst_heads: &[usize]| -> Vec<f32> {
        let mut msg = Vec::with_capacity(3 * rows * dh * dst_heads.len());
        for tensor in [q, k, v] {
            for &h in dst_heads {
                for r in 0..rows {
                    msg.extend_from_slice(&tensor[r * d + h * dh..r * d + (h + 1) * dh]);
                }
            }
        }
        msg
    };
    for &peer in group {
        if peer != me {
            collective.send(me, peer, pack(&plan.head_assignments[peer]), Direction::Scatter);
        }
    }

    // Assemble full-sequence Q/K/V per owned head, shard rows in ascending
    // worker order (local rows copied in place).
    let my_heads = &plan.head_assignments[me];
    let mut fq = vec![vec![0.0f32; s * dh]; my_heads.len()];
    let mut fk = vec![vec![0.0f32; s * dh]; my_heads.len()];
    let mut fv = vec![vec![0.0f32; s * dh]; my_heads.len()];
    for &src in group {
        let (s0, s1) = plan.seq_ranges[src];
        let srows = s1 - s0;
        if src == me {
            for (hi, &h) in my_heads.iter().enumerate() {
                for r in 0..rows {
                    let dst = (r0 + r) * dh;
                    fq[hi][dst..dst + dh].copy_from_slice(&q[r * d + h * dh..r * d + (h + 1) * dh]);
                    fk[hi][dst..dst + dh].copy_from_slice(&k[r * d + h * dh..r * d + (h + 1) * dh]);
                    fv[hi][dst..dst + dh].copy_from_slice(&v[r * d + h * dh..r * d + (h + 1) * dh]);
                }
            }
        } else {
            let msg = collective.recv(me, src);
            let block = srows * dh;
            for (ti, full) in [&mut fq, &mut fk, &mut fv].into_iter().enumerate() {
                for hi in 0..my_heads.len() {
                    let base = (ti * my_heads.len() + hi) * block;
                    for r in 0..srows {
                        let dst = (s0 + r) * dh;
                        full[hi][dst..dst + dh]
                            .copy_from_slice(&msg[base + r * dh..base + (r + 1) * dh]);
                    }
                }
            }
        }
    }

    // Full-sequence attention per owned head.
    let outs: Vec<Vec<f32>> = my_heads
        .iter()
        .enumerate()
        .map(|(hi, _)| attention_single_head(&fq[hi], &fk[hi], &fv[hi], s, dh))
        .collect();

    // Gather: send each peer the rows of its shard for my heads.
    for &peer in group {
        if peer == me {
            continue;
        }
        let (p0, p1) = plan.seq_ranges[peer];
        let mut msg = Vec::with_capacity((p1 - p0) * dh * my_heads.len());
        for out in &outs {
            for r in p0..p1 {
                msg.extend_from_slice(&out[r * dh..(r + 1) * dh]);
            }
        }
        collective.send(me, peer, msg, Direction::Gather);
    }
    let mut attn = vec![0.0f32; rows * d];
    for &src in group {
        if src == me {
            for (hi, &h) in my_heads.iter().enumerate() {
                for r in 0..rows {
                    attn[r * d + h * dh..r * d + (h + 1) * dh]
                        .copy_from_slice(&outs[hi][(r0 + r) * dh..(r0 + r + 1) * dh]);
                }
            }
        } else {
            let msg = collective.recv(me, src);
            let src_heads = &plan.head_assignments[src];
            for (hi, &h) in src_heads.iter().enumerate() {
                for r in 0..rows {
                    let base = (hi * rows + r) * dh;
                    attn[r * d + h * dh..r * d + (h + 1) * dh]
                        .copy_from_slice(&msg[base..base + dh]);
                }
            }
        }
    }
    attn
}

// ── Parallel fused denoise ───────────────────────────────────────────

/// Immutable model context shared by all workers.
pub struct ParallelModel<'a> {
    pub base: &'a DiTParams,
    pub branches: Vec<&'a ControlBranch>,
    pub controls: Vec<Tensor>,
    /// (N, S) token-resampled normalized weights.
    pub token_weights: Tensor,
}

/// One worker's full fused forward over its sequence shard.
fn worker_fused_forward(
    model: &ParallelModel,
    collective: &Collective,
    plan: &ShardPlan,
    me: usize,
    x: &Tensor,
    sigma: f32,
    cond: &[f32],
    pos: &Tensor,
) -> Result<Vec<f32>> {
    let d = model.base.cfg.model_dim;
    let (r0, r1) = plan.seq_ranges[me];
    let rows = r1 - r0;
    let x_rows = &x.data[r0 * d..r1 * d];
    let pos_rows = &pos.data[r0 * d..r1 * d];
    let stream0 = model.base.condition_rows(x_rows, pos_rows, cond, sigma, rows);

    let k_blocks = model.base.cfg.cond_blocks;
    let n_branches = model.branches.len();
    let s = plan.seq_len;

    // Branch activations, sharded; attention exchanges run inside the group.
    let mut injections: Vec<Option<Vec<f32>>> = vec![None; model.base.cfg.num_blocks];
    for bi in 0..n_branches {
        let branch = model.branches[bi];
        let c_rows = &model.controls[bi].data[r0 * d..r1 * d];
        let emb = linear_rows(c_rows, &branch.embed_w.data, Some(&branch.embed_b.data), rows, d, d);
        let mut stream: Vec<f32> = stream0.iter().zip(emb.iter()).map(|(a, b)| a + b).collect();
        let w_row = &model.token_weights.data[bi * s + r0..bi * s + r1];
        for (j, block) in branch.blocks.iter().enumerate() {
            let (q, k, v) = block.stage_qkv(&stream, rows, d);
            let attn = sharded_attention(collective, plan, me, &q, &k, &v, d);
            stream = block.stage_finish(&stream, &attn, rows, d);
            // Projection + per-token weighting, then accumulate (branch
            // ascending order matches the serial path).
            let mut proj = linear_rows(&stream, &branch.proj_w[j].data, Some(&branch.proj_b[j].data), rows, d, d);
            for r in 0..rows {
                for c in 0..d {
                    proj[r * d + c] *= w_row[r];
                }
            }
            match &mut injections[j] {
                Some(existing) => {
                    for (e, p) in existing.iter_mut().zip(proj.iter()) {
                        *e += p;
                    }
                }
                slot => *slot = Some(proj),
            }
        }
        debug_assert!(branch.blocks.len() == k_blocks);
    }

    // Base blocks with injections.
    let mut stream = stream0.clone();
    for (j, block) in model.base.blocks.iter().enumerate() {
        let (q, k, v) = block.stage_qkv(&stream, rows, d);
        let attn = sharded_attention(collective, plan, me, &q, &k, &v, d);
        stream = block.stage_finish(&stream, &attn, rows, d);
        if let Some(inj) = &injections[j] {
            for (v, i) in stream.iter_mut().zip(inj.iter()) {
                *v += i;
            }
        }
    }
    let mut delta = vec![0.0f32; rows * d];
    for ((slot, a), b) in delta.iter_mut().zip(stream.iter()).zip(stream0.iter()) {
        *slot = a - b;
    }
    Ok(model.base.head_rows(&delta, rows))
}

/// Guided parallel denoise: the positive group computes the positive-prompt
/// prediction on its shards, the negative group the negative one; shards are
/// gathered in ascending worker order and combined with CFG. Without
/// guidance the single group computes the positive prediction only.
#[allow(clippy::too_many_arguments)]
pub fn parallel_denoise(
    model: &ParallelModel,
    plan: &ShardPlan,
    collective: &Collective,
    x: &Tensor,
    sigma: f32,
    text_pos: &TextEmbedding,
    text_neg: &TextEmbedding,
    guidance_scale: f32,
    grid: (usize, usize, usize),
) -> Result<Tensor> {
    let d = model.base.cfg.model_dim;
    let (s, xd) = x.as_matrix()?;
    if s != plan.seq_len || xd != d {
        return Err(CoreError::Plan(format!(
            "input ({s}, {xd}) does not match plan seq {} / model dim {d}",
            plan.seq_len
        )));
    }
    let pos_enc = positional_encoding(grid, d);
    let cond_pos = model.base.cond_vector(sigma, text_pos)?;
    let cond_neg = model.base.cond_vector(sigma, text_neg)?;

    let predictions: Vec<Mutex<Option<Vec<f32>>>> = (0..plan.workers).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for w in 0..plan.workers {
            let cond = if plan.group_of(w) == 0 { &cond_pos } else { &cond_neg };
            let preds = &predictions;
            let pos_ref = &pos_enc;
            handles.push((
                w,
                scope.spawn(move || -> Result<()> {
                    let out = worker_fused_forward(model, collective, plan, w, x, sigma, cond, pos_ref)?;
                    *preds[w].lock().expect("prediction slot") = Some(out);
                    Ok(())
                }),
            ));
        }
        for (w, h) in handles {
            match h.join() {
                Ok(r) => r.map_err(|e| CoreError::Worker { worker: w, message: e.to_string() })?,
                Err(_) => {
                    return Err(CoreError::Worker { worker: w, message: "worker panicked".into() })
                }
            }
        }
        Ok(())
    })?;

    // Gather shards per group in ascending worker order.
    let gather = |group: &[usize]| -> Tensor {
        let mut full = Tensor::zeros(&[s, d]);
        for &w in group {
            let (r0, r1) = plan.seq_ranges[w];
            let shard = predictions[w].lock().expect("prediction slot");
            let shard = shard.as_ref().expect("worker finished");
            full.data[r0 * d..r1 * d].copy_from_slice(shard);
        }
        full
    };
    if plan.guidance {
        let n_pos = gather(&plan.groups[0]);
        let n_neg = gather(&plan.groups[1]);
        cfg_combine(&n_pos, &n_neg, guidance_scale)
    } else {
        Ok(gather(&plan.groups[0]))
    }
}

// ── Parallel sampling & benchmarks ───────────────────────────────────

/// Euler sampling identical to the serial sampler but with every denoiser
/// evaluation distributed over the plan. Returns the video and the wall time
/// spent inside the diffusion loop.
#[allow(clippy::too_many_arguments)]
pub fn parallel_sample_video(
    model: &ParallelModel,
    plan: &ShardPlan,
    tokenizer: &Tokenizer,
    template: &LatentGrid,
    prompt: &str,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<(Tensor, f64)> {
    schedule.validate()?;
    let grid_ext = template.grid_extents();
    let s = template.num_tokens();
    let d = template.latent_dim();
    let text_pos = TextEmbedding::from_prompt(prompt, model.base);
    let text_neg = TextEmbedding::from_prompt(&guidance.negative_prompt, model.base);
    let collective = Collective::new(plan.workers);

    let mut rng = RngStream::new(seed);
    let mut x = Tensor::zeros(&[s, d]);
    rng.fill_normal(&mut x.data, 0.0, 1.0);
    let sigmas = schedule.sigmas();
    for v in x.data.iter_mut() {
        *v *= sigmas[0];
    }
    let start = Instant::now();
    for (i, &sigma) in sigmas.iter().enumerate() {
        let n_hat = parallel_denoise(
            model, plan, &collective, &x, sigma, &text_pos, &text_neg, guidance.scale, grid_ext,
        )?;
        if !n_hat.is_finite() {
            return Err(CoreError::Numeric(format!("non-finite prediction at step {i}")));
        }
        let sigma_next = if i + 1 < sigmas.len() { sigmas[i + 1] } else { 0.0 };
        let dsigma = sigma_next - sigma;
        for (v, n) in x.data.iter_mut().zip(n_hat.data.iter()) {
            *v += dsigma * n;
        }
    }
    let diffusion_secs = start.elapsed().as_secs_f64();
    let grid = template.with_flat_tokens(&x)?;
    Ok((tokenizer.detokenize(&grid)?, diffusion_secs))
}

/// Scaling benchmark rows in the two-row layout: diffusion-only and
/// end-to-end wall times per worker count, plus the sampled videos for
/// equivalence checks.
pub struct BenchResult {
    pub workers: Vec<usize>,
    pub diffusion_secs: Vec<f64>,
    pub end_to_end_secs: Vec<f64>,
    pub videos: Vec<Tensor>,
}

impl BenchResult {
    /// CSV with a header of worker counts and the two timing rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("workers");
        for w in &self.workers {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
        out.push_str("Diffusion only");
        for t in &self.diffusion_secs {
            out.push_str(&format!(",{t:.4}"));
        }
        out.push('\n');
        out.push_str("End-to-end");
        for t in &self.end_to_end_secs {
            out.push_str(&format!(",{t:.4}"));
        }
        out.push('\n');
        out
    }

    pub fn speedups(&self) -> Vec<f64> {
        let base = self.diffusion_secs[0];
        self.diffusion_secs.iter().map(|t| base / t).collect()
    }
}

/// Run the sampling pipeline at each worker count with identical seeds,
/// recording wall times. Worker count 1 runs the serial engine (guidance on a
/// single worker has no group split). Each measurement keeps the fastest of
/// `repeats` runs.
#[allow(clippy::too_many_arguments)]
pub fn bench_scaling(
    model: &ParallelModel,
    tokenizer: &Tokenizer,
    template: &LatentGrid,
    prompt: &str,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
    worker_counts: &[usize],
    repeats: usize,
) -> Result<BenchResult> {
    let mut result = BenchResult {
        workers: worker_counts.to_vec(),
        diffusion_secs: Vec::new(),
        end_to_end_secs: Vec::new(),
        videos: Vec::new(),
    };
    let s = template.num_tokens();
    for &w in worker_counts {
        let mut best_diffusion = f64::INFINITY;
        let mut best_total = f64::INFINITY;
        let mut video = None;
        for _ in 0..repeats.max(1) {
            let t0 = Instant::now();
            let (v, diff) = if w == 1 {
                let sampler = Sampler {
                    base: model.base,
                    branches: model.branches.clone(),
                    controls: model.controls.clone(),
                    token_weights: model.token_weights.clone(),
                };
                let t = Instant::now();
                let v = crate::diffusion::sample_video(
                    &sampler, tokenizer, template, prompt, schedule, guidance, seed,
                )?;
                let el = t.elapsed().as_secs_f64();
                (v, el)
            } else {
                let plan = make_shard_plan(w, s, model.base.cfg.num_heads, true)?;
                parallel_sample_video(model, &plan, tokenizer, template, prompt, schedule, guidance, seed)?
            };
            let total = t0.elapsed().as_secs_f64();
            if diff < best_diffusion {
                best_diffusion = diff;
            }
            if total < best_total {
                best_total = total;
            }
            video = Some(v);
        }
        result.diffusion_secs.push(best_diffusion);
        result.end_to_end_secs.push(best_total);
        result.videos.push(video.expect("at least one run"));
    }
    Ok(result)
}

/// Serial reference for the guided denoise (used by equivalence tests).
#[allow(clippy::too_many_arguments)]
pub fn serial_guided_denoise(
    model: &ParallelModel,
    x: &Tensor,
    sigma: f32,
    text_pos: &TextEmbedding,
    text_neg: &TextEmbedding,
    guidance_scale: f32,
    grid: (usize, usize, usize),
    guidance: bool,
) -> Result<Tensor> {
    let n_pos = fused_denoise(
        model.base, &model.branches, x, sigma, text_pos, &model.controls, &model.token_weights, grid,
    )?;
    if !guidance {
        return Ok(n_pos);
    }
    let n_neg = fused_denoise(
        model.base, &model.branches, x, sigma, text_neg, &model.controls, &model.token_weights, grid,
    )?;
    cfg_combine(&n_pos, &n_neg, guidance_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controlnet::Modality;
    use crate::denoiser::DiTConfig;
    use crate::tokenizer::TokenizerConfig;

    #[test]
    fn paper_scale_plan() {
        let plan = make_shard_plan(64, 56_320, 32, true).unwrap();
        assert_eq!(plan.groups.len(), 2);
        assert_eq!(plan.groups[0].len(), 32);
        assert_eq!(plan.groups[1].len(), 32);
        for w in 0..64 {
            assert_eq!(plan.head_assignments[w].len(), 1, "one head per worker");
        }
        // Shards partition the 56K sequence within each group.
        for group in &plan.groups {
            let mut covered = 0;
            for &w in group {
                let (a, b) = plan.seq_ranges[w];
                covered += b - a;
            }
            assert_eq!(covered, 56_320);
        }
    }

    #[test]
    fn small_plan_heads_per_worker() {
        let plan = make_shard_plan(4, 64, 8, true).unwrap();
        assert_eq!(plan.groups[0], vec![0, 1]);
        assert_eq!(plan.head_assignments[0], vec![0, 2, 4, 6]);
        assert_eq!(plan.head_assignments[1], vec![1, 3, 5, 7]);
    }

    #[test]
    fn degenerate_single_worker_plan() {
        let plan = make_shard_plan(1, 10, 4, false).unwrap();
        assert_eq!(plan.groups, vec![vec![0]]);
        assert_eq!(plan.seq_ranges[0], (0, 10));
        assert_eq!(plan.head_assignments[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn plan_divisibility_errors() {
        assert!(make_shard_plan(3, 64, 8, true).is_err()); // odd with guidance
        assert!(make_shard_plan(6, 64, 8, true).is_err()); // 8 % 3 != 0
        assert!(make_shard_plan(5, 64, 8, false).is_err()); // 8 % 5 != 0
        assert!(make_shard_plan(4, 2, 8, false).is_err()); // S < W
    }

    #[test]
    fn all_to_all_round_trip_bit_identical() {
        let plan = make_shard_plan(4, 10, 4, false).unwrap();
        let mut rng = RngStream::new(1);
        let shards: Vec<Tensor> = (0..4)
            .map(|w| {
                let (a, b) = plan.seq_ranges[w];
                Tensor::randn(&[b - a, 8], 1.0, &mut rng)
            })
            .collect();
        let heads = all_to_all(&shards, &plan, 0).unwrap();
        let back = all_to_all_inverse(&heads, &plan, 0).unwrap();
        for (a, b) in shards.iter().zip(back.iter()) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn all_to_all_hand_traced_2x2() {
        // W=2, H=2, S=4, dh=1: worker 0 must end with head 0 over rows 0..4 =
        // concatenation of both workers' head-0 columns.
        let plan = make_shard_plan(2, 4, 2, false).unwrap();
        let s0 = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(); // rows 0..2
        let s1 = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap(); // rows 2..4
        let heads = all_to_all(&[s0, s1], &plan, 0).unwrap();
        // Worker 0 owns head 0 (column 0): [1, 3, 5, 7].
        assert_eq!(heads[0].shape, vec![4, 1]);
        assert_eq!(heads[0].data, vec![1.0, 3.0, 5.0, 7.0]);
        // Worker 1 owns head 1 (column 1): [2, 4, 6, 8].
        assert_eq!(heads[1].data, vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn all_to_all_single_worker_identity() {
        let plan = make_shard_plan(1, 3, 2, false).unwrap();
        let shard = Tensor::new(vec![3, 4], (0..12).map(|v| v as f32).collect()).unwrap();
        let heads = all_to_all(std::slice::from_ref(&shard), &plan, 0).unwrap();
        assert!(heads[0].bits_eq(&shard));
        let back = all_to_all_inverse(&heads, &plan, 0).unwrap();
        assert!(back[0].bits_eq(&shard));
    }

    #[test]
    fn all_to_all_conserves_multiset() {
        let plan = make_shard_plan(4, 9, 4, false).unwrap();
        let mut rng = RngStream::new(5);
        let shards: Vec<Tensor> = (0..4)
            .map(|w| {
                let (a, b) = plan.seq_ranges[w];
                Tensor::randn(&[b - a, 8], 1.0, &mut rng)
            })
            .collect();
        let heads = all_to_all(&shards, &plan, 0).unwrap();
        let mut before: Vec<u32> = shards.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect();
        let mut after: Vec<u32> = heads.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
    }

    fn toy_model(seed: u64, with_branch: bool) -> (DiTParams, Option<ControlBranch>, Tokenizer) {
        let cfg = DiTConfig { num_blocks: 4, num_heads: 4, model_dim: 16, text_dim: 8, sigma_dim: 8, cond_blocks: 3 };
        let base = DiTParams::init(cfg, seed).unwrap();
        let branch = with_branch.then(|| {
            let mut b = ControlBranch::new(&base, Modality::Seg, seed ^ 9);
            let mut rng = RngStream::new(seed ^ 33);
            for (_, t) in b.named_tensors_mut() {
                for v in t.data.iter_mut() {
                    *v += 0.05 * rng.next_normal();
                }
            }
            b
        });
        let tk = Tokenizer::new(TokenizerConfig { latent_dim: 16, seed: 7 }).unwrap();
        (base, branch, tk)
    }

    #[test]
    fn parallel_matches_serial_bitwise() {
        let (base, branch, tk) = toy_model(11, true);
        let branch = branch.unwrap();
        let template = tk.tokenize(&Tensor::zeros(&[9, 32, 64, 3])).unwrap();
        let s = template.num_tokens();
        let mut rng = RngStream::new(12);
        let x = Tensor::randn(&[s, 16], 1.0, &mut rng);
        let control = Tensor::randn(&[s, 16], 1.0, &mut rng);
        let mut tw = Tensor::zeros(&[1, s]);
        rng.fill_uniform(&mut tw.data, 0.0, 1.0);
        let model = ParallelModel {
            base: &base,
            branches: vec![&branch],
            controls: vec![control],
            token_weights: tw,
        };
        let pos = TextEmbedding::from_prompt("parallel", &base);
        let neg = TextEmbedding::from_prompt("negative", &base);
        let grid = template.grid_extents();
        let serial = serial_guided_denoise(&model, &x, 1.3, &pos, &neg, 1.7, grid, true).unwrap();
        for w in [2usize, 4] {
            let plan = make_shard_plan(w, s, 4, true).unwrap();
            let collective = Collective::new(w);
            let par = parallel_denoise(&model, &plan, &collective, &x, 1.3, &pos, &neg, 1.7, grid).unwrap();
            assert!(par.bits_eq(&serial), "W={w}");
        }
        // Guidance off, one worker: bit-identical to fused_denoise.
        let plan = make_shard_plan(1, s, 4, false).unwrap();
        let collective = Collective::new(1);
        let par = parallel_denoise(&model, &plan, &collective, &x, 1.3, &pos, &neg, 1.7, grid).unwrap();
        let fused = serial_guided_denoise(&model, &x, 1.3, &pos, &neg, 1.7, grid, false).unwrap();
        assert!(par.bits_eq(&fused));
    }

    #[test]
    fn communication_byte_accounting() {
        let (base, _, tk) = toy_model(13, false);
        let template = tk.tokenize(&Tensor::zeros(&[9, 32, 64, 3])).unwrap();
        let s = template.num_tokens();
        let d = base.cfg.model_dim;
        let mut rng = RngStream::new(14);
        let x = Tensor::randn(&[s, d], 1.0, &mut rng);
        let model = ParallelModel {
            base: &base,
            branches: vec![],
            controls: vec![],
            token_weights: Tensor::zeros(&[0, s]),
        };
        let pos = TextEmbedding::from_prompt("bytes", &base);
        let neg = TextEmbedding::from_prompt("", &base);
        let w = 4;
        let plan = make_shard_plan(w, s, 4, false).unwrap();
        let collective = Collective::new(w);
        parallel_denoise(&model, &plan, &collective, &x, 1.0, &pos, &neg, 1.0, template.grid_extents())
            .unwrap();
        // Per attention layer, per direction, aggregated over the group:
        // scatter moves 3 * S * d * (G-1)/G elements.
        let g = plan.group_size() as u64;
        let layers = base.cfg.num_blocks as u64; // no branches
        let shard_sum: u64 = plan.seq_ranges.iter().map(|(a, b)| (b - a) as u64).sum();
        assert_eq!(shard_sum, s as u64);
        let expect_scatter = layers * 3 * (s as u64) * (d as u64) * (g - 1) / g * 4;
        let expect_gather = layers * (s as u64) * (d as u64) * (g - 1) / g * 4;
        assert_eq!(collective.scatter_bytes.load(Ordering::Relaxed), expect_scatter);
        assert_eq!(collective.gather_bytes.load(Ordering::Relaxed), expect_gather);
    }

    #[test]
    fn cross_plan_agreement_on_sampled_video() {
        let (base, branch, tk) = toy_model(15, true);
        let branch = branch.unwrap();
        let template = tk.tokenize(&Tensor::zeros(&[1, 32, 32, 3])).unwrap();
        let s = template.num_tokens();
        let mut rng = RngStream::new(16);
        let control = Tensor::randn(&[s, 16], 1.0, &mut rng);
        let model = ParallelModel {
            base: &base,
            branches: vec![&branch],
            controls: vec![control],
            token_weights: Tensor::ones(&[1, s]),
        };
        let schedule = NoiseSchedule { sigma_min: 0.1, sigma_max: 5.0, steps: 3, rho: 7.0 };
        let guidance = GuidanceConfig { scale: 1.5, negative_prompt: "bad".into() };
        let plan2 = make_shard_plan(2, s, 4, true).unwrap();
        let plan4 = make_shard_plan(4, s, 4, true).unwrap();
        let (v2, _) = parallel_sample_video(&model, &plan2, &tk, &template, "p", &schedule, &guidance, 3).unwrap();
        let (v4, _) = parallel_sample_video(&model, &plan4, &tk, &template, "p", &schedule, &guidance, 3).unwrap();
        assert!(v2.max_abs_diff(&v4) <= 1e-5);
        assert!(v2.bits_eq(&v4));
    }

    #[test]
    fn bench_csv_layout() {
        let result = BenchResult {
            workers: vec![1, 2],
            diffusion_secs: vec![1.0, 0.6],
            end_to_end_secs: vec![1.2, 0.8],
            videos: vec![],
        };
        let csv = result.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("workers,1,2"));
        assert!(lines[1].starts_with("Diffusion only,"));
        assert!(lines[2].starts_with("End-to-end,"));
    }
}
