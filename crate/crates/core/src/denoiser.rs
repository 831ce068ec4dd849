//! Base diffusion-transformer denoiser.
//!
//! A stack of pre-norm transformer blocks over flattened video tokens,
//! predicting the noise added to them. Conditioning is additive: a sinusoidal
//! embedding of ln(sigma) and a hashed-token text embedding are projected to
//! the model dim and added to every token, together with fixed sinusoidal 3D
//! positions. The output head reads the residual-stream delta, so an untrained
//! network predicts (near) zero noise.
//!
//! Two execution paths share the same slice kernels:
//! - the taped path ([`DiTVars`]) used for training and serial inference,
//! - pure row-shard stages ([`BlockParams::stage_qkv`] and friends) used by
//!   the parallel engine. Row-local arithmetic is identical in both, which
//!   keeps serial and parallel outputs bit-equal.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tape::{linear_rows, GradTape, Var};
use crate::tensor::{attention_single_head, gelu, head_slice, head_unslice, layer_norm_rows, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;
pub const TEXT_VOCAB: usize = 256;
/// Scale applied to the fixed positional encodings.
pub const POS_SCALE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    /// Number of transformer blocks M.
    pub num_blocks: usize,
    /// Attention heads H; `model_dim` must be divisible by H.
    pub num_heads: usize,
    /// Model dimension d.
    pub model_dim: usize,
    pub text_dim: usize,
    /// Sinusoidal sigma-feature dimension (even).
    pub sigma_dim: usize,
    /// Number of conditional blocks K a control branch copies.
    pub cond_blocks: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            num_blocks: 6,
            num_heads: 8,
            model_dim: 64,
            text_dim: 32,
            sigma_dim: 16,
            cond_blocks: 3,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.num_heads != 0 {
            return Err(CoreError::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_blocks < self.cond_blocks {
            return Err(CoreError::Config(format!(
                "{} blocks cannot host {} injection points",
                self.num_blocks, self.cond_blocks
            )));
        }
        if self.sigma_dim % 2 != 0 {
            return Err(CoreError::Config("sigma_dim must be even".into()));
        }
        Ok(())
    }
}

/// Input normalization 1/sqrt(1 + sigma^2): keeps token magnitudes O(1)
/// across the whole sigma range so an additive-conditioned network can
/// actually be trained with plain gradient descent.
pub fn input_scale(sigma: f32) -> f32 {
    1.0 / (1.0 + sigma * sigma).sqrt()
}

// ── Parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockParams {
    fn init(d: usize, std: f32, rng: &mut RngStream) -> Self {
        BlockParams {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], std, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], std, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], std, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], std, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w1: Tensor::randn(&[d, 4 * d], std, rng),
            b1: Tensor::zeros(&[4 * d]),
            w2: Tensor::randn(&[4 * d, d], std, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn zeros(d: usize) -> Self {
        BlockParams {
            ln1_gamma: Tensor::zeros(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::zeros(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, 4 * d]),
            b1: Tensor::zeros(&[4 * d]),
            w2: Tensor::zeros(&[4 * d, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    // ── Pure row-shard stages ────────────────────────────────────────

    /// ln1 + Q/K/V projections for a row shard.
    pub fn stage_qkv(&self, x: &[f32], rows: usize, d: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let mut h = vec![0.0f32; rows * d];
        layer_norm_rows(x, &self.ln1_gamma.data, &self.ln1_beta.data, rows, d, LAYER_NORM_EPS, &mut h);
        let q = linear_rows(&h, &self.wq.data, Some(&self.bq.data), rows, d, d);
        let k = linear_rows(&h, &self.wk.data, Some(&self.bk.data), rows, d, d);
        let v = linear_rows(&h, &self.wv.data, Some(&self.bv.data), rows, d, d);
        (q, k, v)
    }

    /// Attention output projection + residual + MLP for a row shard.
    pub fn stage_finish(&self, x: &[f32], attn: &[f32], rows: usize, d: usize) -> Vec<f32> {
        let o = linear_rows(attn, &self.wo.data, Some(&self.bo.data), rows, d, d);
        let mut x1 = vec![0.0f32; rows * d];
        for (slot, (a, b)) in x1.iter_mut().zip(x.iter().zip(o.iter())) {
            *slot = a + b;
        }
        let mut h2 = vec![0.0f32; rows * d];
        layer_norm_rows(&x1, &self.ln2_gamma.data, &self.ln2_beta.data, rows, d, LAYER_NORM_EPS, &mut h2);
        let m = linear_rows(&h2, &self.w1.data, Some(&self.b1.data), rows, d, 4 * d);
        let g: Vec<f32> = m.iter().map(|&v| gelu(v)).collect();
        let m2 = linear_rows(&g, &self.w2.data, Some(&self.b2.data), rows, 4 * d, d);
        let mut out = vec![0.0f32; rows * d];
        for (slot, (a, b)) in out.iter_mut().zip(x1.iter().zip(m2.iter())) {
            *slot = a + b;
        }
        out
    }

    /// Full-sequence block forward (serial path).
    pub fn forward_rows(&self, x: &[f32], s: usize, d: usize, heads: usize) -> Vec<f32> {
        let (q, k, v) = self.stage_qkv(x, s, d);
        let attn = multi_head_attention(&q, &k, &v, s, d, heads);
        self.stage_finish(x, &attn, s, d)
    }
}

/// Multi-head attention over full (s, d) matrices with column-blocked heads.
pub fn multi_head_attention(q: &[f32], k: &[f32], v: &[f32], s: usize, d: usize, heads: usize) -> Vec<f32> {
    let dh = d / heads;
    let mut out = vec![0.0f32; s * d];
    for h in 0..heads {
        let qh = head_slice(q, s, d, h, dh);
        let kh = head_slice(k, s, d, h, dh);
        let vh = head_slice(v, s, d, h, dh);
        let oh = attention_single_head(&qh, &kh, &vh, s, dh);
        head_unslice(&oh, &mut out, s, d, h, dh);
    }
    out
}

/// Per-head Q/K/V exposed by [`attention_forward`] so callers can reproduce
/// the computation shard-by-shard.
pub struct AttentionInternals {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub heads: usize,
}

impl AttentionInternals {
    pub fn head_qkv(&self, h: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let (s, d) = (self.q.shape[0], self.q.shape[1]);
        let dh = d / self.heads;
        (
            head_slice(&self.q.data, s, d, h, dh),
            head_slice(&self.k.data, s, d, h, dh),
            head_slice(&self.v.data, s, d, h, dh),
        )
    }
}

/// Standalone multi-head self-attention (post-ln1 projections included),
/// returning the block's attention output before the output projection.
pub fn attention_forward(x: &Tensor, block: &BlockParams, heads: usize) -> Result<(Tensor, AttentionInternals)> {
    let (s, d) = x.as_matrix()?;
    if d % heads != 0 {
        return Err(CoreError::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    let (q, k, v) = block.stage_qkv(&x.data, s, d);
    let out = multi_head_attention(&q, &k, &v, s, d, heads);
    Ok((
        Tensor::new(vec![s, d], out)?,
        AttentionInternals {
            q: Tensor::new(vec![s, d], q)?,
            k: Tensor::new(vec![s, d], k)?,
            v: Tensor::new(vec![s, d], v)?,
            heads,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct DiTParams {
    pub cfg: DiTConfig,
    pub sigma_w: Tensor,
    pub sigma_b: Tensor,
    pub text_table: Tensor,
    pub text_w: Tensor,
    pub text_b: Tensor,
    pub blocks: Vec<BlockParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl DiTParams {
    /// Random small init. The output head starts at identity so control
    /// branches see a well-conditioned path to the prediction.
    pub fn init(cfg: DiTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let std = 0.02;
        let mut rng = RngStream::new(seed);
        let blocks = (0..cfg.num_blocks).map(|_| BlockParams::init(d, std, &mut rng)).collect();
        Ok(DiTParams {
            cfg,
            sigma_w: Tensor::randn(&[cfg.sigma_dim, d], std, &mut rng),
            sigma_b: Tensor::zeros(&[d]),
            text_table: Tensor::randn(&[TEXT_VOCAB, cfg.text_dim], 1.0, &mut rng),
            text_w: Tensor::randn(&[cfg.text_dim, d], std, &mut rng),
            text_b: Tensor::zeros(&[d]),
            blocks,
            out_w: Tensor::eye(d),
            out_b: Tensor::zeros(&[d]),
        })
    }

    /// All parameters zero (test fixture: the network must output zero).
    pub fn zeros(cfg: DiTConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(DiTParams {
            cfg,
            sigma_w: Tensor::zeros(&[cfg.sigma_dim, d]),
            sigma_b: Tensor::zeros(&[d]),
            text_table: Tensor::zeros(&[TEXT_VOCAB, cfg.text_dim]),
            text_w: Tensor::zeros(&[cfg.text_dim, d]),
            text_b: Tensor::zeros(&[d]),
            blocks: (0..cfg.num_blocks).map(|_| BlockParams::zeros(d)).collect(),
            out_w: Tensor::zeros(&[d, d]),
            out_b: Tensor::zeros(&[d]),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("sigma_w".to_string(), &self.sigma_w),
            ("sigma_b".to_string(), &self.sigma_b),
            ("text_table".to_string(), &self.text_table),
            ("text_w".to_string(), &self.text_w),
            ("text_b".to_string(), &self.text_b),
            ("out_w".to_string(), &self.out_w),
            ("out_b".to_string(), &self.out_b),
        ];
        for (j, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("blocks.{j}.{name}"), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("sigma_w".to_string(), &mut self.sigma_w),
            ("sigma_b".to_string(), &mut self.sigma_b),
            ("text_table".to_string(), &mut self.text_table),
            ("text_w".to_string(), &mut self.text_w),
            ("text_b".to_string(), &mut self.text_b),
            ("out_w".to_string(), &mut self.out_w),
            ("out_b".to_string(), &mut self.out_b),
        ];
        for (j, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.tensors_mut() {
                out.push((format!("blocks.{j}.{name}"), t));
            }
        }
        out
    }

    /// Sinusoidal features of ln(sigma) projected to the model dim, plus the
    /// projected text embedding: the additive conditioning vector.
    pub fn cond_vector(&self, sigma: f32, text: &TextEmbedding) -> Result<Vec<f32>> {
        let d = self.cfg.model_dim;
        let feat = sigma_features(sigma, self.cfg.sigma_dim)?;
        let sv = linear_rows(&feat.data, &self.sigma_w.data, Some(&self.sigma_b.data), 1, self.cfg.sigma_dim, d);
        let tv = linear_rows(&text.vector.data, &self.text_w.data, Some(&self.text_b.data), 1, self.cfg.text_dim, d);
        Ok(sv.iter().zip(tv.iter()).map(|(a, b)| a + b).collect())
    }

    /// Projected sigma embedding on its own.
    pub fn sigma_embed(&self, sigma: f32) -> Result<Tensor> {
        let feat = sigma_features(sigma, self.cfg.sigma_dim)?;
        let v = linear_rows(&feat.data, &self.sigma_w.data, Some(&self.sigma_b.data), 1, self.cfg.sigma_dim, self.cfg.model_dim);
        Tensor::new(vec![self.cfg.model_dim], v)
    }

    /// Conditioned stream for a row shard: x * s_in + cond + pos rows.
    pub fn condition_rows(&self, x: &[f32], pos: &[f32], cond: &[f32], sigma: f32, rows: usize) -> Vec<f32> {
        let d = self.cfg.model_dim;
        let s_in = input_scale(sigma);
        let mut out = vec![0.0f32; rows * d];
        for r in 0..rows {
            for i in 0..d {
                out[r * d + i] = (x[r * d + i] * s_in + cond[i]) + pos[r * d + i];
            }
        }
        out
    }

    /// Output head on a row shard of the residual-stream delta.
    pub fn head_rows(&self, delta: &[f32], rows: usize) -> Vec<f32> {
        let d = self.cfg.model_dim;
        linear_rows(delta, &self.out_w.data, Some(&self.out_b.data), rows, d, d)
    }

    /// Serial pure forward returning the noise prediction and every block's
    /// post-injection stream. `injections[j]`, when present, is added to the
    /// output of block j (the input of block j+1).
    pub fn forward_pure(
        &self,
        x: &Tensor,
        sigma: f32,
        text: &TextEmbedding,
        grid: (usize, usize, usize),
        injections: &[Option<Tensor>],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if sigma <= 0.0 {
            return Err(CoreError::Domain(format!("sigma must be positive, got {sigma}")));
        }
        if !x.is_finite() {
            return Err(CoreError::Numeric("non-finite denoiser input".into()));
        }
        let (s, d) = x.as_matrix()?;
        expect_tokens(grid, s)?;
        if d != self.cfg.model_dim {
            return Err(CoreError::Shape(format!("token dim {d} != model dim {}", self.cfg.model_dim)));
        }
        let pos = positional_encoding(grid, d);
        let cond = self.cond_vector(sigma, text)?;
        let stream0 = self.condition_rows(&x.data, &pos.data, &cond, sigma, s);
        let mut stream = stream0.clone();
        let mut block_streams = Vec::with_capacity(self.cfg.num_blocks);
        for (j, block) in self.blocks.iter().enumerate() {
            stream = block.forward_rows(&stream, s, d, self.cfg.num_heads);
            if let Some(Some(inj)) = injections.get(j) {
                for (v, i) in stream.iter_mut().zip(inj.data.iter()) {
                    *v += i;
                }
            }
            block_streams.push(Tensor::new(vec![s, d], stream.clone())?);
        }
        let mut delta = vec![0.0f32; s * d];
        for ((slot, a), b) in delta.iter_mut().zip(stream.iter()).zip(stream0.iter()) {
            *slot = a - b;
        }
        let noise = self.head_rows(&delta, s);
        Ok((Tensor::new(vec![s, d], noise)?, block_streams))
    }

    /// Base-model forward: no injections.
    pub fn denoise_base(
        &self,
        x: &Tensor,
        sigma: f32,
        text: &TextEmbedding,
        grid: (usize, usize, usize),
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let none: Vec<Option<Tensor>> = vec![None; self.cfg.num_blocks];
        self.forward_pure(x, sigma, text, grid, &none)
    }

    /// Resume the forward from block `from` (0-based), given that block's
    /// already-computed output stream. Used by the block-recomputation oracle.
    pub fn resume_from_block(
        &self,
        from: usize,
        stream_at_from: &Tensor,
        x: &Tensor,
        sigma: f32,
        text: &TextEmbedding,
        grid: (usize, usize, usize),
    ) -> Result<Tensor> {
        let (s, d) = x.as_matrix()?;
        let pos = positional_encoding(grid, d);
        let cond = self.cond_vector(sigma, text)?;
        let stream0 = self.condition_rows(&x.data, &pos.data, &cond, sigma, s);
        let mut stream = stream_at_from.data.clone();
        for block in &self.blocks[from + 1..] {
            stream = block.forward_rows(&stream, s, d, self.cfg.num_heads);
        }
        let mut delta = vec![0.0f32; s * d];
        for ((slot, a), b) in delta.iter_mut().zip(stream.iter()).zip(stream0.iter()) {
            *slot = a - b;
        }
        Tensor::new(vec![s, d], self.head_rows(&delta, s))
    }
}

fn expect_tokens(grid: (usize, usize, usize), s: usize) -> Result<()> {
    let want = grid.0 * grid.1 * grid.2;
    if want != s {
        return Err(CoreError::Shape(format!(
            "grid {:?} has {want} tokens but input has {s} rows",
            grid
        )));
    }
    Ok(())
}

// ── Conditioning pieces ──────────────────────────────────────────────

/// Sinusoidal features of ln(sigma): [sin(w_0 u), cos(w_0 u), sin(w_1 u), ...]
/// with u = ln(sigma) and geometric frequencies.
pub fn sigma_features(sigma: f32, dim: usize) -> Result<Tensor> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(CoreError::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let u = sigma.ln();
    let half = dim / 2;
    let mut out = Tensor::zeros(&[dim]);
    for i in 0..half {
        let freq = (10_000.0f32).powf(-(i as f32) / half as f32);
        out.data[2 * i] = (freq * u).sin();
        out.data[2 * i + 1] = (freq * u).cos();
    }
    Ok(out)
}

/// Fixed sinusoidal 3D positions for a (T', Y', X') token grid, flattened in
/// row-major token order, scaled by [`POS_SCALE`].
pub fn positional_encoding(grid: (usize, usize, usize), d: usize) -> Tensor {
    let (tp, yp, xp) = grid;
    let s = tp * yp * xp;
    let mut out = Tensor::zeros(&[s, d]);
    for t in 0..tp {
        for y in 0..yp {
            for x in 0..xp {
                let row = (t * yp + y) * xp + x;
                let coords = [t as f32, y as f32, x as f32];
                for j in 0..d {
                    let axis = j % 3;
                    let pair = j / 3;
                    let freq = (10_000.0f32).powf(-((pair / 2) as f32) / ((d / 6).max(1) as f32));
                    let v = freq * coords[axis];
                    out.data[row * d + j] = POS_SCALE * if pair % 2 == 0 { v.sin() } else { v.cos() };
                }
            }
        }
    }
    out
}

/// Deterministic prompt embedding: whitespace tokens hashed into a fixed
/// table, mean-pooled.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub vector: Tensor,
}

impl TextEmbedding {
    pub fn from_prompt(prompt: &str, params: &DiTParams) -> TextEmbedding {
        let dim = params.cfg.text_dim;
        let mut vector = Tensor::zeros(&[dim]);
        let mut count = 0usize;
        for token in prompt.split_whitespace() {
            let idx = (fnv1a(token.as_bytes()) % TEXT_VOCAB as u64) as usize;
            for i in 0..dim {
                vector.data[i] += params.text_table.data[idx * dim + i];
            }
            count += 1;
        }
        if count > 0 {
            for v in vector.data.iter_mut() {
                *v /= count as f32;
            }
        }
        TextEmbedding { vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.numel()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// ── Taped forward ────────────────────────────────────────────────────

pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BlockVars {
    pub fn bind(tape: &mut GradTape, block: &BlockParams, trainable: bool) -> BlockVars {
        let mut reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) };
        BlockVars {
            ln1_gamma: reg(&block.ln1_gamma),
            ln1_beta: reg(&block.ln1_beta),
            wq: reg(&block.wq),
            bq: reg(&block.bq),
            wk: reg(&block.wk),
            bk: reg(&block.bk),
            wv: reg(&block.wv),
            bv: reg(&block.bv),
            wo: reg(&block.wo),
            bo: reg(&block.bo),
            ln2_gamma: reg(&block.ln2_gamma),
            ln2_beta: reg(&block.ln2_beta),
            w1: reg(&block.w1),
            b1: reg(&block.b1),
            w2: reg(&block.w2),
            b2: reg(&block.b2),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.ln1_gamma, self.ln1_beta, self.wq, self.bq, self.wk, self.bk, self.wv,
            self.bv, self.wo, self.bo, self.ln2_gamma, self.ln2_beta, self.w1, self.b1,
            self.w2, self.b2,
        ]
    }

    /// Taped pre-norm block; bit-equal to [`BlockParams::forward_rows`].
    pub fn forward(&self, tape: &mut GradTape, x: Var, heads: usize) -> Result<Var> {
        let h = tape.layer_norm(x, self.ln1_gamma, self.ln1_beta, LAYER_NORM_EPS)?;
        let q0 = tape.matmul(h, self.wq)?;
        let q = tape.add_row_vec(q0, self.bq)?;
        let k0 = tape.matmul(h, self.wk)?;
        let k = tape.add_row_vec(k0, self.bk)?;
        let v0 = tape.matmul(h, self.wv)?;
        let v = tape.add_row_vec(v0, self.bv)?;
        let attn = tape.mha(q, k, v, heads)?;
        let o0 = tape.matmul(attn, self.wo)?;
        let o = tape.add_row_vec(o0, self.bo)?;
        let x1 = tape.add(x, o)?;
        let h2 = tape.layer_norm(x1, self.ln2_gamma, self.ln2_beta, LAYER_NORM_EPS)?;
        let m0 = tape.matmul(h2, self.w1)?;
        let m = tape.add_row_vec(m0, self.b1)?;
        let g = tape.gelu(m);
        let m20 = tape.matmul(g, self.w2)?;
        let m2 = tape.add_row_vec(m20, self.b2)?;
        tape.add(x1, m2)
    }
}

pub struct DiTVars {
    pub cfg: DiTConfig,
    pub sigma_w: Var,
    pub sigma_b: Var,
    pub text_w: Var,
    pub text_b: Var,
    pub blocks: Vec<BlockVars>,
    pub out_w: Var,
    pub out_b: Var,
}

/// Everything the taped forward produced, for instrumentation.
pub struct DiTTrace {
    /// Conditioned input stream (before block 1).
    pub stream0: Var,
    /// Post-injection stream after each block.
    pub block_streams: Vec<Var>,
    pub noise_pred: Var,
}

impl DiTVars {
    /// Register the base parameters on a tape. Pass `trainable = false` to
    /// freeze them (they become constants; the optimizer cannot see them).
    pub fn bind(tape: &mut GradTape, params: &DiTParams, trainable: bool) -> DiTVars {
        let mut reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) };
        let sigma_w = reg(&params.sigma_w);
        let sigma_b = reg(&params.sigma_b);
        let text_w = reg(&params.text_w);
        let text_b = reg(&params.text_b);
        let out_w = reg(&params.out_w);
        let out_b = reg(&params.out_b);
        let blocks = params
            .blocks
            .iter()
            .map(|b| BlockVars::bind(tape, b, trainable))
            .collect();
        DiTVars { cfg: params.cfg, sigma_w, sigma_b, text_w, text_b, blocks, out_w, out_b }
    }

    /// Taped conditioning: x * s_in + (sigma_vec + text_vec) + pos.
    pub fn condition(
        &self,
        tape: &mut GradTape,
        x: Var,
        sigma: f32,
        text: &TextEmbedding,
        grid: (usize, usize, usize),
    ) -> Result<Var> {
        let d = self.cfg.model_dim;
        let feat = sigma_features(sigma, self.cfg.sigma_dim)?.reshape(&[1, self.cfg.sigma_dim])?;
        let feat = tape.leaf(feat);
        let sv0 = tape.matmul(feat, self.sigma_w)?;
        let sv = tape.add_row_vec(sv0, self.sigma_b)?;
        let tvec = tape.leaf(text.vector.reshape(&[1, self.cfg.text_dim])?);
        let tv0 = tape.matmul(tvec, self.text_w)?;
        let tv = tape.add_row_vec(tv0, self.text_b)?;
        let cond = tape.add(sv, tv)?;
        let xs = tape.scale(x, input_scale(sigma));
        let xc = tape.add_row_vec(xs, cond)?;
        let pos = tape.leaf(positional_encoding(grid, d));
        tape.add(xc, pos)
    }

    /// Taped forward with optional per-block injections (`injections[j]`
    /// added to block j's output).
    pub fn forward(
        &self,
        tape: &mut GradTape,
        x: Var,
        sigma: f32,
        text: &TextEmbedding,
        grid: (usize, usize, usize),
        injections: &[Option<Var>],
    ) -> Result<DiTTrace> {
        if sigma <= 0.0 {
            return Err(CoreError::Domain(format!("sigma must be positive, got {sigma}")));
        }
        let stream0 = self.condition(tape, x, sigma, text, grid)?;
        let mut stream = stream0;
        let mut block_streams = Vec::with_capacity(self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            stream = block.forward(tape, stream, self.cfg.num_heads)?;
            if let Some(Some(inj)) = injections.get(j) {
                stream = tape.add(stream, *inj)?;
            }
            block_streams.push(stream);
        }
        let delta = tape.sub(stream, stream0)?;
        let n0 = tape.matmul(delta, self.out_w)?;
        let noise_pred = tape.add_row_vec(n0, self.out_b)?;
        Ok(DiTTrace { stream0, block_streams, noise_pred })
    }
}
