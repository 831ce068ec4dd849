//! Fixed causal video tokenizer.
//!
//! Geometry only: 8x compression along each axis plus 2x2 patchify, so one
//! token covers 16x16 pixels of 8 frames (the first frame forms its own
//! causal group). Each token is the per-channel block mean projected to the
//! latent dimension by a fixed seeded linear map. There is nothing trained
//! here; the point is the compression arithmetic and the causal first frame.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const TEMPORAL_FACTOR: usize = 8;
pub const SPATIAL_FACTOR: usize = 16; // 8x tokenize * 2x patchify
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy)]
pub struct TokenizerConfig {
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { latent_dim: 16, seed: 0x746f_6b31 }
    }
}

/// Tokenized video latents plus the bookkeeping to undo them.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    /// (T', Y', X', d)
    pub tokens: Tensor,
    pub source_extents: (usize, usize, usize),
}

impl LatentGrid {
    pub fn grid_extents(&self) -> (usize, usize, usize) {
        (self.tokens.shape[0], self.tokens.shape[1], self.tokens.shape[2])
    }

    pub fn latent_dim(&self) -> usize {
        self.tokens.shape[3]
    }

    pub fn num_tokens(&self) -> usize {
        let (t, y, x) = self.grid_extents();
        t * y * x
    }

    /// Flatten to (S, d) in (t', y', x') row-major order.
    pub fn flat_tokens(&self) -> Tensor {
        let s = self.num_tokens();
        let d = self.latent_dim();
        Tensor { shape: vec![s, d], data: self.tokens.data.clone(), requires_grad: false }
    }

    /// Rebuild from flattened (S, d) tokens with this grid's geometry.
    pub fn with_flat_tokens(&self, flat: &Tensor) -> Result<LatentGrid> {
        let (tp, yp, xp) = self.grid_extents();
        let d = self.latent_dim();
        if flat.shape != vec![tp * yp * xp, d] {
            return Err(CoreError::Shape(format!(
                "flat tokens {:?} do not match grid ({tp},{yp},{xp},{d})",
                flat.shape
            )));
        }
        Ok(LatentGrid {
            tokens: Tensor { shape: vec![tp, yp, xp, d], data: flat.data.clone(), requires_grad: false },
            source_extents: self.source_extents,
        })
    }

    /// Pixel-space receptive field of token (t', y', x'):
    /// frame range, row range, column range. The first temporal group is
    /// frame 0 alone; later groups cover 8 frames each.
    pub fn receptive_field(
        tp: usize,
        yp: usize,
        xp: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let t_range = if tp == 0 { 0..1 } else { (1 + (tp - 1) * TEMPORAL_FACTOR)..(1 + tp * TEMPORAL_FACTOR) };
        let y_range = yp * SPATIAL_FACTOR..(yp + 1) * SPATIAL_FACTOR;
        let x_range = xp * SPATIAL_FACTOR..(xp + 1) * SPATIAL_FACTOR;
        (t_range, y_range, x_range)
    }
}

/// Latent grid extents for a (T, Y, X) video.
pub fn grid_extents(t: usize, y: usize, x: usize) -> Result<(usize, usize, usize)> {
    if t == 0 || (t - 1) % TEMPORAL_FACTOR != 0 {
        return Err(CoreError::Shape(format!(
            "frame count {t} must satisfy (T-1) divisible by {TEMPORAL_FACTOR}"
        )));
    }
    if y == 0 || y % SPATIAL_FACTOR != 0 || x == 0 || x % SPATIAL_FACTOR != 0 {
        return Err(CoreError::Shape(format!(
            "spatial extents ({y}, {x}) must be divisible by {SPATIAL_FACTOR}"
        )));
    }
    Ok(((t - 1) / TEMPORAL_FACTOR + 1, y / SPATIAL_FACTOR, x / SPATIAL_FACTOR))
}

/// Number of tokens for a (T, Y, X) video: (X/16) * (Y/16) * ((T-1)/8 + 1).
pub fn token_count(t: usize, y: usize, x: usize) -> Result<usize> {
    let (tp, yp, xp) = grid_extents(t, y, x)?;
    Ok(xp * yp * tp)
}

pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    /// (3, d) fixed seeded projection.
    proj: Tensor,
    /// (d, 3) pseudo-inverse of `proj`.
    pinv: Tensor,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig) -> Result<Self> {
        if cfg.latent_dim < CHANNELS {
            return Err(CoreError::Config(format!(
                "latent dim {} must be at least {CHANNELS}",
                cfg.latent_dim
            )));
        }
        let mut rng = RngStream::new(cfg.seed);
        let proj = Tensor::randn(&[CHANNELS, cfg.latent_dim], 1.0, &mut rng);
        let pinv = pseudo_inverse_3xd(&proj)?;
        Ok(Tokenizer { cfg, proj, pinv })
    }

    pub fn tokenize(&self, video: &Tensor) -> Result<LatentGrid> {
        if video.rank() != 4 || video.shape[3] != CHANNELS {
            return Err(CoreError::Shape(format!(
                "expected video (T, Y, X, {CHANNELS}), got {:?}",
                video.shape
            )));
        }
        let (t, y, x) = (video.shape[0], video.shape[1], video.shape[2]);
        let (tp, yp, xp) = grid_extents(t, y, x)?;
        let d = self.cfg.latent_dim;
        let mut tokens = Tensor::zeros(&[tp, yp, xp, d]);
        for gt in 0..tp {
            for gy in 0..yp {
                for gx in 0..xp {
                    let (tr, yr, xr) = LatentGrid::receptive_field(gt, gy, gx);
                    // f64 accumulation keeps constant-block means exact for
                    // both the 1-frame causal group and the 8-frame groups.
                    let mut sum = [0.0f64; CHANNELS];
                    let count = (tr.len() * yr.len() * xr.len()) as f64;
                    for ft in tr.clone() {
                        for fy in yr.clone() {
                            for fx in xr.clone() {
                                let base = ((ft * y + fy) * x + fx) * CHANNELS;
                                for (c, m) in sum.iter_mut().enumerate() {
                                    *m += video.data[base + c] as f64;
                                }
                            }
                        }
                    }
                    let mean: [f32; CHANNELS] =
                        std::array::from_fn(|c| (sum[c] / count) as f32);
                    let out = ((gt * yp + gy) * xp + gx) * d;
                    for j in 0..d {
                        let mut acc = 0.0f32;
                        for (c, m) in mean.iter().enumerate() {
                            acc += m * self.proj.data[c * d + j];
                        }
                        tokens.data[out + j] = acc;
                    }
                }
            }
        }
        Ok(LatentGrid { tokens, source_extents: (t, y, x) })
    }

    /// Pseudo-inverse projection back to channel means, then nearest-neighbor
    /// upsampling over each token's receptive field.
    pub fn detokenize(&self, grid: &LatentGrid) -> Result<Tensor> {
        let (t, y, x) = grid.source_extents;
        let (tp, yp, xp) = grid.grid_extents();
        let d = grid.latent_dim();
        if d != self.cfg.latent_dim {
            return Err(CoreError::Shape(format!(
                "grid latent dim {d} does not match tokenizer dim {}",
                self.cfg.latent_dim
            )));
        }
        let mut video = Tensor::zeros(&[t, y, x, CHANNELS]);
        for gt in 0..tp {
            for gy in 0..yp {
                for gx in 0..xp {
                    let tok = ((gt * yp + gy) * xp + gx) * d;
                    let mut mean = [0.0f32; CHANNELS];
                    for (c, m) in mean.iter_mut().enumerate() {
                        let mut acc = 0.0f32;
                        for j in 0..d {
                            acc += grid.tokens.data[tok + j] * self.pinv.data[j * CHANNELS + c];
                        }
                        *m = acc;
                    }
                    let (tr, yr, xr) = LatentGrid::receptive_field(gt, gy, gx);
                    for ft in tr.clone() {
                        for fy in yr.clone() {
                            for fx in xr.clone() {
                                let base = ((ft * y + fy) * x + fx) * CHANNELS;
                                video.data[base..base + CHANNELS].copy_from_slice(&mean);
                            }
                        }
                    }
                }
            }
        }
        Ok(video)
    }
}

/// Right pseudo-inverse of a full-row-rank (3, d) matrix: P^T (P P^T)^-1,
/// computed in f64.
fn pseudo_inverse_3xd(p: &Tensor) -> Result<Tensor> {
    let (c, d) = p.as_matrix()?;
    debug_assert_eq!(c, CHANNELS);
    // G = P P^T (3x3)
    let mut g = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..d {
                g[i][j] += p.data[i * d + k] as f64 * p.data[j * d + k] as f64;
            }
        }
    }
    let det = g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1])
        - g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0])
        + g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0]);
    if det.abs() < 1e-12 {
        return Err(CoreError::Numeric("tokenizer projection is rank-deficient".into()));
    }
    let inv = [
        [
            (g[1][1] * g[2][2] - g[1][2] * g[2][1]) / det,
            (g[0][2] * g[2][1] - g[0][1] * g[2][2]) / det,
            (g[0][1] * g[1][2] - g[0][2] * g[1][1]) / det,
        ],
        [
            (g[1][2] * g[2][0] - g[1][0] * g[2][2]) / det,
            (g[0][0] * g[2][2] - g[0][2] * g[2][0]) / det,
            (g[0][2] * g[1][0] - g[0][0] * g[1][2]) / det,
        ],
        [
            (g[1][0] * g[2][1] - g[1][1] * g[2][0]) / det,
            (g[0][1] * g[2][0] - g[0][0] * g[2][1]) / det,
            (g[0][0] * g[1][1] - g[0][1] * g[1][0]) / det,
        ],
    ];
    // pinv = P^T G^-1 (d x 3)
    let mut out = Tensor::zeros(&[d, 3]);
    for k in 0..d {
        for j in 0..3 {
            let mut acc = 0.0f64;
            for i in 0..3 {
                acc += p.data[i * d + k] as f64 * inv[i][j];
            }
            out.data[k * 3 + j] = acc as f32;
        }
    }
    Ok(out)
}
