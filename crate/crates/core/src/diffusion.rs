//! Noise schedule, branch training, and the guided sampling loop.
//!
//! Branches are optimized against an unweighted MSE on the injected noise
//! while the base model stays frozen. Sampling is deterministic Euler
//! integration down a Karras-spaced sigma sequence with negative-prompt
//! classifier-free guidance.

use crate::controlnet::{
    fused_denoise, fused_forward_taped, BranchVars, ControlBranch, SpatiotemporalControlMap,
};
use crate::denoiser::{DiTParams, DiTVars, TextEmbedding};
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tape::GradTape;
use crate::tensor::Tensor;
use crate::tokenizer::{LatentGrid, Tokenizer};

// ── Schedule ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f32,
    pub sigma_max: f32,
    pub steps: usize,
    pub rho: f32,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { sigma_min: 0.02, sigma_max: 80.0, steps: 20, rho: 7.0 }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(CoreError::Config(format!(
                "need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.steps == 0 {
            return Err(CoreError::Config("schedule needs at least one step".into()));
        }
        Ok(())
    }

    /// Karras-spaced sigma sequence, strictly decreasing from sigma_max to
    /// sigma_min. Does not include the terminal zero.
    pub fn sigmas(&self) -> Vec<f32> {
        let n = self.steps;
        if n == 1 {
            return vec![self.sigma_max];
        }
        let inv_rho = 1.0 / self.rho;
        let lo = self.sigma_min.powf(inv_rho);
        let hi = self.sigma_max.powf(inv_rho);
        (0..n)
            .map(|i| {
                let t = i as f32 / (n - 1) as f32;
                (hi + t * (lo - hi)).powf(self.rho)
            })
            .collect()
    }

    /// Draw sigma log-uniformly from [sigma_min, sigma_max].
    pub fn sample_sigma(&self, rng: &mut RngStream) -> f32 {
        let u = rng.next_f32();
        (self.sigma_min.ln() + u * (self.sigma_max.ln() - self.sigma_min.ln())).exp()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f32,
    pub negative_prompt: String,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { scale: 1.5, negative_prompt: String::new() }
    }
}

// ── Core operations ──────────────────────────────────────────────────

/// x_sigma = x0 + sigma * eps with eps drawn standard normal.
pub fn add_noise(x0: &Tensor, sigma: f32, rng: &mut RngStream) -> Result<(Tensor, Tensor)> {
    if sigma <= 0.0 {
        return Err(CoreError::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let mut eps = Tensor::zeros(&x0.shape);
    rng.fill_normal(&mut eps.data, 0.0, 1.0);
    let mut x = x0.clone();
    for (v, e) in x.data.iter_mut().zip(eps.data.iter()) {
        *v += sigma * e;
    }
    Ok((x, eps))
}

/// Classifier-free guidance combine: n_neg + s * (n_pos - n_neg).
/// The s = 1 and s = 0 endpoints return the operand itself so the algebraic
/// identities hold bit-exactly.
pub fn cfg_combine(n_pos: &Tensor, n_neg: &Tensor, s: f32) -> Result<Tensor> {
    if n_pos.shape != n_neg.shape {
        return Err(CoreError::Shape(format!(
            "cfg operands differ: {:?} vs {:?}",
            n_pos.shape, n_neg.shape
        )));
    }
    if s == 1.0 {
        return Ok(n_pos.clone());
    }
    if s == 0.0 {
        return Ok(n_neg.clone());
    }
    let data = n_pos
        .data
        .iter()
        .zip(n_neg.data.iter())
        .map(|(&p, &n)| n + s * (p - n))
        .collect();
    Tensor::new(n_pos.shape.clone(), data)
}

// ── Branch training ──────────────────────────────────────────────────

/// One pre-tokenized training sample.
#[derive(Debug, Clone)]
pub struct TrainItem {
    /// Clean video tokens (S, d).
    pub video_tokens: Tensor,
    /// Control video tokens (S, d).
    pub control_tokens: Tensor,
    pub text: TextEmbedding,
    pub grid: (usize, usize, usize),
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    /// Log-uniform sigma range to train over.
    pub sigma_min: f32,
    pub sigma_max: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 0.05, sigma_min: 0.4, sigma_max: 20.0 }
    }
}

/// One gradient step on the branch with the base frozen: draw sigma, noise
/// the tokens, run the fused forward (single branch, w = 1), take MSE against
/// the injected noise, and apply plain gradient descent to branch parameters
/// only. Returns the loss before the update.
pub fn train_branch_step(
    branch: &mut ControlBranch,
    base: &DiTParams,
    item: &TrainItem,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<f32> {
    let schedule = NoiseSchedule { sigma_min: cfg.sigma_min, sigma_max: cfg.sigma_max, steps: 1, rho: 7.0 };
    schedule.validate()?;
    let sigma = schedule.sample_sigma(rng);
    let (x_sigma, eps) = add_noise(&item.video_tokens, sigma, rng)?;
    let s = item.video_tokens.shape[0];

    let mut tape = GradTape::new();
    let base_vars = DiTVars::bind(&mut tape, base, false);
    let branch_vars = BranchVars::bind(&mut tape, branch, true);
    // Every trainable var on this tape must belong to the branch; the base is
    // frozen and bound as constants.
    let expected = branch_vars.trainable_vars().len();
    if tape.params().len() != expected {
        return Err(CoreError::Invariant(format!(
            "{} trainable vars on tape, branch owns {expected}: a frozen parameter would receive updates",
            tape.params().len()
        )));
    }
    let xv = tape.leaf(x_sigma);
    let cv = tape.leaf(item.control_tokens.clone());
    let wv = tape.leaf(Tensor::ones(&[s]));
    let trace = fused_forward_taped(
        &mut tape,
        &base_vars,
        &[&branch_vars],
        xv,
        sigma,
        &item.text,
        &[cv],
        &[wv],
        item.grid,
    )?;
    let target = tape.leaf(eps);
    let loss = tape.mse_loss(trace.noise_pred, target)?;
    let loss_value = tape.value(loss).data[0];
    if !loss_value.is_finite() {
        return Err(CoreError::Numeric(format!("non-finite training loss at sigma {sigma}")));
    }
    let grads = tape.backward(loss)?;
    branch_vars.apply_sgd(&tape, &grads, branch, cfg.lr);
    Ok(loss_value)
}

/// Train a branch over a corpus for `steps` single-item steps, cycling items.
pub fn train_branch(
    branch: &mut ControlBranch,
    base: &DiTParams,
    items: &[TrainItem],
    cfg: &TrainConfig,
    steps: usize,
    rng: &mut RngStream,
) -> Result<Vec<f32>> {
    if items.is_empty() {
        return Err(CoreError::Input("empty training corpus".into()));
    }
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let item = &items[step % items.len()];
        losses.push(train_branch_step(branch, base, item, cfg, rng)?);
    }
    Ok(losses)
}

// ── Sampling ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    pub base: &'a DiTParams,
    pub branches: Vec<&'a ControlBranch>,
    /// Control token tensors aligned with `branches`.
    pub controls: Vec<Tensor>,
    /// Token-resampled, normalized weights (N, S); all-ones (then normalized)
    /// when no map is supplied.
    pub token_weights: Tensor,
}

impl<'a> Sampler<'a> {
    /// Assemble a sampler for a target latent geometry. `map` is the
    /// pixel-space control map; absent, every branch gets full weight
    /// (normalized to sum one across branches).
    pub fn new(
        base: &'a DiTParams,
        branches: Vec<&'a ControlBranch>,
        controls: Vec<Tensor>,
        map: Option<&SpatiotemporalControlMap>,
        grid: &LatentGrid,
    ) -> Result<Sampler<'a>> {
        if branches.len() != controls.len() {
            return Err(CoreError::Config(format!(
                "{} branches but {} controls",
                branches.len(),
                controls.len()
            )));
        }
        let s = grid.num_tokens();
        if branches.is_empty() {
            return Ok(Sampler { base, branches, controls, token_weights: Tensor::zeros(&[0, s]) });
        }
        let token_weights = match map {
            Some(m) => {
                if m.num_modalities() != branches.len() {
                    return Err(CoreError::Config(format!(
                        "map has {} modalities, {} branches attached",
                        m.num_modalities(),
                        branches.len()
                    )));
                }
                m.normalize()?.resample_to_tokens(grid)?
            }
            None => {
                let (t, y, x) = grid.source_extents;
                let modalities = branches.iter().map(|b| b.modality).collect();
                SpatiotemporalControlMap::uniform(modalities, (t, y, x), 1.0)?
                    .normalize()?
                    .resample_to_tokens(grid)?
            }
        };
        Ok(Sampler { base, branches, controls, token_weights })
    }

    /// One guided denoiser evaluation.
    pub fn guided_noise(
        &self,
        x: &Tensor,
        sigma: f32,
        pos: &TextEmbedding,
        neg: &TextEmbedding,
        scale: f32,
        grid: (usize, usize, usize),
    ) -> Result<Tensor> {
        let n_pos = fused_denoise(
            self.base, &self.branches, x, sigma, pos, &self.controls, &self.token_weights, grid,
        )?;
        let n_neg = fused_denoise(
            self.base, &self.branches, x, sigma, neg, &self.controls, &self.token_weights, grid,
        )?;
        cfg_combine(&n_pos, &n_neg, scale)
    }
}

/// Deterministic Euler sampling over the schedule, starting from
/// sigma_max * eps(seed). Returns the detokenized video (unclamped).
#[allow(clippy::too_many_arguments)]
pub fn sample_video(
    sampler: &Sampler,
    tokenizer: &Tokenizer,
    template: &LatentGrid,
    prompt: &str,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Tensor> {
    schedule.validate()?;
    let grid_ext = template.grid_extents();
    let s = template.num_tokens();
    let d = template.latent_dim();
    if d != sampler.base.cfg.model_dim {
        return Err(CoreError::Config(format!(
            "latent dim {d} must match model dim {} for sampling",
            sampler.base.cfg.model_dim
        )));
    }
    let pos = TextEmbedding::from_prompt(prompt, sampler.base);
    let neg = TextEmbedding::from_prompt(&guidance.negative_prompt, sampler.base);

    let mut rng = RngStream::new(seed);
    let mut x = Tensor::zeros(&[s, d]);
    rng.fill_normal(&mut x.data, 0.0, 1.0);
    let sigmas = schedule.sigmas();
    for v in x.data.iter_mut() {
        *v *= sigmas[0];
    }

    for (i, &sigma) in sigmas.iter().enumerate() {
        let n_hat = sampler.guided_noise(&x, sigma, &pos, &neg, guidance.scale, grid_ext)?;
        if !n_hat.is_finite() {
            return Err(CoreError::Numeric(format!("non-finite prediction at step {i}")));
        }
        let sigma_next = if i + 1 < sigmas.len() { sigmas[i + 1] } else { 0.0 };
        let dsigma = sigma_next - sigma;
        for (v, n) in x.data.iter_mut().zip(n_hat.data.iter()) {
            *v += dsigma * n;
        }
    }

    let grid = template.with_flat_tokens(&x)?;
    tokenizer.detokenize(&grid)
}
