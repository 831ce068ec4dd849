//! Control branches and adaptive multimodal fusion.
//!
//! One branch per modality: K transformer blocks weight-copied from the base
//! model's first K blocks, each followed by a zero-initialized linear
//! projection whose output is added back into the base residual stream. A
//! spatiotemporal control map weights each branch's contribution per token;
//! branches are trained separately and fused only at inference.

use crate::denoiser::{BlockParams, BlockVars, DiTParams, DiTTrace, DiTVars, TextEmbedding};
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tape::{linear_rows, GradTape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::LatentGrid;

/// Sum-above-one tolerance: values this close to 1 are left alone so that
/// normalization is exactly idempotent in f32.
const NORMALIZE_SLACK: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vis,
    Edge,
    Depth,
    Seg,
    Hdmap,
    Lidar,
}

impl Modality {
    /// The four general-purpose modalities, in canonical map order.
    pub const CORE: [Modality; 4] = [Modality::Vis, Modality::Edge, Modality::Depth, Modality::Seg];

    pub fn name(&self) -> &'static str {
        match self {
            Modality::Vis => "vis",
            Modality::Edge => "edge",
            Modality::Depth => "depth",
            Modality::Seg => "seg",
            Modality::Hdmap => "hdmap",
            Modality::Lidar => "lidar",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s {
            "vis" => Ok(Modality::Vis),
            "edge" => Ok(Modality::Edge),
            "depth" => Ok(Modality::Depth),
            "seg" => Ok(Modality::Seg),
            "hdmap" => Ok(Modality::Hdmap),
            "lidar" => Ok(Modality::Lidar),
            other => Err(CoreError::Config(format!("unknown modality '{other}'"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ── Spatiotemporal control map ───────────────────────────────────────

/// Per-modality weights w in [0,1]^(N x T x Y x X), pixel space.
#[derive(Debug, Clone)]
pub struct SpatiotemporalControlMap {
    pub modalities: Vec<Modality>,
    /// (N, T, Y, X)
    pub weights: Tensor,
}

impl SpatiotemporalControlMap {
    pub fn new(modalities: Vec<Modality>, weights: Tensor) -> Result<Self> {
        if weights.rank() != 4 || weights.shape[0] != modalities.len() {
            return Err(CoreError::Shape(format!(
                "control map weights {:?} do not match {} modalities",
                weights.shape,
                modalities.len()
            )));
        }
        let map = SpatiotemporalControlMap { modalities, weights };
        map.validate()?;
        Ok(map)
    }

    /// Uniform map: every modality weighted `w` everywhere.
    pub fn uniform(modalities: Vec<Modality>, extents: (usize, usize, usize), w: f32) -> Result<Self> {
        let (t, y, x) = extents;
        let n = modalities.len();
        Self::new(modalities, Tensor::filled(&[n, t, y, x], w))
    }

    pub fn validate(&self) -> Result<()> {
        for &v in &self.weights.data {
            if !(0.0..=1.0).contains(&v) {
                if v < 0.0 {
                    return Err(CoreError::Domain(format!("negative control weight {v}")));
                }
                return Err(CoreError::Domain(format!("control weight {v} above 1")));
            }
        }
        Ok(())
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        (self.weights.shape[1], self.weights.shape[2], self.weights.shape[3])
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Where modality weights sum above one at a site, rescale that site so
    /// they sum to one; sites already at or below one are untouched.
    pub fn normalize(&self) -> Result<SpatiotemporalControlMap> {
        self.validate()?;
        let n = self.num_modalities();
        if n == 0 {
            return Ok(self.clone());
        }
        let sites = self.weights.numel() / n;
        let mut out = self.weights.clone();
        for p in 0..sites {
            let mut sum = 0.0f32;
            for i in 0..n {
                sum += out.data[i * sites + p];
            }
            if sum > 1.0 + NORMALIZE_SLACK {
                for i in 0..n {
                    out.data[i * sites + p] /= sum;
                }
            }
        }
        Ok(SpatiotemporalControlMap { modalities: self.modalities.clone(), weights: out })
    }

    /// Average-pool each modality slice over every token's receptive field,
    /// yielding per-token weights (N, S) in flat token order.
    pub fn resample_to_tokens(&self, grid: &LatentGrid) -> Result<Tensor> {
        let (t, y, x) = self.extents();
        if (t, y, x) != grid.source_extents {
            return Err(CoreError::Shape(format!(
                "control map extents {:?} do not match grid source {:?}",
                (t, y, x),
                grid.source_extents
            )));
        }
        let (tp, yp, xp) = grid.grid_extents();
        let s = tp * yp * xp;
        let n = self.num_modalities();
        let sites = t * y * x;
        let mut out = Tensor::zeros(&[n, s]);
        for i in 0..n {
            let slice = &self.weights.data[i * sites..(i + 1) * sites];
            for gt in 0..tp {
                for gy in 0..yp {
                    for gx in 0..xp {
                        let (tr, yr, xr) = LatentGrid::receptive_field(gt, gy, gx);
                        let mut sum = 0.0f64;
                        let count = (tr.len() * yr.len() * xr.len()) as f64;
                        for ft in tr.clone() {
                            for fy in yr.clone() {
                                for fx in xr.clone() {
                                    sum += slice[(ft * y + fy) * x + fx] as f64;
                                }
                            }
                        }
                        out.data[i * s + (gt * yp + gy) * xp + gx] = (sum / count) as f32;
                    }
                }
            }
        }
        Ok(out)
    }
}

// ── Control branch ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ControlBranch {
    pub modality: Modality,
    /// K blocks, weight-copied from base blocks 0..K at creation.
    pub blocks: Vec<BlockParams>,
    /// K zero-initialized output projections (weight, bias).
    pub proj_w: Vec<Tensor>,
    pub proj_b: Vec<Tensor>,
    /// Trainable control-token embedder.
    pub embed_w: Tensor,
    pub embed_b: Tensor,
}

impl ControlBranch {
    /// Branch creation: blocks are bit-identical copies of base blocks 1..K,
    /// projections exactly zero, embedder small random.
    pub fn new(base: &DiTParams, modality: Modality, seed: u64) -> ControlBranch {
        let k = base.cfg.cond_blocks;
        let d = base.cfg.model_dim;
        let mut rng = RngStream::new(seed);
        ControlBranch {
            modality,
            blocks: base.blocks[..k].to_vec(),
            proj_w: (0..k).map(|_| Tensor::zeros(&[d, d])).collect(),
            proj_b: (0..k).map(|_| Tensor::zeros(&[d])).collect(),
            embed_w: Tensor::randn(&[d, d], 0.02, &mut rng),
            embed_b: Tensor::zeros(&[d]),
        }
    }

    pub fn cond_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed_w".to_string(), &self.embed_w),
            ("embed_b".to_string(), &self.embed_b),
        ];
        for (j, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("blocks.{j}.{name}"), t));
            }
        }
        for (j, w) in self.proj_w.iter().enumerate() {
            out.push((format!("proj.{j}.w"), w));
        }
        for (j, b) in self.proj_b.iter().enumerate() {
            out.push((format!("proj.{j}.b"), b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed_w".to_string(), &mut self.embed_w),
            ("embed_b".to_string(), &mut self.embed_b),
        ];
        for (j, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.tensors_mut() {
                out.push((format!("blocks.{j}.{name}"), t));
            }
        }
        for (j, w) in self.proj_w.iter_mut().enumerate() {
            out.push((format!("proj.{j}.w"), w));
        }
        for (j, b) in self.proj_b.iter_mut().enumerate() {
            out.push((format!("proj.{j}.b"), b));
        }
        out
    }

    /// Pure branch forward: run K blocks on (conditioned x + embedded c),
    /// returning the raw block outputs h^j (before projection).
    pub fn forward_pure(
        &self,
        base: &DiTParams,
        stream0: &[f32],
        control_tokens: &Tensor,
        s: usize,
    ) -> Result<Vec<Tensor>> {
        let d = base.cfg.model_dim;
        if control_tokens.shape != vec![s, d] {
            return Err(CoreError::Shape(format!(
                "control tokens {:?}, expected ({s}, {d})",
                control_tokens.shape
            )));
        }
        let emb = linear_rows(&control_tokens.data, &self.embed_w.data, Some(&self.embed_b.data), s, d, d);
        let mut stream: Vec<f32> = stream0.iter().zip(emb.iter()).map(|(a, b)| a + b).collect();
        let mut activations = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            stream = block.forward_rows(&stream, s, d, base.cfg.num_heads);
            activations.push(Tensor::new(vec![s, d], stream.clone())?);
        }
        Ok(activations)
    }
}

/// Branch activations h^j for j = 1..K, one per conditional block.
pub type BranchActivations = Vec<Tensor>;

/// Standalone branch forward matching the spec operation:
/// conditions x exactly like the base, then runs the K branch blocks.
pub fn branch_forward(
    base: &DiTParams,
    branch: &ControlBranch,
    x: &Tensor,
    sigma: f32,
    text: &TextEmbedding,
    control_tokens: &Tensor,
    grid: (usize, usize, usize),
) -> Result<BranchActivations> {
    if sigma <= 0.0 {
        return Err(CoreError::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let (s, _) = x.as_matrix()?;
    let pos = crate::denoiser::positional_encoding(grid, base.cfg.model_dim);
    let cond = base.cond_vector(sigma, text)?;
    let stream0 = base.condition_rows(&x.data, &pos.data, &cond, sigma, s);
    branch.forward_pure(base, &stream0, control_tokens, s)
}

// ── Fusion ───────────────────────────────────────────────────────────

/// Everything a fused forward produced, for instrumentation.
pub struct FusedOutput {
    pub noise_pred: Tensor,
    /// Injection tensor added after base block j (None where nothing is injected).
    pub injections: Vec<Option<Tensor>>,
    /// Raw branch activations, indexed [branch][block].
    pub branch_activations: Vec<BranchActivations>,
}

/// Fused forward: base forward where block j's output is augmented by
/// sum_i w_i ⊙ P_i^j(h_i^j). `token_weights` is the (N, S) token-resampled,
/// pre-normalized map.
pub fn fused_denoise_traced(
    base: &DiTParams,
    branches: &[&ControlBranch],
    x: &Tensor,
    sigma: f32,
    text: &TextEmbedding,
    controls: &[Tensor],
    token_weights: &Tensor,
    grid: (usize, usize, usize),
) -> Result<FusedOutput> {
    if branches.len() != controls.len() {
        return Err(CoreError::Config(format!(
            "{} branches but {} control inputs",
            branches.len(),
            controls.len()
        )));
    }
    if sigma <= 0.0 {
        return Err(CoreError::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let (s, d) = x.as_matrix()?;
    if token_weights.shape != vec![branches.len(), s] {
        return Err(CoreError::Shape(format!(
            "token weights {:?}, expected ({}, {s})",
            token_weights.shape,
            branches.len()
        )));
    }
    let pos = crate::denoiser::positional_encoding(grid, d);
    let cond = base.cond_vector(sigma, text)?;
    let stream0 = base.condition_rows(&x.data, &pos.data, &cond, sigma, s);

    let k = base.cfg.cond_blocks;
    let mut branch_activations = Vec::with_capacity(branches.len());
    let mut injections: Vec<Option<Tensor>> = vec![None; base.cfg.num_blocks];
    for (i, branch) in branches.iter().enumerate() {
        if branch.cond_blocks() != k {
            return Err(CoreError::Config(format!(
                "branch {} has {} blocks, base expects {k}",
                branch.modality,
                branch.cond_blocks()
            )));
        }
        let acts = branch.forward_pure(base, &stream0, &controls[i], s)?;
        let w_row = &token_weights.data[i * s..(i + 1) * s];
        for (j, h) in acts.iter().enumerate() {
            let mut proj = linear_rows(&h.data, &branch.proj_w[j].data, Some(&branch.proj_b[j].data), s, d, d);
            for r in 0..s {
                for c in 0..d {
                    proj[r * d + c] *= w_row[r];
                }
            }
            match &mut injections[j] {
                Some(existing) => {
                    for (e, p) in existing.data.iter_mut().zip(proj.iter()) {
                        *e += p;
                    }
                }
                slot => *slot = Some(Tensor::new(vec![s, d], proj)?),
            }
        }
        branch_activations.push(acts);
    }

    let (noise_pred, _) = base.forward_pure(x, sigma, text, grid, &injections)?;
    Ok(FusedOutput { noise_pred, injections, branch_activations })
}

pub fn fused_denoise(
    base: &DiTParams,
    branches: &[&ControlBranch],
    x: &Tensor,
    sigma: f32,
    text: &TextEmbedding,
    controls: &[Tensor],
    token_weights: &Tensor,
    grid: (usize, usize, usize),
) -> Result<Tensor> {
    Ok(fused_denoise_traced(base, branches, x, sigma, text, controls, token_weights, grid)?.noise_pred)
}

/// Dedicated single-branch ControlNet forward (the N=1 special case written
/// without any of the multi-branch machinery); oracle for fusion tests.
pub fn single_controlnet_denoise(
    base: &DiTParams,
    branch: &ControlBranch,
    x: &Tensor,
    sigma: f32,
    text: &TextEmbedding,
    control_tokens: &Tensor,
    grid: (usize, usize, usize),
) -> Result<Tensor> {
    let (s, d) = x.as_matrix()?;
    let acts = branch_forward(base, branch, x, sigma, text, control_tokens, grid)?;
    let mut injections: Vec<Option<Tensor>> = vec![None; base.cfg.num_blocks];
    for (j, h) in acts.iter().enumerate() {
        let proj = linear_rows(&h.data, &branch.proj_w[j].data, Some(&branch.proj_b[j].data), s, d, d);
        injections[j] = Some(Tensor::new(vec![s, d], proj)?);
    }
    let (n, _) = base.forward_pure(x, sigma, text, grid, &injections)?;
    Ok(n)
}

// ── Taped fusion (training path) ─────────────────────────────────────

pub struct BranchVars {
    pub blocks: Vec<BlockVars>,
    pub proj_w: Vec<Var>,
    pub proj_b: Vec<Var>,
    pub embed_w: Var,
    pub embed_b: Var,
}

impl BranchVars {
    pub fn bind(tape: &mut GradTape, branch: &ControlBranch, trainable: bool) -> BranchVars {
        let blocks = branch
            .blocks
            .iter()
            .map(|b| BlockVars::bind(tape, b, trainable))
            .collect();
        let mut reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) };
        BranchVars {
            blocks,
            proj_w: branch.proj_w.iter().map(&mut reg).collect(),
            proj_b: branch.proj_b.iter().map(&mut reg).collect(),
            embed_w: reg(&branch.embed_w),
            embed_b: reg(&branch.embed_b),
        }
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = Vec::new();
        for b in &self.blocks {
            out.extend(b.vars());
        }
        out.extend(self.proj_w.iter().copied());
        out.extend(self.proj_b.iter().copied());
        out.push(self.embed_w);
        out.push(self.embed_b);
        out
    }

    /// Write gradient-updated values back into the branch (plain GD step).
    pub fn apply_sgd(
        &self,
        tape: &GradTape,
        grads: &crate::tape::Gradients,
        branch: &mut ControlBranch,
        lr: f32,
    ) {
        let vars = self.trainable_vars();
        let mut new_values: Vec<Tensor> = Vec::with_capacity(vars.len());
        for var in &vars {
            let mut value = tape.value(*var).clone();
            if let Some(g) = grads.get(*var) {
                for (v, gv) in value.data.iter_mut().zip(g.data.iter()) {
                    *v -= lr * gv;
                }
            }
            new_values.push(value);
        }
        let mut it = new_values.into_iter();
        for block in branch.blocks.iter_mut() {
            for (_, t) in block.tensors_mut() {
                *t = it.next().unwrap();
            }
        }
        for w in branch.proj_w.iter_mut() {
            *w = it.next().unwrap();
        }
        for b in branch.proj_b.iter_mut() {
            *b = it.next().unwrap();
        }
        branch.embed_w = it.next().unwrap();
        branch.embed_b = it.next().unwrap();
    }

    /// Taped branch forward on the already-conditioned stream.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        stream0: Var,
        control_tokens: Var,
        heads: usize,
    ) -> Result<Vec<Var>> {
        let e0 = tape.matmul(control_tokens, self.embed_w)?;
        let emb = tape.add_row_vec(e0, self.embed_b)?;
        let mut stream = tape.add(stream0, emb)?;
        let mut acts = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            stream = block.forward(tape, stream, heads)?;
            acts.push(stream);
        }
        Ok(acts)
    }
}

/// Taped fused forward used for branch training. Injection order matches the
/// pure path exactly (branches ascending, blocks ascending).
#[allow(clippy::too_many_arguments)]
pub fn fused_forward_taped(
    tape: &mut GradTape,
    base: &DiTVars,
    branches: &[&BranchVars],
    x: Var,
    sigma: f32,
    text: &TextEmbedding,
    controls: &[Var],
    token_weights: &[Var],
    grid: (usize, usize, usize),
) -> Result<DiTTrace> {
    let stream0 = base.condition(tape, x, sigma, text, grid)?;
    let mut injections: Vec<Option<Var>> = vec![None; base.blocks.len()];
    for (i, branch) in branches.iter().enumerate() {
        let acts = branch.forward(tape, stream0, controls[i], base.cfg.num_heads)?;
        for (j, &h) in acts.iter().enumerate() {
            let p0 = tape.matmul(h, branch.proj_w[j])?;
            let p = tape.add_row_vec(p0, branch.proj_b[j])?;
            let weighted = tape.row_scale(p, token_weights[i])?;
            injections[j] = Some(match injections[j] {
                Some(existing) => tape.add(existing, weighted)?,
                None => weighted,
            });
        }
    }
    // Base blocks with injections; mirrors DiTVars::forward.
    let mut stream = stream0;
    let mut block_streams = Vec::with_capacity(base.blocks.len());
    for (j, block) in base.blocks.iter().enumerate() {
        stream = block.forward(tape, stream, base.cfg.num_heads)?;
        if let Some(inj) = injections[j] {
            stream = tape.add(stream, inj)?;
        }
        block_streams.push(stream);
    }
    let delta = tape.sub(stream, stream0)?;
    let n0 = tape.matmul(delta, base.out_w)?;
    let noise_pred = tape.add_row_vec(n0, base.out_b)?;
    Ok(DiTTrace { stream0, block_streams, noise_pred })
}
