//! Run configuration: every numeric knob lives in JSON, schemas are closed
//! (unknown keys are rejected with a JSON-pointer path).

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use worldgen_core::controlnet::Modality;
use worldgen_core::denoiser::DiTConfig;
use worldgen_core::diffusion::{GuidanceConfig, NoiseSchedule};
use worldgen_core::upscaler::DegradeConfig;

/// Parse a closed-schema config file; errors carry the JSON-pointer path of
/// the offending key.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let pointer = format!("/{}", e.path().to_string().replace('.', "/"));
        anyhow!("config error at {pointer}: {} ({})", e.inner(), path.display())
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub dit: DiTConfig,
    /// Seed for the fixed tokenizer projection (latent dim is the model dim).
    #[serde(default = "default_tokenizer_seed")]
    pub tokenizer_seed: u64,
    /// Seed for base parameter initialization when no checkpoint is given.
    #[serde(default = "default_base_seed")]
    pub base_seed: u64,
    /// Base checkpoint directory; overrides `base_seed` when present.
    #[serde(default)]
    pub base_checkpoint: Option<PathBuf>,
}

fn default_tokenizer_seed() -> u64 {
    0x746f_6b31
}

fn default_base_seed() -> u64 {
    7
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dit: DiTConfig::default(),
            tokenizer_seed: default_tokenizer_seed(),
            base_seed: default_base_seed(),
            base_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub out_dir: PathBuf,
    pub clips: usize,
    /// (T, Y, X); T-1 divisible by 8, Y and X by 16.
    pub extents: (usize, usize, usize),
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    pub corpus_dir: PathBuf,
    pub modalities: Vec<Modality>,
    #[serde(default = "default_blur_sigma_s")]
    pub blur_sigma_s: f32,
    #[serde(default = "default_blur_sigma_r")]
    pub blur_sigma_r: f32,
    #[serde(default = "default_canny_low")]
    pub canny_low: f32,
    #[serde(default = "default_canny_high")]
    pub canny_high: f32,
    #[serde(default)]
    pub seg_seed: u64,
}

pub fn default_blur_sigma_s() -> f32 {
    2.0
}
pub fn default_blur_sigma_r() -> f32 {
    0.1
}
pub fn default_canny_low() -> f32 {
    0.1
}
pub fn default_canny_high() -> f32 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBranchConfig {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    pub modality: Modality,
    #[serde(default)]
    pub model: ModelConfig,
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_train_sigma_min")]
    pub sigma_min: f32,
    #[serde(default = "default_train_sigma_max")]
    pub sigma_max: f32,
    pub seed: u64,
    /// Branch seed for the control-token embedder init.
    #[serde(default)]
    pub branch_seed: u64,
}

fn default_lr() -> f32 {
    0.05
}
fn default_train_sigma_min() -> f32 {
    0.4
}
fn default_train_sigma_max() -> f32 {
    20.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum MapSource {
    /// Tensor file (N, T, Y, X) aligned with the branch list.
    #[serde(rename = "path")]
    Path(PathBuf),
    /// Build from the clip's masks + labels with a named preset.
    #[serde(rename = "preset")]
    Preset(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    /// Branch checkpoint directories; empty means base-model sampling.
    #[serde(default)]
    pub branches: Vec<PathBuf>,
    #[serde(default)]
    pub map: Option<MapSource>,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    pub seeds: Vec<u64>,
    /// Override the per-clip generated prompt.
    #[serde(default)]
    pub prompt: Option<String>,
    /// Restrict to specific clip names; empty means every clip.
    #[serde(default)]
    pub clips: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightmapConfig {
    pub clip_dir: PathBuf,
    pub out_raw: PathBuf,
    pub out_normalized: PathBuf,
    pub preset: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpscaleFileConfig {
    pub input: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    /// Sigma the img2img tail starts from.
    #[serde(default = "default_upscale_sigma")]
    pub start_sigma: f32,
    #[serde(default)]
    pub degrade_first: Option<DegradeConfig>,
    #[serde(default)]
    pub prompt: String,
}

fn default_upscale_sigma() -> f32 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub corpus_dir: PathBuf,
    pub gen_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_blur_sigma_s")]
    pub blur_sigma_s: f32,
    #[serde(default = "default_blur_sigma_r")]
    pub blur_sigma_r: f32,
    #[serde(default = "default_canny_low")]
    pub canny_low: f32,
    #[serde(default = "default_canny_high")]
    pub canny_high: f32,
    /// Also compute FG/BG-restricted variants from the corpus labels.
    #[serde(default)]
    pub fg_bg_split: bool,
    /// Mean pairwise feature distance across a clip's generations.
    #[serde(default)]
    pub diversity: bool,
    /// Photometric reprojection error (needs scene depth + poses).
    #[serde(default)]
    pub reprojection: bool,
    #[serde(default = "default_reproj_stride")]
    pub reprojection_stride: usize,
}

fn default_reproj_stride() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFileConfig {
    #[serde(default)]
    pub model: ModelConfig,
    /// (T, Y, X) of the synthetic clip the benchmark denoises.
    pub extents: (usize, usize, usize),
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default = "default_bench_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub prompt: String,
}

fn default_bench_repeats() -> usize {
    2
}
