//! Shared plumbing: model construction, corpus traversal, clip IO,
//! provenance records.

use crate::config::ModelConfig;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use worldgen_core::checkpoint;
use worldgen_core::controlnet::Modality;
use worldgen_core::denoiser::DiTParams;
use worldgen_core::extractors::{SceneFile, SegMaskSet};
use worldgen_core::synth::{read_masks, SceneSpec};
use worldgen_core::tensor::Tensor;
use worldgen_core::tokenizer::{Tokenizer, TokenizerConfig};
use worldgen_core::weightmaps::RegionLabeling;

pub struct ModelContext {
    pub tokenizer: Tokenizer,
    pub base: DiTParams,
}

/// Build the tokenizer + base model. The diffusion pipeline requires the
/// tokenizer latent dim to equal the model dim, so it is set from the DiT
/// config here.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelContext> {
    let tokenizer = Tokenizer::new(TokenizerConfig {
        latent_dim: cfg.dit.model_dim,
        seed: cfg.tokenizer_seed,
    })?;
    let base = match &cfg.base_checkpoint {
        Some(dir) => {
            let params = checkpoint::load_base(dir)?;
            if params.cfg != cfg.dit {
                bail!(
                    "base checkpoint config {:?} does not match run config {:?}",
                    params.cfg,
                    cfg.dit
                );
            }
            params
        }
        None => DiTParams::init(cfg.dit, cfg.base_seed)?,
    };
    Ok(ModelContext { tokenizer, base })
}

/// Sorted clip directories of a corpus.
pub fn clip_dirs(corpus: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(corpus)
        .with_context(|| format!("reading corpus dir {}", corpus.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("clip_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no clip_* directories under {}", corpus.display());
    }
    Ok(dirs)
}

pub struct Clip {
    pub dir: PathBuf,
    pub name: String,
    pub spec: SceneSpec,
    pub video: Tensor,
    pub depth: Tensor,
    pub masks: SegMaskSet,
    pub labeling: RegionLabeling,
    pub scene: SceneFile,
}

impl Clip {
    pub fn load(dir: &Path) -> Result<Clip> {
        let spec: SceneSpec =
            serde_json::from_str(&std::fs::read_to_string(dir.join("spec.json"))?)?;
        Ok(Clip {
            dir: dir.to_path_buf(),
            name: dir.file_name().unwrap().to_string_lossy().to_string(),
            video: Tensor::load(&dir.join("video.tensor"))?,
            depth: Tensor::load(&dir.join("depth.tensor"))?,
            masks: read_masks(dir)?,
            labeling: RegionLabeling::load(&dir.join("labels.json"))?,
            scene: SceneFile::load(&dir.join("scene.json"))?,
            spec,
        })
    }

    /// Deterministic prompt from the object phrases.
    pub fn prompt(&self) -> String {
        let phrases: Vec<&str> = self.spec.objects.iter().map(|o| o.phrase.as_str()).collect();
        format!("a scene with {}", phrases.join(" and "))
    }

    /// (id, phrase, color, depth) palette for color-keyed re-extraction.
    pub fn palette(&self) -> Vec<(u32, String, [f32; 3], f32)> {
        self.spec
            .objects
            .iter()
            .map(|o| (o.id, o.phrase.clone(), o.color, o.depth))
            .collect()
    }

    pub fn control_path(&self, modality: Modality) -> PathBuf {
        self.dir.join(format!("control_{}.tensor", modality.name()))
    }

    pub fn load_control(&self, modality: Modality) -> Result<Tensor> {
        let path = self.control_path(modality);
        if !path.exists() {
            bail!(
                "missing control video {} — run the `extract` command for modality '{}' first",
                path.display(),
                modality.name()
            );
        }
        Ok(Tensor::load(&path)?)
    }
}

// ── Provenance ───────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub unix_timestamp: u64,
}

/// Write a provenance record beside the command's outputs. Everything except
/// the timestamp is a pure function of (command, config, seeds).
pub fn write_provenance(out_dir: &Path, command: &str, config_bytes: &[u8], seeds: &[u64]) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut hasher = Sha256::new();
    hasher.update(config_bytes);
    let record = Provenance {
        command: command.to_string(),
        config_sha256: format!("{:x}", hasher.finalize()),
        seeds: seeds.to_vec(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        unix_timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    std::fs::write(
        out_dir.join("provenance.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(())
}
