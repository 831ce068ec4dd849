//! Parameter checkpoints: a directory of portable tensor files plus a JSON
//! manifest carrying names, shapes, and frozen flags.

use crate::controlnet::{ControlBranch, Modality};
use crate::denoiser::{DiTConfig, DiTParams, TEXT_VOCAB};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: DiTConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    pub params: Vec<ManifestEntry>,
}

fn write_params(dir: &Path, named: &[(String, &Tensor)], frozen: bool) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(named.len());
    for (i, (name, tensor)) in named.iter().enumerate() {
        let file = format!("p{i:03}.tensor");
        tensor.save(&dir.join(&file))?;
        entries.push(ManifestEntry { name: name.clone(), shape: tensor.shape.clone(), frozen, file });
    }
    Ok(entries)
}

fn read_params(dir: &Path, manifest: &Manifest, named: &mut [(String, &mut Tensor)]) -> Result<()> {
    for (name, slot) in named.iter_mut() {
        let entry = manifest
            .params
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| CoreError::Input(format!("checkpoint missing parameter '{name}'")))?;
        let t = Tensor::load(&dir.join(&entry.file))?;
        if t.shape != slot.shape {
            return Err(CoreError::Shape(format!(
                "parameter '{name}' has shape {:?} in checkpoint, expected {:?}",
                t.shape, slot.shape
            )));
        }
        **slot = t;
    }
    Ok(())
}

/// Save the base model (all parameters frozen).
pub fn save_base(dir: &Path, params: &DiTParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        kind: "base".into(),
        config: params.cfg,
        modality: None,
        params: write_params(dir, &params.named_tensors(), true)?,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_base(dir: &Path) -> Result<DiTParams> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.kind != "base" {
        return Err(CoreError::Input(format!("expected a base checkpoint, found '{}'", manifest.kind)));
    }
    let mut params = DiTParams::zeros(manifest.config)?;
    let mut named = params.named_tensors_mut();
    read_params(dir, &manifest, &mut named)?;
    Ok(params)
}

/// Save a control branch (trainable parameters).
pub fn save_branch(dir: &Path, branch: &ControlBranch, cfg: &DiTConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        kind: "branch".into(),
        config: *cfg,
        modality: Some(branch.modality),
        params: write_params(dir, &branch.named_tensors(), false)?,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_branch(dir: &Path) -> Result<ControlBranch> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.kind != "branch" {
        return Err(CoreError::Input(format!(
            "expected a branch checkpoint, found '{}'",
            manifest.kind
        )));
    }
    let modality = manifest
        .modality
        .ok_or_else(|| CoreError::Input("branch checkpoint lacks a modality id".into()))?;
    let mut branch = branch_zeros(&manifest.config, modality)?;
    let mut named = branch.named_tensors_mut();
    read_params(dir, &manifest, &mut named)?;
    Ok(branch)
}

fn branch_zeros(cfg: &DiTConfig, modality: Modality) -> Result<ControlBranch> {
    // Shape scaffold; every tensor is overwritten by the checkpoint.
    let base = DiTParams::zeros(*cfg)?;
    Ok(ControlBranch::new(&base, modality, 0))
}

/// FNV-1a over parameter names and raw little-endian bytes, in order.
pub fn checksum(named: &[(String, &Tensor)]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, tensor) in named {
        eat(name.as_bytes());
        for v in &tensor.data {
            eat(&v.to_le_bytes());
        }
    }
    hash
}

/// Convenience checksum of a whole base model.
pub fn base_checksum(params: &DiTParams) -> u64 {
    checksum(&params.named_tensors())
}

/// Expected parameter-count sanity bound for a config (used in tests).
pub fn base_param_count(cfg: &DiTConfig) -> usize {
    let d = cfg.model_dim;
    let per_block = 2 * d + 4 * (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
    cfg.sigma_dim * d + d + TEXT_VOCAB * cfg.text_dim + cfg.text_dim * d + d
        + cfg.num_blocks * per_block
        + d * d
        + d
}
