//! Spatiotemporal control maps from region labelings.
//!
//! The foreground/background classification itself is an input (a labels
//! file); this module turns labeled masks plus a per-modality weight recipe
//! into a control map, surfacing both the raw map and the sum-normalized one.

use crate::controlnet::{Modality, SpatiotemporalControlMap};
use crate::error::{CoreError, Result};
use crate::extractors::SegMaskSet;
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLabel {
    Fg,
    Bg,
}

/// Object id -> foreground/background, as read from a labels JSON file.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct RegionLabeling {
    pub labels: HashMap<u32, RegionLabel>,
}

impl RegionLabeling {
    pub fn load(path: &std::path::Path) -> Result<RegionLabeling> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Per-modality (FG weight, BG weight) pairs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightRecipe {
    /// Keyed by modality; map order follows [`Modality::CORE`] plus any extra
    /// modalities in insertion order.
    pub entries: Vec<RecipeEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RecipeEntry {
    pub modality: Modality,
    pub fg: f32,
    pub bg: f32,
}

impl WeightRecipe {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(e.fg.is_finite() && e.bg.is_finite()) || e.fg < 0.0 || e.bg < 0.0 {
                return Err(CoreError::Domain(format!(
                    "recipe weights must be finite and non-negative, got {}: fg {} bg {}",
                    e.modality, e.fg, e.bg
                )));
            }
        }
        Ok(())
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.entries.iter().map(|e| e.modality).collect()
    }
}

fn core_recipe(weights: [(f32, f32); 4]) -> WeightRecipe {
    WeightRecipe {
        entries: Modality::CORE
            .iter()
            .zip(weights.iter())
            .map(|(&modality, &(fg, bg))| RecipeEntry { modality, fg, bg })
            .collect(),
    }
}

/// Published weight presets.
///
/// - `fig5`: vis+edge 0.5 on foreground, depth+seg 0.5 on background.
/// - `fig5-inverted`: the same with foreground and background swapped.
/// - `robotics-setting1`: edge and vis 1 on foreground, seg 1 on background.
/// - `robotics-setting2`: edge 1 on foreground, seg 1 on background.
pub fn recipe_presets(name: &str) -> Result<WeightRecipe> {
    // Order: vis, edge, depth, seg.
    match name {
        "fig5" => Ok(core_recipe([(0.5, 0.0), (0.5, 0.0), (0.0, 0.5), (0.0, 0.5)])),
        "fig5-inverted" => Ok(core_recipe([(0.0, 0.5), (0.0, 0.5), (0.5, 0.0), (0.5, 0.0)])),
        "robotics-setting1" => Ok(core_recipe([(1.0, 0.0), (1.0, 0.0), (0.0, 0.0), (0.0, 1.0)])),
        "robotics-setting2" => Ok(core_recipe([(0.0, 0.0), (1.0, 0.0), (0.0, 0.0), (0.0, 1.0)])),
        other => Err(CoreError::Config(format!("unknown recipe preset '{other}'"))),
    }
}

/// Raw and normalized maps from one build; the normalized one is what fusion
/// consumes, the raw one records the recipe verbatim.
pub struct ControlMapBuild {
    pub raw: SpatiotemporalControlMap,
    pub normalized: SpatiotemporalControlMap,
}

/// Pixelwise map construction: a pixel inside any foreground-labeled mask
/// gets each modality's FG weight, everything else (background-labeled masks
/// and unmasked pixels alike) gets the BG weight. FG wins where labels
/// overlap.
pub fn build_control_map(
    masks: &SegMaskSet,
    labeling: &RegionLabeling,
    recipe: &WeightRecipe,
) -> Result<ControlMapBuild> {
    masks.validate()?;
    recipe.validate()?;
    for m in &masks.masks {
        if !labeling.labels.contains_key(&m.object_id) {
            return Err(CoreError::Input(format!(
                "object id {} ({}) has no fg/bg label",
                m.object_id, m.phrase
            )));
        }
    }
    let (t, y, x) = masks.extents;
    let sites = t * y * x;
    let mut fg = vec![false; sites];
    for m in &masks.masks {
        if labeling.labels[&m.object_id] == RegionLabel::Fg {
            for (slot, &inside) in fg.iter_mut().zip(m.mask.iter()) {
                *slot |= inside;
            }
        }
    }
    let n = recipe.entries.len();
    let mut weights = Tensor::zeros(&[n, t, y, x]);
    for (i, e) in recipe.entries.iter().enumerate() {
        for (p, &is_fg) in fg.iter().enumerate() {
            weights.data[i * sites + p] = if is_fg { e.fg } else { e.bg };
        }
    }
    let raw = SpatiotemporalControlMap { modalities: recipe.modalities(), weights };
    let normalized = normalize_for_build(&raw)?;
    Ok(ControlMapBuild { raw, normalized })
}

/// Recipes may legitimately exceed [0,1] sums (robotics setting 1 sums to 2
/// on the foreground), so clamp-free normalization runs on the raw recipe
/// values before the [0,1] invariant is enforced.
fn normalize_for_build(raw: &SpatiotemporalControlMap) -> Result<SpatiotemporalControlMap> {
    let n = raw.num_modalities();
    if n == 0 {
        return Ok(raw.clone());
    }
    let sites = raw.weights.numel() / n;
    let mut out = raw.weights.clone();
    for p in 0..sites {
        let mut sum = 0.0f32;
        for i in 0..n {
            sum += out.data[i * sites + p];
        }
        if sum > 1.0 + 1e-6 {
            for i in 0..n {
                out.data[i * sites + p] /= sum;
            }
        }
    }
    let map = SpatiotemporalControlMap { modalities: raw.modalities.clone(), weights: out };
    map.validate()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractors::SegMask;

    fn masks_with_fg_square() -> (SegMaskSet, RegionLabeling) {
        let (t, y, x) = (1, 8, 8);
        let mut m = vec![false; t * y * x];
        for yy in 2..6 {
            for xx in 2..6 {
                m[yy * x + xx] = true;
            }
        }
        let set = SegMaskSet {
            extents: (t, y, x),
            masks: vec![SegMask { object_id: 1, phrase: "robot".into(), mask: m }],
        };
        let mut labels = HashMap::new();
        labels.insert(1, RegionLabel::Fg);
        (set, RegionLabeling { labels })
    }

    #[test]
    fn fig5_weights_at_fg_and_bg_pixels() {
        let (set, labeling) = masks_with_fg_square();
        let recipe = recipe_presets("fig5").unwrap();
        let build = build_control_map(&set, &labeling, &recipe).unwrap();
        let sites = 64;
        // FG pixel (3,3): (0.5, 0.5, 0, 0); BG pixel (0,0): (0, 0, 0.5, 0.5).
        let fg_p = 3 * 8 + 3;
        let bg_p = 0;
        let got_fg: Vec<f32> = (0..4).map(|i| build.normalized.weights.data[i * sites + fg_p]).collect();
        let got_bg: Vec<f32> = (0..4).map(|i| build.normalized.weights.data[i * sites + bg_p]).collect();
        assert_eq!(got_fg, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(got_bg, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn empty_fg_set_gives_uniform_bg() {
        let (mut set, mut labeling) = masks_with_fg_square();
        labeling.labels.insert(1, RegionLabel::Bg);
        set.validate().unwrap();
        let recipe = recipe_presets("fig5").unwrap();
        let build = build_control_map(&set, &labeling, &recipe).unwrap();
        let sites = 64;
        for p in 0..sites {
            let v: Vec<f32> = (0..4).map(|i| build.normalized.weights.data[i * sites + p]).collect();
            assert_eq!(v, vec![0.0, 0.0, 0.5, 0.5]);
        }
    }

    #[test]
    fn setting1_fg_normalizes_to_half_each() {
        let (set, labeling) = masks_with_fg_square();
        let recipe = recipe_presets("robotics-setting1").unwrap();
        let build = build_control_map(&set, &labeling, &recipe).unwrap();
        let sites = 64;
        let fg_p = 3 * 8 + 3;
        let raw: Vec<f32> = (0..4).map(|i| build.raw.weights.data[i * sites + fg_p]).collect();
        let norm: Vec<f32> = (0..4).map(|i| build.normalized.weights.data[i * sites + fg_p]).collect();
        assert_eq!(raw, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(norm, vec![0.5, 0.5, 0.0, 0.0]);
        // BG stays seg-only.
        let bg: Vec<f32> = (0..4).map(|i| build.normalized.weights.data[i * sites]).collect();
        assert_eq!(bg, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn setting2_recipe_values() {
        let r = recipe_presets("robotics-setting2").unwrap();
        let by_mod: HashMap<Modality, (f32, f32)> =
            r.entries.iter().map(|e| (e.modality, (e.fg, e.bg))).collect();
        assert_eq!(by_mod[&Modality::Edge], (1.0, 0.0));
        assert_eq!(by_mod[&Modality::Seg], (0.0, 1.0));
        assert_eq!(by_mod[&Modality::Vis], (0.0, 0.0));
        assert_eq!(by_mod[&Modality::Depth], (0.0, 0.0));
    }

    #[test]
    fn fig5_inverted_swaps_regions() {
        let r = recipe_presets("fig5-inverted").unwrap();
        let by_mod: HashMap<Modality, (f32, f32)> =
            r.entries.iter().map(|e| (e.modality, (e.fg, e.bg))).collect();
        assert_eq!(by_mod[&Modality::Vis], (0.0, 0.5));
        assert_eq!(by_mod[&Modality::Depth], (0.5, 0.0));
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(recipe_presets("fig6").is_err());
    }

    #[test]
    fn unlabeled_object_is_input_error() {
        let (set, _) = masks_with_fg_square();
        let empty = RegionLabeling::default();
        let recipe = recipe_presets("fig5").unwrap();
        assert!(build_control_map(&set, &empty, &recipe).is_err());
    }

    #[test]
    fn fg_priority_on_overlap() {
        let (t, y, x) = (1, 4, 4);
        let full = vec![true; t * y * x];
        let set = SegMaskSet {
            extents: (t, y, x),
            masks: vec![
                SegMask { object_id: 1, phrase: "fg".into(), mask: full.clone() },
                SegMask { object_id: 2, phrase: "bg".into(), mask: full },
            ],
        };
        let mut labels = HashMap::new();
        labels.insert(1, RegionLabel::Fg);
        labels.insert(2, RegionLabel::Bg);
        let recipe = recipe_presets("fig5").unwrap();
        let build = build_control_map(&set, &RegionLabeling { labels }, &recipe).unwrap();
        // Every pixel is FG (priority), giving vis weight 0.5 everywhere.
        let sites = t * y * x;
        for p in 0..sites {
            assert_eq!(build.normalized.weights.data[p], 0.5);
        }
    }

    #[test]
    fn piecewise_constant_on_labeling_partition() {
        let (set, labeling) = masks_with_fg_square();
        let recipe = recipe_presets("robotics-setting2").unwrap();
        let build = build_control_map(&set, &labeling, &recipe).unwrap();
        let sites = 64;
        let fg_ref: Vec<f32> = (0..4).map(|i| build.normalized.weights.data[i * sites + 3 * 8 + 3]).collect();
        let bg_ref: Vec<f32> = (0..4).map(|i| build.normalized.weights.data[i * sites]).collect();
        let fg_mask = &set.masks[0].mask;
        for p in 0..sites {
            let got: Vec<f32> = (0..4).map(|i| build.normalized.weights.data[i * sites + p]).collect();
            if fg_mask[p] {
                assert_eq!(got, fg_ref);
            } else {
                assert_eq!(got, bg_ref);
            }
        }
    }

    #[test]
    fn built_maps_satisfy_sum_invariant() {
        let (set, labeling) = masks_with_fg_square();
        for preset in ["fig5", "fig5-inverted", "robotics-setting1", "robotics-setting2"] {
            let build = build_control_map(&set, &labeling, &recipe_presets(preset).unwrap()).unwrap();
            let n = build.normalized.num_modalities();
            let sites = build.normalized.weights.numel() / n;
            for p in 0..sites {
                let sum: f32 = (0..n).map(|i| build.normalized.weights.data[i * sites + p]).sum();
                assert!(sum <= 1.0 + 1e-5, "{preset}: site {p} sums to {sum}");
            }
            build.normalized.validate().unwrap();
        }
    }

    #[test]
    fn labels_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut labels = HashMap::new();
        labels.insert(1u32, RegionLabel::Fg);
        labels.insert(2, RegionLabel::Bg);
        let labeling = RegionLabeling { labels };
        let path = dir.path().join("labels.json");
        labeling.save(&path).unwrap();
        let loaded = RegionLabeling::load(&path).unwrap();
        assert_eq!(loaded.labels[&1], RegionLabel::Fg);
        assert_eq!(loaded.labels[&2], RegionLabel::Bg);
    }
}
