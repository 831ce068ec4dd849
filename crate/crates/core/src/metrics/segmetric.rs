//! Mask mIoU: phrase-level mask aggregation, greedy IoU matching, sub-0.1
//! matches discarded.

use crate::error::{CoreError, Result};
use crate::extractors::SegMaskSet;
use std::collections::BTreeMap;

pub const IOU_DISCARD_THRESHOLD: f64 = 0.1;

/// Union all masks sharing a caption phrase into one mask per phrase.
fn phrase_masks(set: &SegMaskSet) -> Vec<(String, Vec<bool>)> {
    let mut grouped: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    let len = set.extents.0 * set.extents.1 * set.extents.2;
    for m in &set.masks {
        let entry = grouped.entry(m.phrase.as_str()).or_insert_with(|| vec![false; len]);
        for (slot, &v) in entry.iter_mut().zip(m.mask.iter()) {
            *slot |= v;
        }
    }
    grouped.into_iter().map(|(p, m)| (p.to_string(), m)).collect()
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU over greedily matched phrase masks. Matching is one-to-one on
/// descending IoU; pairs below 0.1 are discarded. When nothing survives the
/// metric is absent (an error), not zero.
pub fn mask_miou(reference: &SegMaskSet, generated: &SegMaskSet) -> Result<f32> {
    if reference.extents != generated.extents {
        return Err(CoreError::Shape(format!(
            "mask extents differ: {:?} vs {:?}",
            reference.extents, generated.extents
        )));
    }
    reference.validate()?;
    generated.validate()?;
    let ref_masks = phrase_masks(reference);
    let gen_masks = phrase_masks(generated);
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, (_, rm)) in ref_masks.iter().enumerate() {
        for (j, (_, gm)) in gen_masks.iter().enumerate() {
            pairs.push((i, j, iou(rm, gm)));
        }
    }
    // Descending IoU; ties broken by index for determinism.
    pairs.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_ref = vec![false; ref_masks.len()];
    let mut used_gen = vec![false; gen_masks.len()];
    let mut kept: Vec<f64> = Vec::new();
    for (i, j, v) in pairs {
        if used_ref[i] || used_gen[j] {
            continue;
        }
        used_ref[i] = true;
        used_gen[j] = true;
        if v >= IOU_DISCARD_THRESHOLD {
            kept.push(v);
        }
    }
    if kept.is_empty() {
        return Err(CoreError::UndefinedMetric(
            "no mask correspondence above the 0.1 IoU threshold".into(),
        ));
    }
    Ok((kept.iter().sum::<f64>() / kept.len() as f64) as f32)
}
