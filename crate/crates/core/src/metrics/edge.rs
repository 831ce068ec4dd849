//! Edge F1: Canny both videos with identical thresholds, then strict
//! pixel-level classification F1 (no spatial tolerance).

use crate::error::{CoreError, Result};
use crate::extractors::{canny_edges_video, luma};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CannyThresholds {
    pub low: f32,
    pub high: f32,
}

impl Default for CannyThresholds {
    fn default() -> Self {
        CannyThresholds { low: 0.1, high: 0.2 }
    }
}

/// F1 of exact pixel-level edge classification, with `reference` as ground
/// truth and `prediction` as the classified side. Asymmetric by definition.
pub fn edge_f1(
    reference: &Tensor,
    prediction: &Tensor,
    thresholds: CannyThresholds,
    mask: Option<&Tensor>,
) -> Result<f32> {
    if reference.shape != prediction.shape {
        return Err(CoreError::Shape(format!(
            "extents differ: {:?} vs {:?}",
            reference.shape, prediction.shape
        )));
    }
    let re = canny_edges_video(&luma(reference)?, thresholds.low, thresholds.high)?;
    let pe = canny_edges_video(&luma(prediction)?, thresholds.low, thresholds.high)?;
    edge_f1_on_maps(&re, &pe, mask)
}

/// F1 on precomputed binary edge maps, pooled over the whole clip.
pub fn edge_f1_on_maps(reference: &Tensor, prediction: &Tensor, mask: Option<&Tensor>) -> Result<f32> {
    if reference.shape != prediction.shape {
        return Err(CoreError::Shape("edge maps differ in shape".into()));
    }
    if let Some(m) = mask {
        if m.shape != reference.shape {
            return Err(CoreError::Shape(format!(
                "mask {:?} does not match edge maps {:?}",
                m.shape, reference.shape
            )));
        }
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fne = 0u64;
    for i in 0..reference.numel() {
        if let Some(m) = mask {
            if m.data[i] == 0.0 {
                continue;
            }
        }
        let r = reference.data[i] != 0.0;
        let p = prediction.data[i] != 0.0;
        match (r, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fne += 1,
            (false, false) => {}
        }
    }
    if tp + fne == 0 {
        return Err(CoreError::UndefinedMetric("reference has no edge pixels".into()));
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fne) as f64;
    Ok((2.0 * precision * recall / (precision + recall)) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_video() -> Tensor {
        let mut v = Tensor::zeros(&[2, 16, 16, 3]);
        for f in 0..2 {
            for y in 0..16 {
                for x in 8..16 {
                    for c in 0..3 {
                        v.data[((f * 16 + y) * 16 + x) * 3 + c] = 1.0;
                    }
                }
            }
        }
        v
    }

    #[test]
    fn identical_videos_give_f1_one() {
        let v = step_video();
        let f1 = edge_f1(&v, &v, CannyThresholds::default(), None).unwrap();
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn one_pixel_shift_gives_zero() {
        // A thin vertical line; prediction shifted right by one pixel.
        let mut a = Tensor::zeros(&[1, 16, 16]);
        let mut b = Tensor::zeros(&[1, 16, 16]);
        for y in 0..16 {
            a.data[y * 16 + 7] = 1.0;
            b.data[y * 16 + 8] = 1.0;
        }
        let f1 = edge_f1_on_maps(&a, &b, None).unwrap();
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn half_frame_prediction_gives_two_thirds() {
        // Reference edges on both frames; prediction only on the first.
        let mut re = Tensor::zeros(&[2, 8, 8]);
        let mut pe = Tensor::zeros(&[2, 8, 8]);
        for x in 0..8 {
            re.data[3 * 8 + x] = 1.0; // frame 0
            re.data[64 + 3 * 8 + x] = 1.0; // frame 1
            pe.data[3 * 8 + x] = 1.0; // frame 0 only
        }
        let f1 = edge_f1_on_maps(&re, &pe, None).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-6, "f1 {f1}");
    }

    #[test]
    fn empty_reference_is_undefined() {
        let re = Tensor::zeros(&[1, 8, 8]);
        let pe = Tensor::ones(&[1, 8, 8]);
        assert!(matches!(
            edge_f1_on_maps(&re, &pe, None),
            Err(CoreError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn mask_restricts_population() {
        let mut re = Tensor::zeros(&[1, 8, 8]);
        let mut pe = Tensor::zeros(&[1, 8, 8]);
        // Matching edges on the left, prediction-only garbage on the right.
        for y in 0..8 {
            re.data[y * 8 + 2] = 1.0;
            pe.data[y * 8 + 2] = 1.0;
            pe.data[y * 8 + 6] = 1.0;
        }
        let mut mask = Tensor::zeros(&[1, 8, 8]);
        for y in 0..8 {
            for x in 0..4 {
                mask.data[y * 8 + x] = 1.0;
            }
        }
        let f1 = edge_f1_on_maps(&re, &pe, Some(&mask)).unwrap();
        assert_eq!(f1, 1.0);
        let f1_full = edge_f1_on_maps(&re, &pe, None).unwrap();
        assert!(f1_full < 1.0);
    }
}
