//! Control-signal extraction: blur visual, Canny edge, depth normalization,
//! segmentation recoloring, HD-map rasterization, LiDAR projection.
//!
//! Depth maps and segmentation masks are inputs here (produced upstream or by
//! the synthetic corpus generator); these functions turn them into control
//! videos.

pub mod bilateral;
pub mod canny;
pub mod hdmap;
pub mod lidar;
pub mod scene;

pub use bilateral::{bilateral_blur, bilateral_blur_video};
pub use canny::{canny_edges, canny_edges_video, luma};
pub use hdmap::hdmap_rasterize;
pub use lidar::lidar_project;
pub use scene::{
    BoxKeyframe, BoxPose, BoxTrack, CameraIntrinsics, CameraModel, LidarScan, MapElement,
    MapElementKind, Pose, SceneFile, SegMask, SegMaskSet,
};

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Training-time augmentation ranges for the randomized extractor parameters.
/// Canny thresholds are fractions of the per-frame max gradient magnitude.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentRanges {
    pub blur_sigma_s: (f32, f32),
    pub blur_sigma_r: (f32, f32),
    pub canny_low_frac: (f32, f32),
    /// High threshold as a multiple of the drawn low threshold.
    pub canny_high_mult: (f32, f32),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            blur_sigma_s: (1.0, 5.0),
            blur_sigma_r: (0.02, 0.2),
            canny_low_frac: (0.05, 0.2),
            canny_high_mult: (2.0, 4.0),
        }
    }
}

impl AugmentRanges {
    pub fn draw_blur(&self, rng: &mut RngStream) -> (f32, f32) {
        (
            rng.next_range(self.blur_sigma_s.0, self.blur_sigma_s.1),
            rng.next_range(self.blur_sigma_r.0, self.blur_sigma_r.1),
        )
    }

    /// Draw (low_frac, high_frac) of max gradient.
    pub fn draw_canny(&self, rng: &mut RngStream) -> (f32, f32) {
        let low = rng.next_range(self.canny_low_frac.0, self.canny_low_frac.1);
        let mult = rng.next_range(self.canny_high_mult.0, self.canny_high_mult.1);
        (low, low * mult)
    }
}

/// Min-max normalize a (T, Y, X) depth video to [0, 1] over the whole clip.
pub fn depth_normalize(depth: &Tensor) -> Result<Tensor> {
    if depth.rank() != 3 {
        return Err(CoreError::Shape(format!("expected (T, Y, X) depth video, got {:?}", depth.shape)));
    }
    if !depth.is_finite() {
        return Err(CoreError::Numeric("non-finite depth".into()));
    }
    let min = depth.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = depth.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if max <= min {
        return Err(CoreError::Degenerate(format!("constant depth clip (value {min})")));
    }
    let scale = 1.0 / (max - min);
    Ok(depth.map(|v| (v - min) * scale))
}

/// Color assigned to an object: the `index`-th color drawn from the stream.
fn draw_color(rng: &mut RngStream) -> [f32; 3] {
    // 24-bit color quantization, as a renderer would store it.
    let r = (rng.next_u64() >> 56) as u8;
    let g = (rng.next_u64() >> 56) as u8;
    let b = (rng.next_u64() >> 56) as u8;
    [r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0]
}

/// Recolor segmentation masks with seeded random colors (colors carry no
/// meaning, they only separate objects). Objects painted in ascending id
/// order, so higher ids sit on top of overlaps. Returns the control video and
/// the id -> color palette.
pub fn seg_recolor(masks: &SegMaskSet, seed: u64) -> Result<(Tensor, Vec<(u32, [f32; 3])>)> {
    masks.validate()?;
    let (t, y, x) = masks.extents;
    let mut ordered: Vec<&SegMask> = masks.masks.iter().collect();
    ordered.sort_by_key(|m| m.object_id);
    let mut rng = RngStream::new(seed);
    let palette: Vec<(u32, [f32; 3])> =
        ordered.iter().map(|m| (m.object_id, draw_color(&mut rng))).collect();
    let mut video = Tensor::zeros(&[t, y, x, 3]);
    for (m, (_, color)) in ordered.iter().zip(palette.iter()) {
        for (i, &inside) in m.mask.iter().enumerate() {
            if inside {
                video.data[i * 3..i * 3 + 3].copy_from_slice(color);
            }
        }
    }
    Ok((video, palette))
}

/// Expand a (T, Y, X) grayscale video to (T, Y, X, 3) by channel replication.
pub fn gray_to_rgb(gray: &Tensor) -> Result<Tensor> {
    if gray.rank() != 3 {
        return Err(CoreError::Shape(format!("expected (T, Y, X), got {:?}", gray.shape)));
    }
    let mut shape = gray.shape.clone();
    shape.push(3);
    let mut out = Tensor::zeros(&shape);
    for (i, &v) in gray.data.iter().enumerate() {
        out.data[i * 3] = v;
        out.data[i * 3 + 1] = v;
        out.data[i * 3 + 2] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_two_point_normalization() {
        let d = Tensor::new(vec![1, 1, 2], vec![2.0, 4.0]).unwrap();
        let n = depth_normalize(&d).unwrap();
        assert_eq!(n.data, vec![0.0, 1.0]);
    }

    #[test]
    fn depth_affine_invariance() {
        let mut rng = RngStream::new(1);
        let d = Tensor::rand_uniform(&[2, 4, 4], 1.0, 9.0, &mut rng);
        let affine = d.map(|v| 3.5 * v + 2.0);
        let a = depth_normalize(&d).unwrap();
        let b = depth_normalize(&affine).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn depth_ramp() {
        let d = Tensor::new(vec![1, 1, 10], (0..10).map(|v| v as f32).collect()).unwrap();
        let n = depth_normalize(&d).unwrap();
        for (i, &v) in n.data.iter().enumerate() {
            assert!((v - i as f32 / 9.0).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_constant_is_degenerate() {
        let d = Tensor::filled(&[1, 2, 2], 5.0);
        assert!(matches!(depth_normalize(&d), Err(CoreError::Degenerate(_))));
    }

    fn two_mask_set() -> SegMaskSet {
        let (t, y, x) = (1, 4, 4);
        let mut m1 = vec![false; t * y * x];
        let mut m2 = vec![false; t * y * x];
        for i in 0..8 {
            m1[i] = true;
        }
        for i in 6..12 {
            m2[i] = true;
        }
        SegMaskSet {
            extents: (t, y, x),
            masks: vec![
                SegMask { object_id: 1, phrase: "a".into(), mask: m1 },
                SegMask { object_id: 2, phrase: "b".into(), mask: m2 },
            ],
        }
    }

    #[test]
    fn seg_recolor_monochrome_when_single_full_mask() {
        let (t, y, x) = (1, 3, 3);
        let set = SegMaskSet {
            extents: (t, y, x),
            masks: vec![SegMask { object_id: 7, phrase: "all".into(), mask: vec![true; t * y * x] }],
        };
        let (video, palette) = seg_recolor(&set, 3).unwrap();
        let c = palette[0].1;
        for px in video.data.chunks_exact(3) {
            assert_eq!(px, c);
        }
    }

    #[test]
    fn seg_recolor_deterministic() {
        let set = two_mask_set();
        let (a, _) = seg_recolor(&set, 11).unwrap();
        let (b, _) = seg_recolor(&set, 11).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn seg_recolor_higher_id_wins_overlap() {
        let set = two_mask_set();
        let (video, palette) = seg_recolor(&set, 5).unwrap();
        let c2 = palette.iter().find(|(id, _)| *id == 2).unwrap().1;
        // Pixels 6 and 7 are covered by both masks; object 2 is on top.
        for i in [6usize, 7] {
            assert_eq!(&video.data[i * 3..i * 3 + 3], &c2);
        }
    }

    #[test]
    fn seg_recolor_distinct_colors_nearly_always() {
        let set = two_mask_set();
        let mut distinct = 0;
        for seed in 0..100u64 {
            let (_, palette) = seg_recolor(&set, seed).unwrap();
            if palette[0].1 != palette[1].1 {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "only {distinct} of 100 seeds gave distinct colors");
    }
}
