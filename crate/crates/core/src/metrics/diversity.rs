//! Diversity: mean pairwise distance over the K(K-1)/2 pairs of K
//! generations. The default distance is a cosine-complement over features of
//! a fixed-seed random convolutional stack.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Frozen 3-layer random convolutional feature extractor
/// (3 -> 8 -> 16 -> 32 channels, 3x3 kernels, stride 2, ReLU between).
pub struct ConvFeatureExtractor {
    kernels: Vec<Tensor>, // (c_out, c_in, 3, 3)
}

const CHANNELS: [usize; 4] = [3, 8, 16, 32];

impl ConvFeatureExtractor {
    pub fn new(seed: u64) -> ConvFeatureExtractor {
        let mut rng = RngStream::new(seed);
        let kernels = (0..3)
            .map(|l| {
                let (ci, co) = (CHANNELS[l], CHANNELS[l + 1]);
                Tensor::randn(&[co, ci, 3, 3], (2.0 / (ci as f32 * 9.0)).sqrt(), &mut rng)
            })
            .collect();
        ConvFeatureExtractor { kernels }
    }

    /// Global-average-pooled feature vector of one (Y, X, 3) frame.
    pub fn features(&self, frame: &Tensor) -> Result<Vec<f32>> {
        if frame.rank() != 3 || frame.shape[2] != 3 {
            return Err(CoreError::Shape(format!("expected (Y, X, 3) frame, got {:?}", frame.shape)));
        }
        // Channel-major planes.
        let (mut h, mut w) = (frame.shape[0], frame.shape[1]);
        let mut planes: Vec<Vec<f32>> = (0..3)
            .map(|c| (0..h * w).map(|i| frame.data[i * 3 + c]).collect())
            .collect();
        for (l, kernel) in self.kernels.iter().enumerate() {
            let (ci, co) = (CHANNELS[l], CHANNELS[l + 1]);
            let oh = h.div_ceil(2);
            let ow = w.div_ceil(2);
            let mut next: Vec<Vec<f32>> = vec![vec![0.0; oh * ow]; co];
            for (o, out_plane) in next.iter_mut().enumerate() {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (cy, cx) = (oy * 2, ox * 2);
                        let mut acc = 0.0f32;
                        for (i, plane) in planes.iter().enumerate().take(ci) {
                            for ky in 0..3usize {
                                let ny = cy as i64 + ky as i64 - 1;
                                if ny < 0 || ny >= h as i64 {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let nx = cx as i64 + kx as i64 - 1;
                                    if nx < 0 || nx >= w as i64 {
                                        continue;
                                    }
                                    acc += kernel.data[((o * ci + i) * 3 + ky) * 3 + kx]
                                        * plane[ny as usize * w + nx as usize];
                                }
                            }
                        }
                        // ReLU after every layer but the last.
                        out_plane[oy * ow + ox] = if l + 1 < 3 { acc.max(0.0) } else { acc };
                    }
                }
            }
            planes = next;
            h = oh;
            w = ow;
        }
        Ok(planes
            .iter()
            .map(|p| p.iter().sum::<f32>() / p.len() as f32)
            .collect())
    }

    /// Cosine-complement distance between two (T, Y, X, 3) videos, averaged
    /// over frames.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f32> {
        if a.shape != b.shape {
            return Err(CoreError::Shape(format!("extents differ: {:?} vs {:?}", a.shape, b.shape)));
        }
        let (t, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
        let flen = h * w * 3;
        let mut total = 0.0f64;
        for f in 0..t {
            let fa = Tensor::new(vec![h, w, 3], a.data[f * flen..(f + 1) * flen].to_vec())?;
            let fb = Tensor::new(vec![h, w, 3], b.data[f * flen..(f + 1) * flen].to_vec())?;
            let va = self.features(&fa)?;
            let vb = self.features(&fb)?;
            let dot: f64 = va.iter().zip(vb.iter()).map(|(x, y)| (x * y) as f64).sum();
            let na: f64 = va.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
            let nb: f64 = vb.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
            let cos = if na == 0.0 || nb == 0.0 { if na == nb { 1.0 } else { 0.0 } } else { dot / (na * nb) };
            total += 1.0 - cos;
        }
        Ok((total / t as f64) as f32)
    }
}

/// Mean pairwise distance over all K(K-1)/2 unordered pairs.
pub fn diversity_score(
    videos: &[Tensor],
    distance: &mut dyn FnMut(&Tensor, &Tensor) -> Result<f32>,
) -> Result<f32> {
    if videos.len() < 2 {
        return Err(CoreError::Input(format!(
            "diversity needs at least 2 generations, got {}",
            videos.len()
        )));
    }
    let mut total = 0.0f64;
    let mut pairs = 0u64;
    for i in 0..videos.len() {
        for j in i + 1..videos.len() {
            total += distance(&videos[i], &videos[j])? as f64;
            pairs += 1;
        }
    }
    Ok((total / pairs as f64) as f32)
}

/// Mean absolute pixel difference (a plug-in distance for tests and quick
/// diagnostics).
pub fn mean_abs_pixel_distance(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape != b.shape {
        return Err(CoreError::Shape("extents differ".into()));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum();
    Ok((sum / a.numel() as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_videos_evaluate_six_pairs() {
        let videos: Vec<Tensor> = (0..4).map(|i| Tensor::filled(&[1, 4, 4, 3], i as f32 * 0.1)).collect();
        let mut calls = 0u32;
        let mut dist = |a: &Tensor, b: &Tensor| {
            calls += 1;
            mean_abs_pixel_distance(a, b)
        };
        diversity_score(&videos, &mut dist).unwrap();
        assert_eq!(calls, 6);
    }

    #[test]
    fn identical_videos_score_zero() {
        let videos: Vec<Tensor> = vec![Tensor::filled(&[1, 8, 8, 3], 0.5); 3];
        let ex = ConvFeatureExtractor::new(1);
        let mut dist = |a: &Tensor, b: &Tensor| ex.distance(a, b);
        let s = diversity_score(&videos, &mut dist).unwrap();
        assert!(s.abs() < 1e-6, "{s}");
    }

    #[test]
    fn plug_in_distance_hand_value() {
        let a = Tensor::zeros(&[1, 2, 2, 3]);
        let b = Tensor::ones(&[1, 2, 2, 3]);
        let s = diversity_score(&[a, b], &mut mean_abs_pixel_distance).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn fewer_than_two_rejected() {
        let a = Tensor::zeros(&[1, 2, 2, 3]);
        assert!(diversity_score(&[a], &mut mean_abs_pixel_distance).is_err());
    }

    #[test]
    fn conv_features_deterministic_per_seed() {
        let mut rng = crate::rng::RngStream::new(3);
        let v = Tensor::rand_uniform(&[6, 6, 3], 0.0, 1.0, &mut rng);
        let a = ConvFeatureExtractor::new(7).features(&v).unwrap();
        let b = ConvFeatureExtractor::new(7).features(&v).unwrap();
        let c = ConvFeatureExtractor::new(8).features(&v).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 32);
    }
}
