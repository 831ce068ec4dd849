//! Bilateral blur: Gaussian spatial kernel, Gaussian range kernel on
//! per-channel intensity, weights normalized over the in-bounds neighborhood.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Blur one (Y, X, 3) frame. The spatial kernel has radius ceil(3 * sigma_s).
pub fn bilateral_blur(frame: &Tensor, sigma_s: f32, sigma_r: f32) -> Result<Tensor> {
    if sigma_s <= 0.0 || sigma_r <= 0.0 {
        return Err(CoreError::Domain(format!(
            "bilateral sigmas must be positive, got spatial {sigma_s} range {sigma_r}"
        )));
    }
    if frame.rank() != 3 || frame.shape[2] != 3 {
        return Err(CoreError::Shape(format!("expected (Y, X, 3) frame, got {:?}", frame.shape)));
    }
    let (h, w) = (frame.shape[0], frame.shape[1]);
    let radius = (3.0 * sigma_s).ceil() as i64;
    let inv_2ss = 1.0 / (2.0 * sigma_s * sigma_s);
    let inv_2sr = 1.0 / (2.0 * sigma_r * sigma_r);
    let mut out = Tensor::zeros(&frame.shape);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for c in 0..3usize {
                let center = frame.data[((y as usize * w) + x as usize) * 3 + c];
                let mut acc = 0.0f32;
                let mut weight_sum = 0.0f32;
                for dy in -radius..=radius {
                    let ny = y + dy;
                    if ny < 0 || ny >= h as i64 {
                        continue;
                    }
                    for dx in -radius..=radius {
                        let nx = x + dx;
                        if nx < 0 || nx >= w as i64 {
                            continue;
                        }
                        let v = frame.data[((ny as usize * w) + nx as usize) * 3 + c];
                        let spatial = (-((dy * dy + dx * dx) as f32) * inv_2ss).exp();
                        let dr = v - center;
                        let range = (-(dr * dr) * inv_2sr).exp();
                        let wgt = spatial * range;
                        acc += wgt * v;
                        weight_sum += wgt;
                    }
                }
                out.data[((y as usize * w) + x as usize) * 3 + c] = acc / weight_sum;
            }
        }
    }
    Ok(out)
}

/// Blur every frame of a (T, Y, X, 3) video.
pub fn bilateral_blur_video(video: &Tensor, sigma_s: f32, sigma_r: f32) -> Result<Tensor> {
    if video.rank() != 4 || video.shape[3] != 3 {
        return Err(CoreError::Shape(format!("expected (T, Y, X, 3) video, got {:?}", video.shape)));
    }
    let (t, y, x) = (video.shape[0], video.shape[1], video.shape[2]);
    let frame_len = y * x * 3;
    let mut out = Tensor::zeros(&video.shape);
    for f in 0..t {
        let frame = Tensor::new(vec![y, x, 3], video.data[f * frame_len..(f + 1) * frame_len].to_vec())?;
        let blurred = bilateral_blur(&frame, sigma_s, sigma_r)?;
        out.data[f * frame_len..(f + 1) * frame_len].copy_from_slice(&blurred.data);
    }
    Ok(out)
}
