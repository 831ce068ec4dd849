//! Blur SSIM: bilateral-blur both videos, then mean SSIM over an 11x11
//! Gaussian window (sigma 1.5), constants C1 = 0.01^2, C2 = 0.03^2 on [0,1].

use crate::error::{CoreError, Result};
use crate::extractors::{bilateral_blur_video, luma};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f32 = 1.5;
pub const SSIM_C1: f32 = 0.01 * 0.01;
pub const SSIM_C2: f32 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f32> {
    let r = (SSIM_WINDOW / 2) as i64;
    let inv = 1.0 / (2.0 * SSIM_SIGMA * SSIM_SIGMA);
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0f32;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f32) * inv).exp();
            w.push(v);
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean SSIM between two grayscale (T, Y, X) videos over all valid window
/// positions. With a mask, only windows entirely inside the mask count; a
/// full mask therefore reproduces the unrestricted value bit-for-bit.
pub fn ssim_video(a: &Tensor, b: &Tensor, mask: Option<&Tensor>) -> Result<f32> {
    if a.shape != b.shape {
        return Err(CoreError::Shape(format!("ssim extents differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    if a.rank() != 3 {
        return Err(CoreError::Shape(format!("expected (T, Y, X) grayscale, got {:?}", a.shape)));
    }
    let (t, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
    if let Some(m) = mask {
        if m.shape != a.shape {
            return Err(CoreError::Shape(format!("mask {:?} does not match video {:?}", m.shape, a.shape)));
        }
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::Shape(format!("frame ({h}, {w}) smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let window = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0f64;
    let mut count = 0u64;
    for f in 0..t {
        let fa = &a.data[f * h * w..(f + 1) * h * w];
        let fb = &b.data[f * h * w..(f + 1) * h * w];
        for cy in r..h - r {
            'next_window: for cx in r..w - r {
                if let Some(m) = mask {
                    let fm = &m.data[f * h * w..(f + 1) * h * w];
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            if fm[(cy - r + dy) * w + cx - r + dx] == 0.0 {
                                continue 'next_window;
                            }
                        }
                    }
                }
                let mut mu_x = 0.0f32;
                let mut mu_y = 0.0f32;
                let mut xx = 0.0f32;
                let mut yy = 0.0f32;
                let mut xy = 0.0f32;
                let mut wi = 0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let va = fa[(cy - r + dy) * w + cx - r + dx];
                        let vb = fb[(cy - r + dy) * w + cx - r + dx];
                        let wgt = window[wi];
                        wi += 1;
                        mu_x += wgt * va;
                        mu_y += wgt * vb;
                        xx += wgt * va * va;
                        yy += wgt * vb * vb;
                        xy += wgt * va * vb;
                    }
                }
                let var_x = xx - mu_x * mu_x;
                let var_y = yy - mu_y * mu_y;
                let cov = xy - mu_x * mu_y;
                let ssim = ((2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2));
                total += ssim as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(CoreError::UndefinedMetric("no window fits inside the mask".into()));
    }
    Ok((total / count as f64) as f32)
}

/// Blur SSIM between two (T, Y, X, 3) videos: bilateral-blur both with the
/// same parameters, convert to luma, take mean SSIM.
pub fn blur_ssim(
    a: &Tensor,
    b: &Tensor,
    sigma_s: f32,
    sigma_r: f32,
    mask: Option<&Tensor>,
) -> Result<f32> {
    if a.shape != b.shape {
        return Err(CoreError::Shape(format!("extents differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    let ba = luma(&bilateral_blur_video(a, sigma_s, sigma_r)?)?;
    let bb = luma(&bilateral_blur_video(b, sigma_s, sigma_r)?)?;
    ssim_video(&ba, &bb, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn identical_videos_score_one() {
        let mut rng = RngStream::new(1);
        let v = Tensor::rand_uniform(&[2, 16, 16, 3], 0.0, 1.0, &mut rng);
        let s = blur_ssim(&v, &v, 1.0, 0.1, None).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "ssim {s}");
    }

    #[test]
    fn constant_zero_vs_one_closed_form() {
        let a = Tensor::zeros(&[1, 12, 12]);
        let b = Tensor::ones(&[1, 12, 12]);
        let s = ssim_video(&a, &b, None).unwrap();
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((s - want).abs() < 1e-6, "ssim {s} want {want}");
    }

    #[test]
    fn full_mask_equals_unrestricted_bitwise() {
        let mut rng = RngStream::new(2);
        let a = Tensor::rand_uniform(&[2, 14, 14], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[2, 14, 14], 0.0, 1.0, &mut rng);
        let full_mask = Tensor::ones(&[2, 14, 14]);
        let unrestricted = ssim_video(&a, &b, None).unwrap();
        let masked = ssim_video(&a, &b, Some(&full_mask)).unwrap();
        assert_eq!(unrestricted.to_bits(), masked.to_bits());
    }

    #[test]
    fn half_mask_equals_ssim_on_half() {
        // Mask = left 16 columns of a 16x32 frame; masked SSIM must equal the
        // unrestricted SSIM of the cropped halves exactly (same windows).
        let mut rng = RngStream::new(3);
        let a = Tensor::rand_uniform(&[1, 16, 32], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[1, 16, 32], 0.0, 1.0, &mut rng);
        let mut mask = Tensor::zeros(&[1, 16, 32]);
        for y in 0..16 {
            for x in 0..16 {
                mask.data[y * 32 + x] = 1.0;
            }
        }
        let masked = ssim_video(&a, &b, Some(&mask)).unwrap();
        let crop = |t: &Tensor| {
            let mut out = Tensor::zeros(&[1, 16, 16]);
            for y in 0..16 {
                for x in 0..16 {
                    out.data[y * 16 + x] = t.data[y * 32 + x];
                }
            }
            out
        };
        let cropped = ssim_video(&crop(&a), &crop(&b), None).unwrap();
        assert!((masked - cropped).abs() < 1e-7, "{masked} vs {cropped}");
    }

    #[test]
    fn symmetric_in_inputs() {
        let mut rng = RngStream::new(4);
        let a = Tensor::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let s1 = ssim_video(&a, &b, None).unwrap();
        let s2 = ssim_video(&b, &a, None).unwrap();
        assert!((s1 - s2).abs() < 1e-7);
    }

    #[test]
    fn tiny_mask_is_undefined() {
        let a = Tensor::zeros(&[1, 16, 16]);
        let b = Tensor::zeros(&[1, 16, 16]);
        let mut mask = Tensor::zeros(&[1, 16, 16]);
        mask.data[0] = 1.0; // one pixel: no 11x11 window fits
        assert!(matches!(
            ssim_video(&a, &b, Some(&mask)),
            Err(CoreError::UndefinedMetric(_))
        ));
    }
}
