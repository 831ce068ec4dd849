//! Canny edge detection: Gaussian smooth (sigma 1.4), Sobel gradients,
//! non-maximum suppression with 8-direction quantization, hysteresis with
//! 8-connectivity. Thresholds are absolute gradient magnitudes.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const CANNY_GAUSSIAN_SIGMA: f32 = 1.4;

/// Binary edge map of a grayscale (Y, X) frame. `low <= high`; a pixel is a
/// strong seed when its NMS-surviving magnitude exceeds `high`, and weak
/// pixels above `low` are kept when 8-connected to a seed.
pub fn canny_edges(frame: &Tensor, low: f32, high: f32) -> Result<Tensor> {
    if !(0.0..).contains(&low) || low > high {
        return Err(CoreError::Domain(format!(
            "thresholds must satisfy 0 <= low <= high, got {low}, {high}"
        )));
    }
    if frame.rank() != 2 {
        return Err(CoreError::Shape(format!("expected grayscale (Y, X), got {:?}", frame.shape)));
    }
    let (h, w) = (frame.shape[0], frame.shape[1]);
    let smoothed = gaussian_smooth(&frame.data, h, w, CANNY_GAUSSIAN_SIGMA);
    let (gx, gy) = sobel(&smoothed, h, w);
    let mag: Vec<f32> = gx
        .iter()
        .zip(gy.iter())
        .map(|(&x, &y)| (x * x + y * y).sqrt())
        .collect();
    let thinned = non_maximum_suppression(&mag, &gx, &gy, h, w);
    let edges = hysteresis(&thinned, h, w, low, high);
    Tensor::new(vec![h, w], edges)
}

/// NMS-thinned gradient magnitudes, exposed for property tests.
pub fn canny_nms_magnitudes(frame: &Tensor) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let (h, w) = (frame.shape[0], frame.shape[1]);
    let smoothed = gaussian_smooth(&frame.data, h, w, CANNY_GAUSSIAN_SIGMA);
    let (gx, gy) = sobel(&smoothed, h, w);
    let mag: Vec<f32> = gx
        .iter()
        .zip(gy.iter())
        .map(|(&x, &y)| (x * x + y * y).sqrt())
        .collect();
    let thinned = non_maximum_suppression(&mag, &gx, &gy, h, w);
    Ok((thinned, gx, gy))
}

/// Edge maps for every frame of a (T, Y, X) grayscale video.
pub fn canny_edges_video(video: &Tensor, low: f32, high: f32) -> Result<Tensor> {
    if video.rank() != 3 {
        return Err(CoreError::Shape(format!("expected (T, Y, X) video, got {:?}", video.shape)));
    }
    let (t, y, x) = (video.shape[0], video.shape[1], video.shape[2]);
    let mut out = Tensor::zeros(&video.shape);
    for f in 0..t {
        let frame = Tensor::new(vec![y, x], video.data[f * y * x..(f + 1) * y * x].to_vec())?;
        let e = canny_edges(&frame, low, high)?;
        out.data[f * y * x..(f + 1) * y * x].copy_from_slice(&e.data);
    }
    Ok(out)
}

/// Full 2D Gaussian convolution with clamp-to-edge borders and kernel radius
/// ceil(3 * sigma). Kept non-separable so the reference implementation in the
/// tests accumulates in the identical order.
pub fn gaussian_smooth(data: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut kernel = Vec::with_capacity(((2 * radius + 1) * (2 * radius + 1)) as usize);
    let mut ksum = 0.0f32;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let v = (-((dy * dy + dx * dx) as f32) * inv).exp();
            kernel.push(v);
            ksum += v;
        }
    }
    for v in kernel.iter_mut() {
        *v /= ksum;
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0f32;
            let mut ki = 0;
            for dy in -radius..=radius {
                let ny = (y + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -radius..=radius {
                    let nx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    acc += kernel[ki] * data[ny * w + nx];
                    ki += 1;
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// 3x3 Sobel gradients with clamp-to-edge borders.
fn sobel(data: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    const KX: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f32; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut gx = vec![0.0f32; h * w];
    let mut gy = vec![0.0f32; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut ax = 0.0f32;
            let mut ay = 0.0f32;
            for (ky, row) in KX.iter().enumerate() {
                let ny = (y + ky as i64 - 1).clamp(0, h as i64 - 1) as usize;
                for (kx, &cx) in row.iter().enumerate() {
                    let nx = (x + kx as i64 - 1).clamp(0, w as i64 - 1) as usize;
                    let v = data[ny * w + nx];
                    ax += cx * v;
                    ay += KY[ky][kx] * v;
                }
            }
            gx[y as usize * w + x as usize] = ax;
            gy[y as usize * w + x as usize] = ay;
        }
    }
    (gx, gy)
}

/// Suppress pixels that are not local maxima along their quantized gradient
/// direction. Border pixels are suppressed (no full neighborhood).
fn non_maximum_suppression(mag: &[f32], gx: &[f32], gy: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    if h < 3 || w < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (n1, n2) = if !(22.5..157.5).contains(&angle) {
                (mag[i - 1], mag[i + 1]) // horizontal gradient
            } else if angle < 67.5 {
                (mag[(y + 1) * w + x + 1], mag[(y - 1) * w + x - 1]) // 45 degrees
            } else if angle < 112.5 {
                (mag[(y - 1) * w + x], mag[(y + 1) * w + x]) // vertical
            } else {
                (mag[(y - 1) * w + x + 1], mag[(y + 1) * w + x - 1]) // 135 degrees
            };
            if mag[i] >= n1 && mag[i] >= n2 {
                out[i] = mag[i];
            }
        }
    }
    out
}

/// Strong pixels (mag > high) seed a flood fill through weak pixels
/// (mag > low) over 8-connected neighbors.
fn hysteresis(mag: &[f32], h: usize, w: usize, low: f32, high: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mag[y * w + x] > high && out[y * w + x] == 0.0 {
                out[y * w + x] = 1.0;
                stack.push((y, x));
                while let Some((cy, cx)) = stack.pop() {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dy == 0 && dx == 0 {
                                continue;
                            }
                            let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                            if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                                continue;
                            }
                            let ni = ny as usize * w + nx as usize;
                            if out[ni] == 0.0 && mag[ni] > low {
                                out[ni] = 1.0;
                                stack.push((ny as usize, nx as usize));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Rec.601 luma of a (Y, X, 3) frame or (T, Y, X, 3) video, dropping the
/// channel axis.
pub fn luma(rgb: &Tensor) -> Result<Tensor> {
    if rgb.shape.last() != Some(&3) {
        return Err(CoreError::Shape(format!("expected trailing channel dim 3, got {:?}", rgb.shape)));
    }
    let out_shape: Vec<usize> = rgb.shape[..rgb.shape.len() - 1].to_vec();
    let data = rgb
        .data
        .chunks_exact(3)
        .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
        .collect();
    Tensor::new(out_shape, data)
}
