//! Scale-invariant RMSE on log-depth differences.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// si-RMSE: with d_p = ln(b_p) - ln(a_p) over valid pixels,
/// sqrt(mean(d^2) - mean(d)^2). Invariant to global depth scaling.
pub fn depth_sirmse(a: &Tensor, b: &Tensor, mask: Option<&Tensor>) -> Result<f32> {
    if a.shape != b.shape {
        return Err(CoreError::Shape(format!("extents differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    if let Some(m) = mask {
        if m.shape != a.shape {
            return Err(CoreError::Shape(format!("mask {:?} does not match {:?}", m.shape, a.shape)));
        }
    }
    let mut sum = 0.0f64;
    let mut sum2 = 0.0f64;
    let mut n = 0u64;
    for i in 0..a.numel() {
        if let Some(m) = mask {
            if m.data[i] == 0.0 {
                continue;
            }
        }
        let (va, vb) = (a.data[i], b.data[i]);
        if va <= 0.0 || vb <= 0.0 {
            return Err(CoreError::Domain(format!(
                "depths must be strictly positive, got {va} and {vb} at index {i}"
            )));
        }
        let d = (vb.ln() - va.ln()) as f64;
        sum += d;
        sum2 += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(CoreError::UndefinedMetric("no valid pixels under the mask".into()));
    }
    let mean = sum / n as f64;
    let var = (sum2 / n as f64 - mean * mean).max(0.0);
    Ok(var.sqrt() as f32)
}
