//! Dense row-major f32 tensors and the pure kernels everything runs on.
//!
//! All reductions use a fixed left-to-right accumulation order. The parallel
//! inference engine calls the same slice-level kernels on row shards, which is
//! what makes serial/parallel comparisons bit-exact instead of merely close.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn(shape: &[usize], std: f32, rng: &mut RngStream) -> Self {
        let mut t = Self::zeros(shape);
        rng.fill_normal(&mut t.data, 0.0, std);
        t
    }

    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut RngStream) -> Self {
        let mut t = Self::zeros(shape);
        rng.fill_uniform(&mut t.data, lo, hi);
        t
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing -0.0 from 0.0 and any NaN payloads.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Interpret as a 2D matrix.
    pub fn as_matrix(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(CoreError::Shape(format!("expected rank-2, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(CoreError::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone(), requires_grad: false })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn clamp01(&self) -> Tensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mut acc = 0.0f32;
        for &v in &self.data {
            acc += v;
        }
        acc / self.data.len() as f32
    }

    /// Matrix product; fixed i,j,k loop order so results are reproducible.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix()?;
        let (k2, n) = other.as_matrix()?;
        if k != k2 {
            return Err(CoreError::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0f32; m * n];
        matmul_slices(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix()?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Max-subtracted softmax along `axis`; each slice sums to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(CoreError::Shape(format!(
                "softmax axis {} out of range for {:?}",
                axis, self.shape
            )));
        }
        let axis_len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0.0f32; self.numel()];
        let mut lane = vec![0.0f32; axis_len];
        for o in 0..outer {
            for i in 0..inner {
                for (a, slot) in lane.iter_mut().enumerate() {
                    *slot = self.data[(o * axis_len + a) * inner + i];
                }
                softmax_inplace(&mut lane);
                for (a, slot) in lane.iter().enumerate() {
                    out[(o * axis_len + a) * inner + i] = *slot;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    // ── Portable tensor files ────────────────────────────────────────

    /// One UTF-8 JSON header line, then the raw little-endian f32 payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = serde_json::json!({
            "dtype": "f32",
            "shape": self.shape,
            "order": "row-major",
            "endian": "little",
        });
        writeln!(f, "{}", serde_json::to_string(&header)?)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut header_line = String::new();
        reader.read_line(&mut header_line)?;
        let header: serde_json::Value = serde_json::from_str(header_line.trim_end())?;
        if header["dtype"] != "f32" || header["order"] != "row-major" || header["endian"] != "little"
        {
            return Err(CoreError::Input(format!(
                "unsupported tensor header in {}: {header}",
                path.display()
            )));
        }
        let shape: Vec<usize> = serde_json::from_value(header["shape"].clone())?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        reader.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data)
    }
}

// ── Slice-level kernels (shared by tape ops and the parallel engine) ──

/// c[m,n] = a[m,k] @ b[k,n], accumulating over k left-to-right.
pub fn matmul_slices(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        crow.fill(0.0);
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// Max-subtracted softmax over one lane, in place.
pub fn softmax_inplace(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row layer normalization over the last dimension.
pub fn layer_norm_rows(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    rows: usize,
    d: usize,
    eps: f32,
    out: &mut [f32],
) {
    debug_assert_eq!(x.len(), rows * d);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut mean = 0.0f32;
        for &v in row {
            mean += v;
        }
        mean /= d as f32;
        let mut var = 0.0f32;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            orow[i] = (row[i] - mean) * inv * gamma[i] + beta[i];
        }
    }
}

/// tanh-approximation GELU.
pub fn gelu(v: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())
}

pub fn gelu_grad(v: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (v + 0.044_715 * v * v * v);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044_715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

/// Scaled dot-product attention for one head over the full sequence.
/// q,k,v are (s, dh) row-major; output is (s, dh).
pub fn attention_single_head(q: &[f32], k: &[f32], v: &[f32], s: usize, dh: usize) -> Vec<f32> {
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; s * dh];
    let mut logits = vec![0.0f32; s];
    for i in 0..s {
        let qrow = &q[i * dh..(i + 1) * dh];
        for j in 0..s {
            let krow = &k[j * dh..(j + 1) * dh];
            let mut dot = 0.0f32;
            for p in 0..dh {
                dot += qrow[p] * krow[p];
            }
            logits[j] = dot * scale;
        }
        softmax_inplace(&mut logits);
        let orow = &mut out[i * dh..(i + 1) * dh];
        for (j, &w) in logits.iter().enumerate() {
            let vrow = &v[j * dh..(j + 1) * dh];
            for p in 0..dh {
                orow[p] += w * vrow[p];
            }
        }
    }
    out
}

/// Extract head column block `h` (width dh) from an (s, d) matrix.
pub fn head_slice(x: &[f32], s: usize, d: usize, h: usize, dh: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; s * dh];
    for r in 0..s {
        out[r * dh..(r + 1) * dh].copy_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

/// Scatter a head column block back into an (s, d) matrix.
pub fn head_unslice(block: &[f32], x: &mut [f32], s: usize, d: usize, h: usize, dh: usize) {
    for r in 0..s {
        x[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&block[r * dh..(r + 1) * dh]);
    }
}
