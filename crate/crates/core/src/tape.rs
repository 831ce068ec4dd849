//! Reverse-mode gradient tape.
//!
//! Define-by-run: each op computes its value eagerly through the pure kernels
//! in `tensor` and records enough to replay the chain rule backwards. Values
//! are kept in an arena indexed by [`Var`], so saved activations are just the
//! node values themselves. Backward visits ops in reverse recording order
//! exactly once.

use crate::error::{CoreError, Result};
use crate::tensor::{
    attention_single_head, gelu, gelu_grad, head_slice, head_unslice, layer_norm_rows,
    matmul_slices, softmax_inplace, Tensor,
};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f32 },
    Matmul { a: Var, b: Var },
    /// x: (rows, d) plus a length-d vector broadcast over rows.
    AddRowVec { x: Var, v: Var },
    /// x: (rows, d) scaled per row by a length-rows weight vector.
    RowScale { x: Var, w: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f32 },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    /// Multi-head self-attention over (s, d) with column-blocked heads.
    Mha { q: Var, k: Var, v: Var, heads: usize },
    /// Scalar mean of (a - b)^2 over all elements.
    MseLoss { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for a var, zeros if nothing flowed to it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.grads[var.0].clone().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, trainable: false });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant / frozen input. No parameter registry entry.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a trainable parameter; it joins the parameter registry so the
    /// optimizer can enumerate exactly what it is allowed to update.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].trainable = true;
        self.params.push(v);
        v
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn is_trainable(&self, var: Var) -> bool {
        self.nodes[var.0].trainable
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ── Ops ──────────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale { x, s })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let xt = self.value(x);
        let vt = self.value(v);
        let (rows, d) = xt.as_matrix()?;
        if vt.numel() != d {
            return Err(CoreError::Shape(format!(
                "row vector has {} elements, expected {}",
                vt.numel(),
                d
            )));
        }
        let mut out = xt.clone();
        for r in 0..rows {
            for i in 0..d {
                out.data[r * d + i] += vt.data[i];
            }
        }
        Ok(self.push(out, Op::AddRowVec { x, v }))
    }

    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (rows, d) = xt.as_matrix()?;
        if wt.numel() != rows {
            return Err(CoreError::Shape(format!(
                "row weights have {} elements, expected {}",
                wt.numel(),
                rows
            )));
        }
        let mut out = xt.clone();
        for r in 0..rows {
            let w = wt.data[r];
            for i in 0..d {
                out.data[r * d + i] *= w;
            }
        }
        Ok(self.push(out, Op::RowScale { x, w }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let xt = self.value(x);
        let (rows, d) = xt.as_matrix()?;
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.numel() != d || b.numel() != d {
            return Err(CoreError::Shape("layer norm affine extents mismatch".into()));
        }
        let mut out = vec![0.0f32; rows * d];
        layer_norm_rows(&xt.data, &g.data, &b.data, rows, d, eps, &mut out);
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu { x })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// Multi-head self-attention. q, k, v are (s, d) with d divisible by
    /// `heads`; head h occupies columns [h*dh, (h+1)*dh).
    pub fn mha(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (s, d) = self.value(q).as_matrix()?;
        if d % heads != 0 {
            return Err(CoreError::Config(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let mut out = vec![0.0f32; s * d];
        for h in 0..heads {
            let qh = head_slice(&self.value(q).data, s, d, h, dh);
            let kh = head_slice(&self.value(k).data, s, d, h, dh);
            let vh = head_slice(&self.value(v).data, s, d, h, dh);
            let oh = attention_single_head(&qh, &kh, &vh, s, dh);
            head_unslice(&oh, &mut out, s, d, h, dh);
        }
        let value = Tensor::new(vec![s, d], out)?;
        Ok(self.push(value, Op::Mha { q, k, v, heads }))
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let at = self.value(a);
        let bt = self.value(b);
        if at.shape != bt.shape {
            return Err(CoreError::Shape("mse operands differ in shape".into()));
        }
        let n = at.numel() as f32;
        let mut acc = 0.0f32;
        for (&x, &y) in at.data.iter().zip(bt.data.iter()) {
            let d = x - y;
            acc += d * d;
        }
        let value = Tensor::new(vec![1], vec![acc / n])?;
        Ok(self.push(value, Op::MseLoss { a, b }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep seeded with d(loss)/d(loss) = 1. `loss` must be scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::Shape("backward seed must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(vec![1], vec![1.0])?);

        for idx in (0..self.nodes.len()).rev() {
            let Some(d_out) = grads[idx].clone() else { continue };
            match self.nodes[idx].op.clone() {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, a, d_out.clone());
                    self.accumulate(&mut grads, b, d_out);
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut grads, a, d_out.clone());
                    self.accumulate(&mut grads, b, d_out.scale(-1.0));
                }
                Op::Mul { a, b } => {
                    let da = d_out.mul(self.value(b))?;
                    let db = d_out.mul(self.value(a))?;
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::Scale { x, s } => {
                    self.accumulate(&mut grads, x, d_out.scale(s));
                }
                Op::Matmul { a, b } => {
                    // dA = dOut @ B^T ; dB = A^T @ dOut
                    let bt = self.value(b).transpose2d()?;
                    let at = self.value(a).transpose2d()?;
                    let da = d_out.matmul(&bt)?;
                    let db = at.matmul(&d_out)?;
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::AddRowVec { x, v } => {
                    let (rows, d) = d_out.as_matrix()?;
                    let mut dv = vec![0.0f32; d];
                    for r in 0..rows {
                        for i in 0..d {
                            dv[i] += d_out.data[r * d + i];
                        }
                    }
                    let vshape = self.value(v).shape.clone();
                    self.accumulate(&mut grads, x, d_out);
                    self.accumulate(&mut grads, v, Tensor { shape: vshape, data: dv, requires_grad: false });
                }
                Op::RowScale { x, w } => {
                    let (rows, d) = d_out.as_matrix()?;
                    let wt = self.value(w);
                    let xt = self.value(x);
                    let mut dx = d_out.clone();
                    let mut dw = vec![0.0f32; rows];
                    for r in 0..rows {
                        let wv = wt.data[r];
                        for i in 0..d {
                            dx.data[r * d + i] *= wv;
                            dw[r] += d_out.data[r * d + i] * xt.data[r * d + i];
                        }
                    }
                    let wshape = wt.shape.clone();
                    self.accumulate(&mut grads, x, dx);
                    self.accumulate(&mut grads, w, Tensor { shape: wshape, data: dw, requires_grad: false });
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xt = self.value(x);
                    let (rows, d) = xt.as_matrix()?;
                    let g = self.value(gamma);
                    let mut dx = vec![0.0f32; rows * d];
                    let mut dgamma = vec![0.0f32; d];
                    let mut dbeta = vec![0.0f32; d];
                    for r in 0..rows {
                        let row = &xt.data[r * d..(r + 1) * d];
                        let dor = &d_out.data[r * d..(r + 1) * d];
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
                        // xhat_i = (x_i - mean) * inv ; h_i = dy_i * gamma_i
                        let mut mean_h = 0.0f32;
                        let mut mean_hx = 0.0f32;
                        for i in 0..d {
                            let xhat = (row[i] - mean) * inv;
                            let h = dor[i] * g.data[i];
                            mean_h += h;
                            mean_hx += h * xhat;
                            dgamma[i] += dor[i] * xhat;
                            dbeta[i] += dor[i];
                        }
                        mean_h /= d as f32;
                        mean_hx /= d as f32;
                        for i in 0..d {
                            let xhat = (row[i] - mean) * inv;
                            let h = dor[i] * g.data[i];
                            dx[r * d + i] = (h - mean_h - xhat * mean_hx) * inv;
                        }
                    }
                    let gshape = g.shape.clone();
                    let bshape = self.value(beta).shape.clone();
                    self.accumulate(&mut grads, x, Tensor::new(vec![rows, d], dx)?);
                    self.accumulate(&mut grads, gamma, Tensor { shape: gshape, data: dgamma, requires_grad: false });
                    self.accumulate(&mut grads, beta, Tensor { shape: bshape, data: dbeta, requires_grad: false });
                }
                Op::Gelu { x } => {
                    let xt = self.value(x);
                    let data: Vec<f32> = d_out
                        .data
                        .iter()
                        .zip(xt.data.iter())
                        .map(|(&g, &v)| g * gelu_grad(v))
                        .collect();
                    self.accumulate(
                        &mut grads,
                        x,
                        Tensor { shape: xt.shape.clone(), data, requires_grad: false },
                    );
                }
                Op::Softmax { x, axis } => {
                    let y = self.value(Var(idx));
                    let axis_len = y.shape[axis];
                    let inner: usize = y.shape[axis + 1..].iter().product();
                    let outer: usize = y.shape[..axis].iter().product();
                    let mut dx = vec![0.0f32; y.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0f32;
                            for a in 0..axis_len {
                                let p = (o * axis_len + a) * inner + i;
                                dot += d_out.data[p] * y.data[p];
                            }
                            for a in 0..axis_len {
                                let p = (o * axis_len + a) * inner + i;
                                dx[p] = y.data[p] * (d_out.data[p] - dot);
                            }
                        }
                    }
                    self.accumulate(&mut grads, x, Tensor::new(y.shape.clone(), dx)?);
                }
                Op::Mha { q, k, v, heads } => {
                    let (s, d) = self.value(q).as_matrix()?;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f32).sqrt();
                    let mut dq = vec![0.0f32; s * d];
                    let mut dk = vec![0.0f32; s * d];
                    let mut dv = vec![0.0f32; s * d];
                    for h in 0..heads {
                        let qh = head_slice(&self.value(q).data, s, d, h, dh);
                        let kh = head_slice(&self.value(k).data, s, d, h, dh);
                        let vh = head_slice(&self.value(v).data, s, d, h, dh);
                        let doh = head_slice(&d_out.data, s, d, h, dh);
                        // Recompute attention weights row by row.
                        let mut dqh = vec![0.0f32; s * dh];
                        let mut dkh = vec![0.0f32; s * dh];
                        let mut dvh = vec![0.0f32; s * dh];
                        let mut weights = vec![0.0f32; s];
                        for i in 0..s {
                            for j in 0..s {
                                let mut dot = 0.0f32;
                                for p in 0..dh {
                                    dot += qh[i * dh + p] * kh[j * dh + p];
                                }
                                weights[j] = dot * scale;
                            }
                            softmax_inplace(&mut weights);
                            // dV += w_ij * dO_i ; dA_ij = dO_i . V_j
                            let mut da = vec![0.0f32; s];
                            for j in 0..s {
                                let mut acc = 0.0f32;
                                for p in 0..dh {
                                    acc += doh[i * dh + p] * vh[j * dh + p];
                                    dvh[j * dh + p] += weights[j] * doh[i * dh + p];
                                }
                                da[j] = acc;
                            }
                            // Softmax VJP on the logits row.
                            let mut dot = 0.0f32;
                            for j in 0..s {
                                dot += da[j] * weights[j];
                            }
                            for j in 0..s {
                                let dl = weights[j] * (da[j] - dot) * scale;
                                for p in 0..dh {
                                    dqh[i * dh + p] += dl * kh[j * dh + p];
                                    dkh[j * dh + p] += dl * qh[i * dh + p];
                                }
                            }
                        }
                        head_unslice(&dqh, &mut dq, s, d, h, dh);
                        head_unslice(&dkh, &mut dk, s, d, h, dh);
                        head_unslice(&dvh, &mut dv, s, d, h, dh);
                    }
                    self.accumulate(&mut grads, q, Tensor::new(vec![s, d], dq)?);
                    self.accumulate(&mut grads, k, Tensor::new(vec![s, d], dk)?);
                    self.accumulate(&mut grads, v, Tensor::new(vec![s, d], dv)?);
                }
                Op::MseLoss { a, b } => {
                    let at = self.value(a);
                    let bt = self.value(b);
                    let n = at.numel() as f32;
                    let g = d_out.data[0];
                    let da: Vec<f32> = at
                        .data
                        .iter()
                        .zip(bt.data.iter())
                        .map(|(&x, &y)| 2.0 * (x - y) / n * g)
                        .collect();
                    let db: Vec<f32> = da.iter().map(|&v| -v).collect();
                    self.accumulate(&mut grads, a, Tensor { shape: at.shape.clone(), data: da, requires_grad: false });
                    self.accumulate(&mut grads, b, Tensor { shape: bt.shape.clone(), data: db, requires_grad: false });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data.iter_mut().zip(delta.data.iter()) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    // ── f64 replay ───────────────────────────────────────────────────

    /// Re-evaluate the recorded graph in f64, optionally overriding leaf
    /// values. Ops have no data-dependent structure, so the recorded program
    /// is valid for any leaf values. Used by the finite-difference oracle,
    /// which needs more precision than the f32 forward can give.
    pub fn replay_f64(&self, overrides: &[(Var, &[f64])], wanted: Var) -> Result<Vec<f64>> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let val = match &node.op {
                Op::Leaf => {
                    let mut v: Vec<f64> = node.value.data.iter().map(|&x| x as f64).collect();
                    for (ovar, odata) in overrides {
                        if ovar.0 == idx {
                            v = odata.to_vec();
                        }
                    }
                    v
                }
                Op::Add { a, b } => values[a.0].iter().zip(values[b.0].iter()).map(|(x, y)| x + y).collect(),
                Op::Sub { a, b } => values[a.0].iter().zip(values[b.0].iter()).map(|(x, y)| x - y).collect(),
                Op::Mul { a, b } => values[a.0].iter().zip(values[b.0].iter()).map(|(x, y)| x * y).collect(),
                Op::Scale { x, s } => values[x.0].iter().map(|v| v * *s as f64).collect(),
                Op::Matmul { a, b } => {
                    let (m, k) = self.value(*a).as_matrix()?;
                    let n = self.value(*b).shape[1];
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    let mut out = vec![0.0f64; m * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..n {
                                out[i * n + j] += x * bv[p * n + j];
                            }
                        }
                    }
                    out
                }
                Op::AddRowVec { x, v } => {
                    let (rows, d) = self.value(*x).as_matrix()?;
                    let (xv, vv) = (&values[x.0], &values[v.0]);
                    let mut out = xv.clone();
                    for r in 0..rows {
                        for i in 0..d {
                            out[r * d + i] += vv[i];
                        }
                    }
                    out
                }
                Op::RowScale { x, w } => {
                    let (rows, d) = self.value(*x).as_matrix()?;
                    let (xv, wv) = (&values[x.0], &values[w.0]);
                    let mut out = xv.clone();
                    for r in 0..rows {
                        for i in 0..d {
                            out[r * d + i] *= wv[r];
                        }
                    }
                    out
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (rows, d) = self.value(*x).as_matrix()?;
                    let (xv, gv, bv) = (&values[x.0], &values[gamma.0], &values[beta.0]);
                    let mut out = vec![0.0f64; rows * d];
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let mean: f64 = row.iter().sum::<f64>() / d as f64;
                        let var: f64 =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + *eps as f64).sqrt();
                        for i in 0..d {
                            out[r * d + i] = (row[i] - mean) * inv * gv[i] + bv[i];
                        }
                    }
                    out
                }
                Op::Gelu { x } => values[x.0].iter().map(|&v| gelu_f64(v)).collect(),
                Op::Softmax { x, axis } => {
                    let shape = &self.value(*x).shape;
                    let axis_len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let xv = &values[x.0];
                    let mut out = vec![0.0f64; xv.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut max = f64::NEG_INFINITY;
                            for a in 0..axis_len {
                                max = max.max(xv[(o * axis_len + a) * inner + i]);
                            }
                            let mut sum = 0.0;
                            for a in 0..axis_len {
                                let e = (xv[(o * axis_len + a) * inner + i] - max).exp();
                                out[(o * axis_len + a) * inner + i] = e;
                                sum += e;
                            }
                            for a in 0..axis_len {
                                out[(o * axis_len + a) * inner + i] /= sum;
                            }
                        }
                    }
                    out
                }
                Op::Mha { q, k, v, heads } => {
                    let (s, d) = self.value(*q).as_matrix()?;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qv, kv, vv) = (&values[q.0], &values[k.0], &values[v.0]);
                    let mut out = vec![0.0f64; s * d];
                    for h in 0..*heads {
                        for i in 0..s {
                            let mut logits = vec![0.0f64; s];
                            for j in 0..s {
                                let mut dot = 0.0;
                                for p in 0..dh {
                                    dot += qv[i * d + h * dh + p] * kv[j * d + h * dh + p];
                                }
                                logits[j] = dot * scale;
                            }
                            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let mut sum = 0.0;
                            for l in logits.iter_mut() {
                                *l = (*l - max).exp();
                                sum += *l;
                            }
                            for j in 0..s {
                                let w = logits[j] / sum;
                                for p in 0..dh {
                                    out[i * d + h * dh + p] += w * vv[j * d + h * dh + p];
                                }
                            }
                        }
                    }
                    out
                }
                Op::MseLoss { a, b } => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    let n = av.len() as f64;
                    let acc: f64 = av.iter().zip(bv.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                    vec![acc / n]
                }
            };
            values.push(val);
        }
        Ok(values[wanted.0].clone())
    }
}

fn gelu_f64(v: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())
}

/// One matmul kept out of Tensor for tape-free callers that already have
/// row-major slices (the parallel engine uses this directly).
pub fn linear_rows(x: &[f32], w: &[f32], bias: Option<&[f32]>, rows: usize, d_in: usize, d_out: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * d_out];
    matmul_slices(x, w, &mut out, rows, d_in, d_out);
    if let Some(b) = bias {
        for r in 0..rows {
            for i in 0..d_out {
                out[r * d_out + i] += b[i];
            }
        }
    }
    out
}
