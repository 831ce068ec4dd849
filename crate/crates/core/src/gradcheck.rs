//! Finite-difference validation of the tape.

use crate::error::{CoreError, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Compare tape gradients against central differences.
///
/// `f` builds a scalar loss once; the recorded graph is then replayed in f64
/// with perturbed parameter values for the finite-difference side, so the
/// oracle is not polluted by f32 cancellation. Returns the max over all
/// coordinates of `|tape - central| / (|central| + 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f32>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let loss_val = tape.value(loss);
    if loss_val.numel() != 1 {
        return Err(CoreError::Shape("grad_check loss must be scalar".into()));
    }
    if !loss_val.data[0].is_finite() {
        return Err(CoreError::Numeric(format!(
            "non-finite loss {}",
            loss_val.data[0]
        )));
    }
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], &p.shape);
        let base: Vec<f64> = p.data.iter().map(|&v| v as f64).collect();
        let mut perturbed = base.clone();
        for ci in 0..p.numel() {
            perturbed[ci] = base[ci] + eps;
            let plus = tape.replay_f64(&[(vars[pi], &perturbed)], loss)?[0];
            perturbed[ci] = base[ci] - eps;
            let minus = tape.replay_f64(&[(vars[pi], &perturbed)], loss)?[0];
            perturbed[ci] = base[ci];
            if !plus.is_finite() || !minus.is_finite() {
                return Err(CoreError::Numeric("non-finite perturbed loss".into()));
            }
            let central = (plus - minus) / (2.0 * eps);
            let err = (analytic.data[ci] as f64 - central).abs() / (central.abs() + 1e-8);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn quadratic_exact() {
        // f(x) = x^2 at x = 3: tape gradient exactly 6, FD error < 1e-5.
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = grad_check(|tape, vars| tape.mul(vars[0], vars[0]), &[x], 1e-3).unwrap();
        assert!(err < 1e-5, "relative error {err}");

        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let mut tape = GradTape::new();
        let xv = tape.param(x);
        let y = tape.mul(xv, xv).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(xv).unwrap().data[0], 6.0);
    }

    #[test]
    fn constant_gives_zero_gradient() {
        let x = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut tape = GradTape::new();
        let xv = tape.param(x);
        let c = tape.leaf(Tensor::new(vec![1], vec![7.0]).unwrap());
        let z = tape.leaf(Tensor::zeros(&[1]));
        let loss = tape.mse_loss(c, z).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(xv).is_none(), "constant must not reach x");
    }

    #[test]
    fn layer_norm_and_gelu_check() {
        let mut rng = RngStream::new(3);
        let x = Tensor::randn(&[4, 6], 0.5, &mut rng);
        let gamma = Tensor::randn(&[6], 0.3, &mut rng).map(|v| 1.0 + v);
        let beta = Tensor::randn(&[6], 0.2, &mut rng);
        let target = Tensor::randn(&[4, 6], 0.5, &mut rng);
        let err = grad_check(
            |tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                let g = tape.gelu(y);
                let z = tape.leaf(target.clone());
                tape.mse_loss(g, z)
            },
            &[x, gamma, beta],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn mha_check() {
        let mut rng = RngStream::new(4);
        let q = Tensor::randn(&[3, 4], 0.4, &mut rng);
        let k = Tensor::randn(&[3, 4], 0.4, &mut rng);
        let v = Tensor::randn(&[3, 4], 0.4, &mut rng);
        let target = Tensor::randn(&[3, 4], 0.5, &mut rng);
        let err = grad_check(
            |tape, vars| {
                let o = tape.mha(vars[0], vars[1], vars[2], 2)?;
                let z = tape.leaf(target.clone());
                tape.mse_loss(o, z)
            },
            &[q, k, v],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn softmax_and_row_ops_check() {
        let mut rng = RngStream::new(9);
        let x = Tensor::randn(&[3, 5], 0.5, &mut rng);
        let v = Tensor::randn(&[5], 0.5, &mut rng);
        let w = Tensor::randn(&[3], 0.5, &mut rng);
        let target = Tensor::randn(&[3, 5], 0.3, &mut rng);
        let err = grad_check(
            |tape, vars| {
                let a = tape.add_row_vec(vars[0], vars[1])?;
                let b = tape.row_scale(a, vars[2])?;
                let s = tape.softmax(b, 1)?;
                let z = tape.leaf(target.clone());
                tape.mse_loss(s, z)
            },
            &[x, v, w],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
