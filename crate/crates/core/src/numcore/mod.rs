//! Dense tensors, a reverse-mode tape, and a finite-difference gradient checker.

mod tape;
mod tensor;

pub use tape::{concat_cols, Activation, Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Largest coordinate-wise `|analytic - numeric| / max(1, |analytic|)` for a
/// scalar function of `x`, using central differences with step `h`.
///
/// `f` is re-run on a fresh tape for every perturbation.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let y = f(&tape, xv)?;
        if y.value().numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar output, got shape {:?}",
                y.shape()
            )));
        }
        y.backward()?.wrt(xv)
    };

    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(t);
        f(&tape, xv)?.item()
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference at coordinate {i}"
            )));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Standalone matrix product on plain tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let out = tape.constant(a.clone()).matmul(tape.constant(b.clone()))?;
    let t = out.value().clone();
    Ok(t)
}

/// Standalone `log Σ exp` along `axis`.
pub fn logsumexp(x: &Tensor, axis: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let out = tape.constant(x.clone()).logsumexp(axis)?;
    let t = out.value().clone();
    Ok(t)
}

/// Standalone row-wise L2 normalization.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let out = tape.constant(x.clone()).l2_normalize()?;
    let t = out.value().clone();
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                }
            }
        }
        Tensor::matrix(m, n, out).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::eye(2);
        assert_eq!(matmul(&i, &i).unwrap(), i);
    }

    #[test]
    fn matmul_hand_product() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 1);
        let b = random(&[7, 3], 2);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_check() {
        let a = random(&[3, 4], 3);
        let b = random(&[4, 2], 4);
        let err_a = grad_check(|t, x| x.matmul(t.constant(b.clone()))?.sum(), &a, FD_STEP).unwrap();
        let err_b = grad_check(
            |t, x| {
                let p = t.constant(a.clone()).matmul(x)?;
                p.mul(p)?.sum()
            },
            &b,
            FD_STEP,
        )
        .unwrap();
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn logsumexp_values() {
        let z = logsumexp(&Tensor::vector(vec![0.0, 0.0, 0.0]), 0).unwrap();
        assert!((z.item().unwrap() - 3f64.ln()).abs() < 1e-15);
        let big = logsumexp(&Tensor::vector(vec![1000.0, 1000.0]), 0).unwrap();
        assert!((big.item().unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_matches_naive() {
        let x = random(&[5], 9);
        let naive = x.data().iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((logsumexp(&x, 0).unwrap().item().unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_axes() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rows = logsumexp(&x, 1).unwrap();
        let cols = logsumexp(&x, 0).unwrap();
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(cols.shape(), &[3]);
        let r0 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum::<f64>().ln();
        let c0 = [1.0f64, 4.0].iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((rows.data()[0] - r0).abs() < 1e-12);
        assert!((cols.data()[0] - c0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_empty_axis_is_domain_error() {
        let err = logsumexp(&Tensor::vector(vec![]), 0).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn logsumexp_grad_check() {
        let x = random(&[3, 4], 5);
        let err = grad_check(|_, v| v.logsumexp(1)?.sum(), &x, FD_STEP).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn normalize_values() {
        let y = l2_normalize(&Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let u = Tensor::vector(vec![0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&u).unwrap(), u);
    }

    #[test]
    fn normalize_rejects_tiny_norm() {
        let err = l2_normalize(&Tensor::vector(vec![1e-13, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn normalize_grad_check() {
        let x = random(&[8], 6);
        let w = random(&[8], 7);
        let err = grad_check(
            |t, v| v.l2_normalize()?.mul(t.constant(w.clone()))?.sum(),
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_quadratic() {
        let x = random(&[6], 8);
        let err = grad_check(|_, v| v.mul(v)?.sum(), &x, FD_STEP).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_vector_output() {
        let x = random(&[3], 8);
        let err = grad_check(|_, v| v.scale(2.0), &x, FD_STEP).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn composed_ops_grad_check() {
        let x = random(&[4, 3], 10);
        let bias = random(&[3], 11);
        let err = grad_check(
            |t, v| {
                let h = v
                    .add_row_bias(t.constant(bias.clone()))?
                    .activation(Activation::Gelu)?;
                let rows = h.gather_rows(&[0, 2, 2, 3])?;
                let n = rows.norm()?;
                let e = h.exp()?.gather(vec![0, 5, 11], vec![3])?;
                let c = concat_cols(&[n.gather(vec![0, 1, 2], vec![3])?, e])?;
                c.logsumexp(1)?.add_scalar(1.0)?.ln()?.sum()
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn activation_grad_checks() {
        let x = random(&[10], 12);
        for act in [Activation::Tanh, Activation::Gelu] {
            let err = grad_check(|_, v| v.activation(act)?.sum(), &x, FD_STEP).unwrap();
            assert!(err < 1e-8, "{act:?} {err}");
        }
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1000.0]));
        assert!(matches!(x.exp().unwrap_err(), Error::NonFinite(_)));
    }

    #[test]
    fn backward_is_deterministic() {
        let x = random(&[4, 4], 13);
        let run = || {
            let tape = Tape::new();
            let v = tape.var(x.clone());
            let y = v.matmul(v).unwrap().logsumexp(0).unwrap().sum().unwrap();
            y.backward().unwrap().wrt(v)
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariance(
            xs in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let x = Tensor::vector(xs.clone());
            let shifted = Tensor::vector(xs.iter().map(|v| v + c).collect());
            let a = logsumexp(&x, 0).unwrap().item().unwrap();
            let b = logsumexp(&shifted, 0).unwrap().item().unwrap();
            prop_assert!((a - (b - c)).abs() < 1e-12);
        }
    }
}
