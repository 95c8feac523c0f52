use crate::encoders::Param;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Cosine annealing from `lr` at step 0 to `min_lr` at `total`.
///
/// Written as `lr·w + min_lr·(1-w)` so both endpoints come out exactly.
/// Steps past `total` stay at `min_lr`.
pub fn cosine_lr(step: usize, total: usize, lr: f64, min_lr: f64) -> f64 {
    if total == 0 || step >= total {
        return if total == 0 && step == 0 { lr } else { min_lr };
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
    lr * w + min_lr * (1.0 - w)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Moment buffers shaped like `params`.
    pub fn new(params: &[&Param]) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// One bias-corrected update. `grads[i]` is `None` for frozen parameters,
    /// which are left untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut Param],
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} buffers, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::Contract(format!(
                        "gradient of {} has shape {:?}, parameter has {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} is not finite",
                        p.name
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_are_exact() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-6), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4, 1e-6), 1e-6);
        assert_eq!(cosine_lr(150, 100, 1e-4, 1e-6), 1e-6);
        assert!((cosine_lr(50, 100, 1e-4, 1e-6) - 5.05e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_monotone() {
        let trace: Vec<f64> = (0..=40).map(|s| cosine_lr(s, 40, 1e-4, 1e-6)).collect();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }

    fn scalar_param(x: f64) -> Param {
        Param::new("w", Tensor::vector(vec![x]), true)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(0.5);
        let mut opt = Adam::new(&[&p]);
        opt.step(&mut [&mut p], &[Some(Tensor::vector(vec![1.0]))], 1e-3)
            .unwrap();
        let want = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_param(0.5);
        let mut opt = Adam::new(&[&p]);
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[Some(Tensor::vector(vec![0.0]))], 1e-3)
                .unwrap();
        }
        assert_eq!(p.value.data()[0], 0.5);
    }

    #[test]
    fn frozen_and_nan_handling() {
        let mut p = scalar_param(0.5);
        p.trainable = false;
        let mut opt = Adam::new(&[&p]);
        opt.step(&mut [&mut p], &[Some(Tensor::vector(vec![1.0]))], 1.0)
            .unwrap();
        assert_eq!(p.value.data()[0], 0.5);
        let err = opt
            .step(&mut [&mut p], &[Some(Tensor::vector(vec![f64::NAN]))], 1.0)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains('w')));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Some(Tensor::vector(vec![3.0, 4.0])), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }
}
