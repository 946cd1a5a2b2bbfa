//! Adam with bias correction and a constant learning rate.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in place. Moments are kept in `f64`.
    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                op: "adam",
                detail: format!("{} params but {} gradients", params.len(), grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    detail: format!("param {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| alloc::vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::Shape {
                op: "adam",
                detail: "parameter layout changed between steps".into(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gv), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv.as_f64();
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gv;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gv * gv;
                let mh = *mj / c1;
                let vh = *vj / c2;
                *w = T::from_f64(w.as_f64() - lr * mh / (num_traits::Float::sqrt(vh) + self.eps));
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.data().iter()).map(|v| v.as_f64() * v.as_f64()).sum();
    num_traits::Float::sqrt(sq)
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = T::from_f64(max_norm / n);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![t(&[1.0, -2.0, 3.0])];
        let mut opt = Adam::default();
        for _ in 0..3 {
            opt.step(&mut p, &[t(&[0.0; 3])], 0.1).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![t(&[0.0, 0.0, 0.0])];
        let g = t(&[0.5, -3.0, 1e-3]);
        Adam::default().step(&mut p, &[g], 0.01).unwrap();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε)
        for (w, gv) in p[0].data().iter().zip([0.5, -3.0, 1e-3f64]) {
            let want = -0.01 * gv / (gv.abs() + 1e-8);
            assert!((w - want).abs() < 1e-12, "{w} vs {want}");
            assert!((w + 0.01 * gv.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_runs_give_identical_state() {
        let run = || {
            let mut p = vec![t(&[0.3, 0.1])];
            let mut opt = Adam::default();
            for k in 0..10 {
                let g = t(&[(k as f64).sin(), p[0].data()[0]]);
                opt.step(&mut p, &[g], 1e-2).unwrap();
            }
            (p, opt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_non_finite_and_mismatched_gradients() {
        let mut p = vec![t(&[0.0, 0.0])];
        let mut opt = Adam::default();
        assert!(matches!(opt.step(&mut p, &[t(&[f64::NAN, 0.0])], 0.1), Err(Error::NonFinite(_))));
        assert!(opt.step(&mut p, &[t(&[0.0])], 0.1).is_err());
        assert!(opt.step(&mut p, &[], 0.1).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![t(&[3.0]), t(&[4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![t(&[0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3]);
    }
}
