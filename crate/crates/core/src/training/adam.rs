use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, Params};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts without touching
    /// any parameter.
    pub fn step(&mut self, params: &mut Params, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "gradient" });
            }
            if g.shape() != params.get(*id).shape() {
                return Err(Error::shape("adam", params.get(*id).shape(), g.shape()));
            }
        }
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(*id);
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> (Params, ParamId) {
        let mut p = Params::new();
        let id = p.add("w", Tensor::scalar(value), true);
        (p, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, id) = one(1.5);
        let mut opt = Adam::new(1e-3);
        for _ in 0..10 {
            opt.step(&mut p, &[(id, Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(p.get(id).data(), &[1.5]);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let (mut p, id) = one(0.0);
        let mut opt = Adam::new(1e-3);
        let mut prev = 0.0;
        for i in 0..200 {
            opt.step(&mut p, &[(id, Tensor::scalar(-4.0))]).unwrap();
            let now = p.get(id).data()[0];
            if i > 100 {
                assert!(((now - prev) - 1e-3).abs() < 1e-9);
            }
            prev = now;
        }
    }

    #[test]
    fn quadratic_converges() {
        let (mut p, id) = one(0.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let w = p.get(id).data()[0];
            opt.step(&mut p, &[(id, Tensor::scalar(2.0 * (w - 3.0)))])
                .unwrap();
        }
        assert!((p.get(id).data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (mut p, id) = one(2.0);
        let mut opt = Adam::new(1e-3);
        assert!(matches!(
            opt.step(&mut p, &[(id, Tensor::scalar(f64::NAN))]),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(p.get(id).data(), &[2.0]);
        assert_eq!(opt.steps(), 0);
    }
}
