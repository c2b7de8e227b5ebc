//! Adam with bias correction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad Adam settings {self:?}")))
        }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        let v = m.clone();
        Adam {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update. Nothing is modified if any gradient is NaN or
    /// any shape disagrees with the moment buffers.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidConfig(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&self.m)) {
            if !p.same_shape(g) || !p.same_shape(m) {
                return Err(Error::InvalidConfig(format!(
                    "shape drift on {name}: param {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            if g.data().iter().any(|x| x.is_nan()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name}"),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - math::powf(c.beta1, t);
        let bc2 = 1.0 - math::powf(c.beta2, t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= c.lr * m_hat / (math::sqrt(v_hat) + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one(v: f64) -> Tensor {
        Tensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::vector(vec![1.5, -2.0]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), [&p]);
        let g = Tensor::zeros(vec![2]);
        opt.step(&mut [("p".into(), &mut p)], &[g]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut x = one(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, [&x]);
        // f(x) = x has unit gradient; bias correction makes m_hat = v_hat = 1.
        opt.step(&mut [("x".into(), &mut x)], &[one(1.0)]).unwrap();
        assert!((x.item() + 0.1).abs() < 1e-8, "{}", x.item());
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let run = || {
            let mut x = Tensor::vector(vec![0.3, -0.7, 1.1]).unwrap();
            let mut opt = Adam::new(AdamConfig::default(), [&x]);
            for k in 0..5 {
                let g = x.map(|v| v * (k as f64 + 1.0) - 0.2);
                opt.step(&mut [("x".into(), &mut x)], &[g]).unwrap();
            }
            (x, opt)
        };
        let (a, oa) = run();
        let (b, ob) = run();
        assert_eq!(a.data(), b.data());
        assert_eq!(oa, ob);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut x = one(0.0);
        let mut opt = Adam::new(AdamConfig::default(), [&x]);
        let err = opt
            .step(&mut [("encoder.0.w1".into(), &mut x)], &[one(f64::NAN)])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref what } if what.contains("encoder.0.w1")));
        assert_eq!(opt.step_count(), 0);
        assert_eq!(x.item(), 0.0);
    }
}
