//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.get(id).shape().to_vec())).collect();
        Adam {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }

    /// Applies one update. `grads` is aligned with [`ParamStore::ids`]. Every
    /// gradient is checked before anything is modified, so a non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::dim("adam", g.shape(), params.get(id).shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: params.name(id).to_string(),
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, id) in params.ids().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = params.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                theta[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(x));
        s
    }

    #[test]
    fn zero_gradient_from_rest_leaves_parameters() {
        let mut p = one_param(vec![1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Tensor::zeros([2])]).unwrap();
        assert_eq!(p, one_param(vec![1.0, -2.0]));
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = one_param(vec![1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Tensor::vector(vec![1.0, -3.0])]).unwrap();
        let (m, v) = (opt.first_moment(0).clone(), opt.second_moment(0).clone());
        opt.step(&mut p, &[Tensor::zeros([2])]).unwrap();
        for k in 0..2 {
            assert_eq!(opt.first_moment(0).data()[k], 0.9 * m.data()[k]);
            assert_eq!(opt.second_moment(0).data()[k], 0.999 * v.data()[k]);
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_sign() {
        let mut p = one_param(vec![0.0, 0.0]);
        let lr = 0.01;
        let mut opt = Adam::new(AdamConfig { lr, ..Default::default() }, &p);
        let g = [Tensor::vector(vec![3.0, -0.5])];
        for _ in 0..500 {
            opt.step(&mut p, &g).unwrap();
        }
        let before = p.clone();
        opt.step(&mut p, &g).unwrap();
        let id = p.ids().next().unwrap();
        let (a, b) = (before.get(id).data(), p.get(id).data());
        assert!((a[0] - b[0] - lr).abs() < 1e-8, "{}", a[0] - b[0]);
        assert!((b[1] - a[1] - lr).abs() < 1e-8, "{}", b[1] - a[1]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one_param(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        match opt.step(&mut p, &[Tensor::vector(vec![f64::NAN])]) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "w"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
        assert_eq!(opt.steps(), 0);
        assert_eq!(p, one_param(vec![1.0]));
    }
}
