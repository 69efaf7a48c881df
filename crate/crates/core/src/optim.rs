//! Adam over named candle variables, with state that round-trips through checkpoints.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Number of completed steps.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::invalid("adam: lr must be positive and betas in [0, 1)"));
        }
        let params = params.entries.clone();
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Adam { config, params, m, v, t: 0 })
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    /// Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else { continue };
            // moments must not hold the step's autograd graph
            let g = g.detach();
            let g = &g;
            let m = ((&self.m[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v * (1.0 / c2))?.sqrt()? + eps)?;
            let update = ((&m * (lr / c1))? / denom)?;
            p.set(&p.as_tensor().detach().sub(&update)?)?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }

    /// `(name, first moment, second moment)` per parameter, in parameter order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.params.iter().zip(self.m.iter().zip(&self.v)).map(|((n, _), (m, v))| (n.as_str(), m, v))
    }

    pub fn set_moments(&mut self, name: &str, m: Tensor, v: Tensor) -> Result<()> {
        let i = self
            .params
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("adam: unknown parameter `{name}`")))?;
        if m.dims() != self.m[i].dims() || v.dims() != self.v[i].dims() {
            return Err(Error::invalid(format!("adam: moment shape mismatch for `{name}`")));
        }
        self.m[i] = m.to_dtype(self.m[i].dtype())?;
        self.v[i] = v.to_dtype(self.v[i].dtype())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let set = ParamSet { entries: vec![("x".into(), x.clone())] };
        let mut opt = Adam::new(&set, AdamConfig::with_lr(0.1)).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
        assert_eq!(opt.t, 500);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g) up to eps
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -1.0], &Device::Cpu).unwrap()).unwrap();
        let set = ParamSet { entries: vec![("x".into(), x.clone())] };
        let mut opt = Adam::new(&set, AdamConfig::with_lr(0.01)).unwrap();
        let loss = (x.as_tensor() * 5.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.99).abs() < 1e-9 && (v[1] + 1.01).abs() < 1e-9);
    }
}
