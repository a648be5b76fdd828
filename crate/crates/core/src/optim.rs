//! Adam with bias correction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Adam { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Array2<f64>] {
        &self.m
    }

    /// Applies one update. Fails without touching `params` if any gradient
    /// is not finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::input("gradient count does not match parameter count"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.dim() != params.values()[i].dim() {
                return Err(Error::input(format!("gradient shape mismatch for '{}'", params.names()[i])));
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite gradient {bad} for parameter '{}' at optimizer step {}",
                    params.names()[i],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("x", array![[v]]);
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one(1.5);
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &[array![[0.0]]], 0.1).unwrap();
        assert_eq!(p.values()[0][[0, 0]], 1.5);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = one(0.0);
        let mut adam = Adam::new(&p, AdamConfig::default());
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.values()[0][[0, 0]];
            adam.step(&mut p, &[array![[-3.0]]], 1e-3).unwrap();
            last = p.values()[0][[0, 0]] - before;
        }
        assert!((last - 1e-3).abs() < 1e-9, "{last}");
    }

    #[test]
    fn nan_gradient_is_numerical_error() {
        let mut p = one(0.0);
        let mut adam = Adam::new(&p, AdamConfig::default());
        assert!(matches!(adam.step(&mut p, &[array![[f64::NAN]]], 0.1), Err(Error::Numerical(_))));
        assert_eq!(p.values()[0][[0, 0]], 0.0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = one(2.0);
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &[array![[5.0]]], 0.0).unwrap();
        assert_eq!(p.values()[0][[0, 0]], 2.0);
    }
}
