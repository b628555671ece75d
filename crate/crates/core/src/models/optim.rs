use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Parameter(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are kept per parameter entry.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.len()])
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update. Entries without a gradient and fixed entries are
    /// left alone; a frozen parameter set is a contract violation.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if params.is_frozen() {
            return Err(Error::Contract("optimizer step on a frozen model".into()));
        }
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} entries, model has {}, got {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (slot, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if !params.entries()[slot].trainable {
                continue;
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let value = params.get_mut(slot)?;
            if grad.len() != value.len() {
                return Err(Error::Dimension(format!(
                    "gradient for entry {slot} has the wrong size"
                )));
            }
            for (i, (w, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                *w -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![1.0, -1.0, 0.0]), true);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Some(Tensor::vector(vec![2.0, -0.5, 0.0]))])
            .unwrap();
        let w = p.get(0).data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn fixed_entries_and_frozen_sets() {
        let mut p = ParamSet::new();
        p.push("fixed", Tensor::vector(vec![0.5]), false);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Some(Tensor::vector(vec![1.0]))])
            .unwrap();
        assert_eq!(p.get(0).data(), &[0.5]);
        p.freeze();
        assert!(matches!(opt.step(&mut p, &[None]), Err(Error::Contract(_))));
    }
}
