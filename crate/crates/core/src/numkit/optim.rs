use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Optimizer hyperparameters as they appear in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    #[serde(rename = "adamw")]
    AdamW {
        lr: f64,
        #[serde(default = "default_weight_decay")]
        weight_decay: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_weight_decay() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr }
    }

    /// AdamW with betas `(0.9, 0.999)` and epsilon `1e-8`.
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig::AdamW {
            lr,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::AdamW { lr, .. } => lr,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let lr = self.lr();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::config(format!("{path}.lr"), "must be finite and >= 0"));
        }
        if let OptimizerConfig::AdamW {
            weight_decay,
            beta1,
            beta2,
            eps,
            ..
        } = *self
        {
            if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
                return Err(Error::config(format!("{path}.weight_decay"), "must be >= 0"));
            }
            for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::config(format!("{path}.{name}"), "must lie in [0, 1)"));
                }
            }
            if !(eps > 0.0) {
                return Err(Error::config(format!("{path}.eps"), "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Mutable optimizer state: hyperparameters, step count and Adam moments.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor, Tensor)> {
        self.moments.get(name)
    }

    /// Applies one update to every `(name, tensor)` pair. Each must have a
    /// gradient of the same shape in `grads`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &Gradients,
    ) -> Result<()> {
        match self.config {
            OptimizerConfig::Sgd { .. } => self.sgd_step(params, grads),
            OptimizerConfig::AdamW { .. } => self.adamw_step(params, grads),
        }
    }

    /// `p <- p - lr * g`.
    pub fn sgd_step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &Gradients,
    ) -> Result<()> {
        let OptimizerConfig::Sgd { lr } = self.config else {
            return Err(Error::Contract("sgd_step on a non-SGD optimizer".into()));
        };
        self.step += 1;
        for (name, p) in params {
            let g = grad_for(grads, name, p)?;
            for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * gi;
            }
            p.ensure_finite("sgd_step")?;
        }
        Ok(())
    }

    /// Adam with bias-corrected moments and decoupled weight decay:
    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`.
    pub fn adamw_step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &Gradients,
    ) -> Result<()> {
        let OptimizerConfig::AdamW {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config
        else {
            return Err(Error::Contract("adamw_step on a non-AdamW optimizer".into()));
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params {
            let g = grad_for(grads, name, p)?;
            let (m, v) = self
                .moments
                .entry(name.to_owned())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *w -= lr * update + lr * weight_decay * *w;
            }
            p.ensure_finite("adamw_step")?;
        }
        Ok(())
    }
}

fn grad_for<'g>(grads: &'g Gradients, name: &str, p: &Tensor) -> Result<&'g Tensor> {
    let g = grads
        .get(name)
        .ok_or_else(|| Error::MissingGradient(name.to_owned()))?;
    if g.shape() != p.shape() {
        return Err(Error::shape(
            "optimizer",
            format!("gradient {:?} for parameter {name} {:?}", g.shape(), p.shape()),
        ));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(pairs: &[(&str, f64)]) -> Gradients {
        let mut g = Gradients::default();
        for &(n, v) in pairs {
            g.insert(n, Tensor::scalar(v));
        }
        g
    }

    #[test]
    fn sgd_single_step() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.01));
        opt.step([("w", &mut p)], &grads(&[("w", 0.5)])).unwrap();
        assert!((p.data()[0] - 0.995).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut p = Tensor::scalar(3.25);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1));
        opt.step([("w", &mut p)], &grads(&[("w", 0.0)])).unwrap();
        assert_eq!(p.data()[0], 3.25);
    }

    #[test]
    fn sgd_two_steps_match_summed_update() {
        let mut a = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.01));
        let g = grads(&[("w", 0.5)]);
        opt.step([("w", &mut a)], &g).unwrap();
        opt.step([("w", &mut a)], &g).unwrap();
        let mut b = Tensor::scalar(1.0);
        let mut once = OptimizerState::new(OptimizerConfig::sgd(0.02));
        once.step([("w", &mut b)], &g).unwrap();
        assert!((a.data()[0] - b.data()[0]).abs() < 1e-15);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.01));
        let err = opt.step([("w", &mut p)], &Gradients::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(n) if n == "w"));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = Tensor::scalar(0.5);
            let mut opt = OptimizerState::new(OptimizerConfig::adamw(0.1, 0.0));
            opt.step([("w", &mut p)], &grads(&[("w", g)])).unwrap();
            let moved = 0.5 - p.data()[0];
            assert!((moved - 0.1 * g.signum()).abs() < 1e-6, "g={g} moved={moved}");
        }
    }

    #[test]
    fn adamw_pure_decay() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::adamw(0.1, 0.01));
        opt.step([("w", &mut p)], &grads(&[("w", 0.0)])).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn adamw_moments_match_parameter_shape() {
        let mut p = Tensor::zeros(&[2, 3]);
        let mut g = Gradients::default();
        g.insert("w", Tensor::full(&[2, 3], 0.1));
        let mut opt = OptimizerState::new(OptimizerConfig::adamw(0.1, 0.0));
        opt.step([("w", &mut p)], &g).unwrap();
        let (m, v) = opt.moments("w").unwrap();
        assert_eq!(m.shape(), [2, 3]);
        assert_eq!(v.shape(), [2, 3]);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1));
        assert!(opt.adamw_step([("w", &mut p)], &grads(&[("w", 1.0)])).is_err());
    }
}
