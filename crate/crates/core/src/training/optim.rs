use std::collections::HashMap;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold, applied before the moment update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    /// The common AdamW defaults: β = (0.9, 0.999), ε = 1e-8, decay 0.01.
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// One trainable tensor and its gradient for a single update.
pub struct ParamGrad<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Bias-corrected Adam with decoupled weight decay. Moments are kept in f64
/// and keyed by tensor name.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: HashMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut [ParamGrad<'_>], lr: f64) -> Result<StepStats> {
        let mut sq = 0.0f64;
        for p in params.iter() {
            if p.grad.shape() != p.value.shape() {
                return Err(Error::Contract(format!(
                    "gradient of {} has shape {:?}, tensor has {:?}",
                    p.name,
                    p.grad.shape(),
                    p.value.shape()
                )));
            }
            if !p.grad.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in tensor {}", p.name)));
            }
            sq += p.grad.data().iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for p in params.iter_mut() {
            let n = p.value.numel();
            let (m, v) = self
                .moments
                .entry(p.name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, (theta, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g as f64 * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let (m_hat, v_hat) = (m[i] / bc1, v[i] / bc2);
                let t = *theta as f64;
                *theta = (t - lr * weight_decay * t - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
            if !p.value.is_finite() {
                return Err(Error::Numeric(format!("tensor {} became non-finite", p.name)));
            }
        }
        Ok(StepStats {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(theta: f32, g: f32, lr: f64, wd: f64) -> f32 {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: wd,
            ..Default::default()
        })
        .unwrap();
        let mut value = Tensor::scalar(theta);
        let grad = Tensor::scalar(g);
        opt.step(&mut [ParamGrad { name: "w", value: &mut value, grad: &grad }], lr).unwrap();
        value.data()[0]
    }

    #[test]
    fn hand_computed_steps() {
        assert!((one_step(1.0, 1.0, 0.1, 0.0) - 0.9).abs() < 1e-6);
        let want = 1.0 - 0.1 * 0.1 * 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((one_step(1.0, 1.0, 0.1, 0.1) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn clipping_halves_gradients() {
        // norm 2 clipped to 1: the first moment sees g/2
        let cfg = AdamWConfig {
            clip_norm: Some(1.0),
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut value = Tensor::zeros(&[2]);
        let grad = Tensor::new(vec![2], vec![2.0f32.sqrt(), 2.0f32.sqrt()]).unwrap();
        let stats = opt.step(&mut [ParamGrad { name: "w", value: &mut value, grad: &grad }], 0.1).unwrap();
        assert!((stats.grad_norm - 2.0).abs() < 1e-6 && stats.clipped);
        let (m, _) = &opt.moments["w"];
        assert!((m[0] - 0.1 * 2.0f64.sqrt() / 2.0).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        let mut value = Tensor::zeros(&[1]);
        let grad = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        let err = opt
            .step(&mut [ParamGrad { name: "layer0.adpt.up", value: &mut value, grad: &grad }], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("layer0.adpt.up"));
        assert_eq!(value.data()[0], 0.0);
    }
}
