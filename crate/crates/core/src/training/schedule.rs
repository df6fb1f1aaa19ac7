use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule over a phase of `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `lr_peak · (1 − step/total)`, no warmup.
    LinearDecay,
    /// Linear 0→peak over `warmup_steps`, then `peak · ½(1 + cos(π·progress))`.
    CosineWithWarmup { warmup_steps: usize },
}

impl Schedule {
    pub fn lr(&self, step: usize, total: usize, lr_peak: f64) -> Result<f64> {
        if step > total {
            return Err(Error::Contract(format!("schedule step {step} exceeds total {total}")));
        }
        Ok(match *self {
            Schedule::Constant => lr_peak,
            Schedule::LinearDecay => {
                if total == 0 {
                    lr_peak
                } else {
                    lr_peak * (1.0 - step as f64 / total as f64)
                }
            }
            Schedule::CosineWithWarmup { warmup_steps } => {
                if warmup_steps >= total {
                    return Err(Error::Config(format!(
                        "warmup {warmup_steps} must be shorter than the {total}-step phase"
                    )));
                }
                if step < warmup_steps {
                    lr_peak * step as f64 / warmup_steps as f64
                } else {
                    let progress = (step - warmup_steps) as f64 / (total - warmup_steps) as f64;
                    lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        })
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if let Schedule::CosineWithWarmup { warmup_steps } = *self {
            if total > 0 && warmup_steps >= total {
                return Err(Error::Config(format!(
                    "warmup {warmup_steps} must be shorter than the {total}-step phase"
                )));
            }
        }
        Ok(())
    }
}
