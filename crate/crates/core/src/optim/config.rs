use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::DEFAULT_LAMBDA;

/// Which factor an alternating optimizer moves on even steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    AFirst,
    /// Default: with `B = 0` initialization an A-first step cannot move.
    #[default]
    BFirst,
    /// Both factors from the same gradient in one step.
    Joint,
}

impl UpdateOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateOrder::AFirst => "a_first",
            UpdateOrder::BFirst => "b_first",
            UpdateOrder::Joint => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η·(1 + cos(π·t/T))/2` over the configured number of steps.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled weight decay.
    pub gamma: f64,
    /// Ridge damping added to every Gram matrix before inversion.
    pub lambda: f64,
    pub order: UpdateOrder,
    pub steps: usize,
    pub eps: f64,
    /// Adam-style bias correction of the moments (AltLoRA+ and LoRA-Adam).
    pub bias_correction: bool,
    /// `η_B / η_A` for the two-rate baseline.
    pub lora_plus_ratio: f64,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            gamma: 0.0,
            lambda: DEFAULT_LAMBDA,
            order: UpdateOrder::BFirst,
            steps: 1000,
            eps: 1e-8,
            bias_correction: true,
            lora_plus_ratio: 16.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig(what.to_string()))
            }
        };
        check(self.eta.is_finite() && self.eta >= 0.0, "eta must be finite and nonnegative")?;
        check((0.0..1.0).contains(&self.beta1), "beta1 must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)")?;
        check(self.gamma.is_finite() && self.gamma >= 0.0, "gamma must be nonnegative")?;
        check(self.lambda.is_finite() && self.lambda >= 0.0, "lambda must be nonnegative")?;
        check(self.eps.is_finite() && self.eps > 0.0, "eps must be positive")?;
        check(
            self.lora_plus_ratio.is_finite() && self.lora_plus_ratio > 0.0,
            "lora_plus_ratio must be positive",
        )?;
        Ok(())
    }

    /// Learning rate for step `t` under the configured schedule.
    pub fn eta_at(&self, t: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.eta,
            LrSchedule::Cosine => {
                let total = self.steps.max(1) as f64;
                let frac = (t as f64 / total).min(1.0);
                0.5 * self.eta * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}
