//! Optimizers for LoRA factors.
//!
//! [`altlora_step`] / [`altlora_plus_step`] implement the alternating
//! projected-gradient methods; [`baseline_step`] covers the joint-update
//! baselines. [`Optimizer`] wraps either behind one interface and applies the
//! learning-rate schedule.

mod altlora;
mod baseline;
mod config;
mod lorapro;
mod scaled;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use altlora::{altlora_plus_step, altlora_step, AltLoraState, Phase};
pub use baseline::{baseline_step, BaselineKind, BaselineState};
pub use config::{LrSchedule, TrainConfig, UpdateOrder};
pub use lorapro::{equivalent_gradient, lorapro_equiv_grad};
pub use scaled::{align_momentum_a, align_momentum_b, scaled_grad_a, scaled_grad_b};

use crate::adapter::LoraLayer;
use crate::error::{Error, Result};
use crate::matcore::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AltLora,
    AltLoraPlus,
    LoraSgd,
    LoraAdam,
    LoraPlus,
    ScaledGdJoint,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::AltLora,
        OptimizerKind::AltLoraPlus,
        OptimizerKind::LoraSgd,
        OptimizerKind::LoraAdam,
        OptimizerKind::LoraPlus,
        OptimizerKind::ScaledGdJoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::AltLora => "alt_lora",
            OptimizerKind::AltLoraPlus => "alt_lora_plus",
            OptimizerKind::LoraSgd => "lora_sgd",
            OptimizerKind::LoraAdam => "lora_adam",
            OptimizerKind::LoraPlus => "lora_plus",
            OptimizerKind::ScaledGdJoint => "scaled_gd_joint",
        }
    }

    pub fn is_alternating(self) -> bool {
        matches!(self, OptimizerKind::AltLora | OptimizerKind::AltLoraPlus)
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            OptimizerKind::LoraSgd => Some(BaselineKind::LoraSgd),
            OptimizerKind::LoraAdam => Some(BaselineKind::LoraAdam),
            OptimizerKind::LoraPlus => Some(BaselineKind::LoraPlus),
            OptimizerKind::ScaledGdJoint => Some(BaselineKind::ScaledGdJoint),
            OptimizerKind::AltLora | OptimizerKind::AltLoraPlus => None,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Alternating(AltLoraState),
    Baseline(BaselineState),
}

/// An optimizer bound to one layer's shapes.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    cfg: TrainConfig,
    state: OptimizerState,
    steps_taken: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, cfg: TrainConfig, layer: &LoraLayer) -> Result<Self> {
        cfg.validate()?;
        let state = match kind {
            OptimizerKind::AltLora => OptimizerState::Alternating(AltLoraState::new(layer)),
            OptimizerKind::AltLoraPlus => {
                OptimizerState::Alternating(AltLoraState::with_second_moments(layer))
            }
            other => OptimizerState::Baseline(BaselineState::new(
                other.baseline().expect("joint kinds are baselines"),
                layer,
            )),
        };
        Ok(Self {
            kind,
            cfg,
            state,
            steps_taken: 0,
        })
    }

    /// Wraps an existing AltLoRA state, e.g. one mapped through a gauge.
    pub fn from_altlora_state(cfg: TrainConfig, state: AltLoraState) -> Result<Self> {
        cfg.validate()?;
        let kind = if state.has_second_moments() {
            OptimizerKind::AltLoraPlus
        } else {
            OptimizerKind::AltLora
        };
        Ok(Self {
            kind,
            cfg,
            steps_taken: state.t,
            state: OptimizerState::Alternating(state),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Factor(s) the next call to [`Optimizer::step`] will move.
    pub fn next_phase(&self) -> Phase {
        match &self.state {
            OptimizerState::Alternating(s) => s.next_phase(self.cfg.order),
            OptimizerState::Baseline(_) => Phase::Both,
        }
    }

    /// One step with gradient `g` evaluated at the layer's current factors.
    pub fn step(&mut self, layer: &mut LoraLayer, g: &Matrix) -> Result<Phase> {
        let eta = self.cfg.eta_at(self.steps_taken);
        let cfg = if eta == self.cfg.eta {
            std::borrow::Cow::Borrowed(&self.cfg)
        } else {
            std::borrow::Cow::Owned(TrainConfig {
                eta,
                ..self.cfg.clone()
            })
        };
        let phase = match (&mut self.state, self.kind) {
            (OptimizerState::Alternating(s), OptimizerKind::AltLora) => {
                altlora_step(layer, s, g, &cfg)?
            }
            (OptimizerState::Alternating(s), OptimizerKind::AltLoraPlus) => {
                altlora_plus_step(layer, s, g, &cfg)?
            }
            (OptimizerState::Baseline(s), kind) => {
                let baseline = kind.baseline().expect("baseline state implies baseline kind");
                baseline_step(baseline, layer, s, g, &cfg)?;
                Phase::Both
            }
            (OptimizerState::Alternating(_), _) => unreachable!("state built from kind"),
        };
        self.steps_taken += 1;
        Ok(phase)
    }

    pub fn buffer_shapes(&self) -> Vec<(usize, usize)> {
        match &self.state {
            OptimizerState::Alternating(s) => s.buffer_shapes(),
            OptimizerState::Baseline(s) => s.buffer_shapes(),
        }
    }

    /// Stored optimizer entries (factors themselves excluded).
    pub fn state_entries(&self) -> usize {
        self.buffer_shapes().iter().map(|(r, c)| r * c).sum()
    }
}
