//! Joint-update baselines: plain LoRA SGD, LoRA with AdamW, the two-rate
//! LoRA+ rule and joint scaled gradient descent.

use serde::{Deserialize, Serialize};

use super::altlora::adam_direction;
use super::config::TrainConfig;
use super::scaled::{scaled_grad_a, scaled_grad_b};
use crate::adapter::{lora_grads, LoraLayer};
use crate::error::{Error, Result};
use crate::matcore::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    LoraSgd,
    LoraAdam,
    LoraPlus,
    ScaledGdJoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineState {
    pub ma: Option<Matrix>,
    pub mb: Option<Matrix>,
    pub va: Option<Matrix>,
    pub vb: Option<Matrix>,
    pub t: usize,
}

impl BaselineState {
    pub fn new(kind: BaselineKind, layer: &LoraLayer) -> Self {
        let (ar, ac) = layer.a().shape();
        let (br, bc) = layer.b().shape();
        let first = matches!(kind, BaselineKind::LoraAdam | BaselineKind::ScaledGdJoint);
        let second = kind == BaselineKind::LoraAdam;
        Self {
            ma: first.then(|| Matrix::zeros(ar, ac)),
            mb: first.then(|| Matrix::zeros(br, bc)),
            va: second.then(|| Matrix::zeros(ar, ac)),
            vb: second.then(|| Matrix::zeros(br, bc)),
            t: 0,
        }
    }

    pub fn buffer_shapes(&self) -> Vec<(usize, usize)> {
        [&self.ma, &self.mb, &self.va, &self.vb]
            .into_iter()
            .flatten()
            .map(Matrix::shape)
            .collect()
    }

    pub fn entry_count(&self) -> usize {
        self.buffer_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// One joint step: both factors move using gradients taken at the same point.
pub fn baseline_step(
    kind: BaselineKind,
    layer: &mut LoraLayer,
    state: &mut BaselineState,
    g: &Matrix,
    cfg: &TrainConfig,
) -> Result<()> {
    let (grad_a, grad_b) = lora_grads(g, layer)?;
    state.t += 1;
    let t = state.t;
    let (dir_a, dir_b, eta_b) = match kind {
        BaselineKind::LoraSgd => (grad_a, grad_b, cfg.eta),
        BaselineKind::LoraPlus => (grad_a, grad_b, cfg.eta * cfg.lora_plus_ratio),
        BaselineKind::LoraAdam => {
            let (ma, mb, va, vb) = moments(state)?;
            *ma = ema(ma, cfg.beta1, &grad_a)?;
            *mb = ema(mb, cfg.beta1, &grad_b)?;
            let dir_a = adam_direction(ma, va.as_mut().ok_or_else(missing)?, &grad_a, t, cfg)?;
            let dir_b = adam_direction(mb, vb.as_mut().ok_or_else(missing)?, &grad_b, t, cfg)?;
            (dir_a, dir_b, cfg.eta)
        }
        BaselineKind::ScaledGdJoint => {
            let s = layer.scale();
            let scaled_a = scaled_grad_a(&grad_a, layer.b(), s, cfg.lambda)?;
            let scaled_b = scaled_grad_b(&grad_b, layer.a(), s, cfg.lambda)?;
            let (ma, mb, _, _) = moments(state)?;
            *ma = ema(ma, cfg.beta1, &scaled_a)?;
            *mb = ema(mb, cfg.beta1, &scaled_b)?;
            (ma.clone(), mb.clone(), cfg.eta)
        }
    };
    step_factor(&mut layer.a, &dir_a, cfg.eta, cfg.gamma);
    step_factor(&mut layer.b, &dir_b, eta_b, cfg.gamma);
    Ok(())
}

type Moments<'a> = (
    &'a mut Matrix,
    &'a mut Matrix,
    &'a mut Option<Matrix>,
    &'a mut Option<Matrix>,
);

fn moments(state: &mut BaselineState) -> Result<Moments<'_>> {
    match (&mut state.ma, &mut state.mb) {
        (Some(ma), Some(mb)) => Ok((ma, mb, &mut state.va, &mut state.vb)),
        _ => Err(missing()),
    }
}

fn missing() -> Error {
    Error::InvalidConfig("optimizer state was built for a different baseline".into())
}

fn ema(m: &Matrix, beta: f64, g: &Matrix) -> Result<Matrix> {
    m.zip_with(g, "ema", |mi, gi| beta * mi + (1.0 - beta) * gi)
}

fn step_factor(factor: &mut Matrix, direction: &Matrix, eta: f64, gamma: f64) {
    let decay = 1.0 - eta * gamma;
    for (p, &d) in factor.as_mut_slice().iter_mut().zip(direction.as_slice()) {
        *p = decay * *p - eta * d;
    }
}
