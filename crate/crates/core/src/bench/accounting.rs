//! Memory and FLOP accounting from the optimizer state layouts.
//!
//! Counts are in `f64` entries and are derived from shapes, never from
//! allocations. `optimizer_state` is the peak optimizer-owned working set of
//! one step for the layouts below (per factor, so each line costs `kr + rd`):
//!
//! | method           | buffers per factor                                   |
//! |------------------|------------------------------------------------------|
//! | AltLoRA          | moment, snapshot, scaled gradient, realigned moment  |
//! | AltLoRA+         | the four above, second moment, update direction      |
//! | LoRA-SGD, LoRA+  | gradient                                             |
//! | LoRA-Adam        | moment, second moment, gradient, update direction    |
//! | joint ScaledGD   | moment, scaled gradient                              |
//!
//! `persistent_state` counts only what survives between steps. The
//! full-moment reference `2kd` is the size of a dense first+second moment of
//! the merged weight; it is computed, never allocated.

use serde::{Deserialize, Serialize};

use crate::optim::{OptimizerKind, Phase, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateAccounting {
    pub method: OptimizerKind,
    pub k: usize,
    pub d: usize,
    pub r: usize,
    /// `kr + rd`.
    pub trainable: u64,
    pub persistent_state: u64,
    pub optimizer_state: u64,
    /// `k×d`-sized buffers the pair-step verifier materialises, plus its projectors.
    pub peak_verification: u64,
    /// `2kd`.
    pub full_moment_reference: u64,
}

impl StateAccounting {
    /// `full_moment_reference / optimizer_state`.
    pub fn reduction_factor(&self) -> f64 {
        self.full_moment_reference as f64 / self.optimizer_state as f64
    }
}

fn buffers(method: OptimizerKind) -> (u64, u64) {
    // (persistent, peak) buffers per factor.
    match method {
        OptimizerKind::AltLora => (2, 4),
        OptimizerKind::AltLoraPlus => (3, 6),
        OptimizerKind::LoraSgd | OptimizerKind::LoraPlus => (0, 1),
        OptimizerKind::LoraAdam => (2, 4),
        OptimizerKind::ScaledGdJoint => (1, 2),
    }
}

pub fn state_accounting(k: usize, d: usize, r: usize, method: OptimizerKind) -> StateAccounting {
    let (k64, d64, r64) = (k as u64, d as u64, r as u64);
    let low_rank = k64 * r64 + r64 * d64;
    let (persistent, peak) = buffers(method);
    StateAccounting {
        method,
        k,
        d,
        r,
        trainable: low_rank,
        persistent_state: persistent * low_rank,
        optimizer_state: peak * low_rank,
        peak_verification: 7 * k64 * d64 + k64 * k64 + 2 * d64 * d64,
        full_moment_reference: 2 * k64 * d64,
    }
}

/// Forward + backward cost of one full-batch gradient evaluation.
pub fn gradient_flops(k: usize, d: usize, r: usize, m: usize, head_rows: Option<usize>) -> u64 {
    let (k, d, r, m) = (k as u64, d as u64, r as u64, m as u64);
    let merged = 2 * k * r * d + 2 * k * d;
    let forward = 2 * k * d * m;
    let grad = 2 * k * d * m;
    let mut total = merged + forward + grad + 3 * k * m;
    if let Some(h) = head_rows {
        let h = h as u64;
        total += 4 * h * k * m + 2 * k * m;
    }
    total
}

fn inverse_flops(r: u64) -> u64 {
    // Cholesky plus triangular inverse and product.
    r * r * r / 3 + r * r * r
}

fn factor_flops(kind: OptimizerKind, cfg: &TrainConfig, outer: u64, r: u64, inner: u64) -> u64 {
    // One factor of shape r×inner whose opposite factor is outer×r.
    let raw = 2 * outer * r * inner;
    let elementwise = 3 * r * inner;
    let scaled = 2 * outer * r * r + inverse_flops(r) + 2 * r * r * inner;
    let align = 2 * outer * r * r + inverse_flops(r) + 2 * r * r * r + 2 * r * r * inner;
    let adaptive = 6 * r * inner;
    match kind {
        OptimizerKind::LoraSgd | OptimizerKind::LoraPlus => raw + elementwise,
        OptimizerKind::LoraAdam => raw + elementwise + adaptive + 3 * r * inner,
        OptimizerKind::ScaledGdJoint => raw + scaled + elementwise + 3 * r * inner,
        OptimizerKind::AltLora | OptimizerKind::AltLoraPlus => {
            let mut f = raw + scaled + elementwise + 3 * r * inner;
            if cfg.beta1 > 0.0 {
                f += align;
            }
            if kind == OptimizerKind::AltLoraPlus {
                f += adaptive;
            }
            f
        }
    }
}

/// Optimizer arithmetic for one step, excluding the gradient evaluation.
pub fn optimizer_step_flops(
    kind: OptimizerKind,
    cfg: &TrainConfig,
    k: usize,
    d: usize,
    r: usize,
    phase: Phase,
) -> u64 {
    let (k, d, r) = (k as u64, d as u64, r as u64);
    let a_cost = factor_flops(kind, cfg, k, r, d);
    let b_cost = factor_flops(kind, cfg, d, r, k);
    match phase {
        Phase::A => a_cost,
        Phase::B => b_cost,
        Phase::Both => a_cost + b_cost,
    }
}
