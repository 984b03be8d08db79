//! AltLoRA and AltLoRA+.
//!
//! One call to [`altlora_step`] moves a single factor (or both, under
//! [`UpdateOrder::Joint`]). The caller must re-evaluate the merged-weight
//! gradient between calls: the B-phase gradient belongs to the half-step
//! weight produced by the preceding A-phase.
//!
//! The first moments live in factor coordinates and are realigned to the
//! current opposite factor before each use. AltLoRA+ adds elementwise second
//! moments of the scaled gradient; those are not realigned.

use super::config::{TrainConfig, UpdateOrder};
use super::scaled::{align_momentum_a, align_momentum_b, scaled_grad_a, scaled_grad_b};
use crate::adapter::LoraLayer;
use crate::error::{Error, Result};
use crate::matcore::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    A,
    B,
    Both,
}

/// Per-layer optimizer state. Every buffer is `r×d` or `k×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct AltLoraState {
    /// First moment of `A`, expressed against the `B` in `prev_b`.
    pub ma: Matrix,
    /// First moment of `B`, expressed against the `A` in `prev_a`.
    pub mb: Matrix,
    /// `A` at the time `mb` was last formed.
    pub prev_a: Matrix,
    /// `B` at the time `ma` was last formed.
    pub prev_b: Matrix,
    pub va: Option<Matrix>,
    pub vb: Option<Matrix>,
    /// Steps taken.
    pub t: usize,
    pub updates_a: usize,
    pub updates_b: usize,
}

impl AltLoraState {
    /// Zero moments, snapshots at the initial factors.
    pub fn new(layer: &LoraLayer) -> Self {
        Self {
            ma: Matrix::zeros(layer.a().rows(), layer.a().cols()),
            mb: Matrix::zeros(layer.b().rows(), layer.b().cols()),
            prev_a: layer.a().clone(),
            prev_b: layer.b().clone(),
            va: None,
            vb: None,
            t: 0,
            updates_a: 0,
            updates_b: 0,
        }
    }

    /// State for AltLoRA+, with zeroed second moments.
    pub fn with_second_moments(layer: &LoraLayer) -> Self {
        let mut state = Self::new(layer);
        state.va = Some(Matrix::zeros(layer.a().rows(), layer.a().cols()));
        state.vb = Some(Matrix::zeros(layer.b().rows(), layer.b().cols()));
        state
    }

    pub fn has_second_moments(&self) -> bool {
        self.va.is_some()
    }

    pub fn buffer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![
            self.ma.shape(),
            self.mb.shape(),
            self.prev_a.shape(),
            self.prev_b.shape(),
        ];
        shapes.extend(self.va.iter().map(Matrix::shape));
        shapes.extend(self.vb.iter().map(Matrix::shape));
        shapes
    }

    /// Number of stored `f64` entries.
    pub fn entry_count(&self) -> usize {
        self.buffer_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// The factor(s) the next step will move.
    pub fn next_phase(&self, order: UpdateOrder) -> Phase {
        let even = self.t.is_multiple_of(2);
        match (order, even) {
            (UpdateOrder::Joint, _) => Phase::Both,
            (UpdateOrder::AFirst, true) | (UpdateOrder::BFirst, false) => Phase::A,
            (UpdateOrder::AFirst, false) | (UpdateOrder::BFirst, true) => Phase::B,
        }
    }

    fn check_layer(&self, layer: &LoraLayer) -> Result<()> {
        if self.ma.shape() != layer.a().shape() || self.mb.shape() != layer.b().shape() {
            return Err(Error::shape("altlora state", self.ma.shape(), layer.a().shape()));
        }
        Ok(())
    }
}

/// One AltLoRA step (first moment only). `g` is the merged-weight gradient at
/// the layer's current factors.
pub fn altlora_step(
    layer: &mut LoraLayer,
    state: &mut AltLoraState,
    g: &Matrix,
    cfg: &TrainConfig,
) -> Result<Phase> {
    step_impl(layer, state, g, cfg, false)
}

/// One AltLoRA+ step: the realigned first moment is divided elementwise by
/// the square root of an unaligned second moment of the scaled gradient.
pub fn altlora_plus_step(
    layer: &mut LoraLayer,
    state: &mut AltLoraState,
    g: &Matrix,
    cfg: &TrainConfig,
) -> Result<Phase> {
    if !state.has_second_moments() {
        state.va = Some(Matrix::zeros(layer.a().rows(), layer.a().cols()));
        state.vb = Some(Matrix::zeros(layer.b().rows(), layer.b().cols()));
    }
    step_impl(layer, state, g, cfg, true)
}

fn step_impl(
    layer: &mut LoraLayer,
    state: &mut AltLoraState,
    g: &Matrix,
    cfg: &TrainConfig,
    adaptive: bool,
) -> Result<Phase> {
    state.check_layer(layer)?;
    if g.shape() != layer.dims() {
        return Err(Error::shape("altlora_step", g.shape(), layer.dims()));
    }
    let phase = state.next_phase(cfg.order);
    let s = layer.scale();
    match phase {
        Phase::A => {
            let direction = a_direction(layer, state, g, cfg, adaptive, s)?;
            apply(&mut layer.a, &direction, cfg);
        }
        Phase::B => {
            let direction = b_direction(layer, state, g, cfg, adaptive, s)?;
            apply(&mut layer.b, &direction, cfg);
        }
        Phase::Both => {
            // Both directions are computed at the pre-step factors.
            let dir_a = a_direction(layer, state, g, cfg, adaptive, s)?;
            let dir_b = b_direction(layer, state, g, cfg, adaptive, s)?;
            apply(&mut layer.a, &dir_a, cfg);
            apply(&mut layer.b, &dir_b, cfg);
        }
    }
    state.t += 1;
    Ok(phase)
}

fn a_direction(
    layer: &LoraLayer,
    state: &mut AltLoraState,
    g: &Matrix,
    cfg: &TrainConfig,
    adaptive: bool,
    s: f64,
) -> Result<Matrix> {
    let b = layer.b();
    let grad_a = b.t_matmul(g)?.scale(s);
    let scaled = scaled_grad_a(&grad_a, b, s, cfg.lambda)?;
    state.ma = blend_moment(&state.ma, cfg.beta1, &scaled, || {
        align_momentum_a(&state.ma, &state.prev_b, b, cfg.lambda)
    })?;
    state.prev_b = b.clone();
    state.updates_a += 1;
    if adaptive {
        let v = state.va.as_mut().expect("second moments allocated");
        adam_direction(&state.ma, v, &scaled, state.updates_a, cfg)
    } else {
        Ok(state.ma.clone())
    }
}

fn b_direction(
    layer: &LoraLayer,
    state: &mut AltLoraState,
    g: &Matrix,
    cfg: &TrainConfig,
    adaptive: bool,
    s: f64,
) -> Result<Matrix> {
    let a = layer.a();
    let grad_b = g.matmul_t(a)?.scale(s);
    let scaled = scaled_grad_b(&grad_b, a, s, cfg.lambda)?;
    state.mb = blend_moment(&state.mb, cfg.beta1, &scaled, || {
        align_momentum_b(&state.mb, &state.prev_a, a, cfg.lambda)
    })?;
    state.prev_a = a.clone();
    state.updates_b += 1;
    if adaptive {
        let v = state.vb.as_mut().expect("second moments allocated");
        adam_direction(&state.mb, v, &scaled, state.updates_b, cfg)
    } else {
        Ok(state.mb.clone())
    }
}

/// `β₁·M̃ + (1 − β₁)·∇̃`. Realignment is skipped when it cannot contribute.
fn blend_moment(
    moment: &Matrix,
    beta1: f64,
    scaled: &Matrix,
    align: impl FnOnce() -> Result<Matrix>,
) -> Result<Matrix> {
    if beta1 == 0.0 || moment.is_zero() {
        return Ok(scaled.scale(1.0 - beta1));
    }
    let mut m = align()?.scale(beta1);
    m.axpy(1.0 - beta1, scaled)?;
    Ok(m)
}

/// Updates `v` in place and returns `M̂ ⊘ (√V̂ + eps)`.
pub(crate) fn adam_direction(
    m: &Matrix,
    v: &mut Matrix,
    grad: &Matrix,
    count: usize,
    cfg: &TrainConfig,
) -> Result<Matrix> {
    let beta2 = cfg.beta2;
    *v = v.zip_with(grad, "second moment", |vi, gi| beta2 * vi + (1.0 - beta2) * gi * gi)?;
    let (c1, c2) = if cfg.bias_correction {
        let n = count as i32;
        (1.0 - cfg.beta1.powi(n), 1.0 - beta2.powi(n))
    } else {
        (1.0, 1.0)
    };
    let eps = cfg.eps;
    m.zip_with(v, "adam direction", |mi, vi| (mi / c1) / ((vi / c2).sqrt() + eps))
}

/// `factor ← factor − η·(direction + γ·factor)`.
fn apply(factor: &mut Matrix, direction: &Matrix, cfg: &TrainConfig) {
    let decay = 1.0 - cfg.eta * cfg.gamma;
    let eta = cfg.eta;
    for (p, &d) in factor.as_mut_slice().iter_mut().zip(direction.as_slice()) {
        *p = decay * *p - eta * d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{damped_gram_inverse, SeededRng, Side};

    fn random_layer(seed: u64, k: usize, d: usize, r: usize, zero_b: bool) -> LoraLayer {
        let mut rng = SeededRng::new(seed);
        let w0 = rng.gaussian_matrix(k, d, 1.0);
        let a = rng.gaussian_matrix(r, d, 1.0);
        let b = if zero_b {
            Matrix::zeros(k, r)
        } else {
            rng.gaussian_matrix(k, r, 1.0)
        };
        LoraLayer::new(w0, a, b, 2.0 * r as f64).unwrap()
    }

    #[test]
    fn first_b_phase_from_zero_b() {
        let mut layer = random_layer(4, 6, 5, 2, true);
        let a_before = layer.a().clone();
        let mut state = AltLoraState::new(&layer);
        let g = SeededRng::new(5).gaussian_matrix(6, 5, 1.0);
        let cfg = TrainConfig {
            eta: 0.3,
            ..TrainConfig::default()
        };
        let phase = altlora_step(&mut layer, &mut state, &g, &cfg).unwrap();
        assert_eq!(phase, Phase::B);
        assert_eq!(layer.a(), &a_before);

        let s = layer.scale();
        let inv = damped_gram_inverse(&a_before, Side::Right, cfg.lambda).unwrap();
        let scaled = g.matmul_t(&a_before).unwrap().matmul(&inv).unwrap().scale(1.0 / s);
        let expected = scaled.scale(-cfg.eta * (1.0 - cfg.beta1));
        assert!(layer.b().rel_err(&expected) < 1e-12);
    }

    #[test]
    fn pure_weight_decay() {
        let mut layer = random_layer(6, 4, 4, 2, false);
        let before = layer.clone();
        let mut state = AltLoraState::new(&layer);
        let cfg = TrainConfig {
            eta: 0.1,
            gamma: 0.5,
            order: UpdateOrder::AFirst,
            ..TrainConfig::default()
        };
        let g = Matrix::zeros(4, 4);
        altlora_step(&mut layer, &mut state, &g, &cfg).unwrap();
        assert!(layer.a().rel_err(&before.a().scale(0.95)) < 1e-15);
        assert_eq!(layer.b(), before.b());
        altlora_step(&mut layer, &mut state, &g, &cfg).unwrap();
        assert!(layer.b().rel_err(&before.b().scale(0.95)) < 1e-15);
        assert_eq!(layer.w0(), before.w0());
    }

    #[test]
    fn phases_alternate() {
        let layer = random_layer(1, 3, 3, 1, false);
        let mut state = AltLoraState::new(&layer);
        assert_eq!(state.next_phase(UpdateOrder::AFirst), Phase::A);
        assert_eq!(state.next_phase(UpdateOrder::BFirst), Phase::B);
        state.t = 1;
        assert_eq!(state.next_phase(UpdateOrder::AFirst), Phase::B);
        assert_eq!(state.next_phase(UpdateOrder::BFirst), Phase::A);
        assert_eq!(state.next_phase(UpdateOrder::Joint), Phase::Both);
    }

    #[test]
    fn sign_limit_of_plus_variant() {
        let mut layer = random_layer(2, 5, 4, 2, false);
        let mut state = AltLoraState::with_second_moments(&layer);
        let cfg = TrainConfig {
            eta: 1e-3,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-12,
            order: UpdateOrder::AFirst,
            ..TrainConfig::default()
        };
        let g = SeededRng::new(8).gaussian_matrix(5, 4, 1.0);
        let before = layer.a().clone();
        altlora_plus_step(&mut layer, &mut state, &g, &cfg).unwrap();
        let delta = layer.a().sub(&before).unwrap();
        for &v in delta.as_slice() {
            assert!((v.abs() - 1e-3).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn large_eps_reduces_to_scaled_first_moment() {
        let mut layer = random_layer(3, 5, 4, 2, false);
        let mut plain = layer.clone();
        let mut state = AltLoraState::with_second_moments(&layer);
        let mut plain_state = AltLoraState::new(&plain);
        let eps = 1e6;
        let cfg = TrainConfig {
            eta: 1.0,
            eps,
            order: UpdateOrder::AFirst,
            bias_correction: false,
            ..TrainConfig::default()
        };
        let g = SeededRng::new(9).gaussian_matrix(5, 4, 1.0);
        altlora_plus_step(&mut layer, &mut state, &g, &cfg).unwrap();
        let plain_cfg = TrainConfig { eta: 1.0 / eps, ..cfg.clone() };
        altlora_step(&mut plain, &mut plain_state, &g, &plain_cfg).unwrap();
        assert!(layer.a().rel_err(plain.a()) < 1e-9);
    }
}
