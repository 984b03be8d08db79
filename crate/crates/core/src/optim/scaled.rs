//! Closed-form gradient approximations and momentum realignment.
//!
//! The scaled gradients are the least-squares solutions of
//! `min_Z ‖s·B·Z − G‖_F` (for `A`) and `min_Z ‖s·Z·A − G‖_F` (for `B`),
//! written in terms of the ordinary LoRA gradients. The realignment maps a
//! stored moment into the coordinates of the updated opposite factor so the
//! merged-weight direction it encodes is preserved in the least-squares sense.

use crate::error::{Error, Result};
use crate::matcore::{damped_gram_inverse, Matrix, Side};

/// `(1/s²)·(BᵀB + λI)⁻¹·∇_A L`.
pub fn scaled_grad_a(grad_a: &Matrix, b: &Matrix, s: f64, lambda: f64) -> Result<Matrix> {
    if grad_a.rows() != b.cols() {
        return Err(Error::shape("scaled_grad_a", grad_a.shape(), b.shape()));
    }
    let inv = damped_gram_inverse(b, Side::Left, lambda)?;
    Ok(inv.matmul(grad_a)?.scale(1.0 / (s * s)))
}

/// `(1/s²)·∇_B L·(AAᵀ + λI)⁻¹`, with `A` the already-updated factor.
pub fn scaled_grad_b(grad_b: &Matrix, a: &Matrix, s: f64, lambda: f64) -> Result<Matrix> {
    if grad_b.cols() != a.rows() {
        return Err(Error::shape("scaled_grad_b", grad_b.shape(), a.shape()));
    }
    let inv = damped_gram_inverse(a, Side::Right, lambda)?;
    Ok(grad_b.matmul(&inv)?.scale(1.0 / (s * s)))
}

/// `M_B·A_old·A_newᵀ·(A_new·A_newᵀ + λI)⁻¹`.
pub fn align_momentum_b(mb: &Matrix, a_old: &Matrix, a_new: &Matrix, lambda: f64) -> Result<Matrix> {
    if a_old.shape() != a_new.shape() {
        return Err(Error::shape("align_momentum_b", a_old.shape(), a_new.shape()));
    }
    if mb.cols() != a_old.rows() {
        return Err(Error::shape("align_momentum_b", mb.shape(), a_old.shape()));
    }
    let cross = a_old.matmul_t(a_new)?;
    let inv = damped_gram_inverse(a_new, Side::Right, lambda)?;
    mb.matmul(&cross)?.matmul(&inv)
}

/// `(B_newᵀ·B_new + λI)⁻¹·B_newᵀ·B_old·M_A`.
pub fn align_momentum_a(ma: &Matrix, b_old: &Matrix, b_new: &Matrix, lambda: f64) -> Result<Matrix> {
    if b_old.shape() != b_new.shape() {
        return Err(Error::shape("align_momentum_a", b_old.shape(), b_new.shape()));
    }
    if ma.rows() != b_old.cols() {
        return Err(Error::shape("align_momentum_a", ma.shape(), b_old.shape()));
    }
    let cross = b_new.t_matmul(b_old)?;
    let inv = damped_gram_inverse(b_new, Side::Left, lambda)?;
    inv.matmul(&cross)?.matmul(ma)
}
