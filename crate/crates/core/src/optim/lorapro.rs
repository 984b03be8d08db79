use crate::adapter::LoraLayer;
use crate::error::{Error, Result};
use crate::matcore::{damped_gram_inverse, Matrix, Side};

/// LoRA-Pro's adjusted factor gradients for a fixed ancillary `r×r` matrix `X`:
///
/// ```text
/// gA = (1/s)(BᵀB)⁻¹BᵀG + XA
/// gB = (1/s)[I − B(BᵀB)⁻¹Bᵀ]GAᵀ(AAᵀ)⁻¹ − BX
/// ```
///
/// with both Gram inverses damped by `lambda`. Used only as a baseline; the
/// projector `I − B(BᵀB)⁻¹Bᵀ` is applied to `GAᵀ(AAᵀ)⁻¹` without forming it.
pub fn lorapro_equiv_grad(
    g: &Matrix,
    layer: &LoraLayer,
    x: &Matrix,
    lambda: f64,
) -> Result<(Matrix, Matrix)> {
    let r = layer.rank();
    if g.shape() != layer.dims() {
        return Err(Error::shape("lorapro_equiv_grad", g.shape(), layer.dims()));
    }
    if x.shape() != (r, r) {
        return Err(Error::shape("lorapro ancillary", x.shape(), (r, r)));
    }
    let (a, b) = (layer.a(), layer.b());
    let inv_s = 1.0 / layer.scale();
    let gram_b_inv = damped_gram_inverse(b, Side::Left, lambda)?;
    let gram_a_inv = damped_gram_inverse(a, Side::Right, lambda)?;

    let bt_g = b.t_matmul(g)?;
    let mut ga = gram_b_inv.matmul(&bt_g)?.scale(inv_s);
    ga.axpy(1.0, &x.matmul(a)?)?;

    let right = g.matmul_t(a)?.matmul(&gram_a_inv)?;
    let coeffs = gram_b_inv.matmul(&b.t_matmul(&right)?)?;
    let mut gb = right.sub(&b.matmul(&coeffs)?)?.scale(inv_s);
    gb.axpy(-1.0, &b.matmul(x)?)?;
    Ok((ga, gb))
}

/// The merged-weight change direction `s·B·gA + s·gB·A` of a LoRA-Pro pair.
pub fn equivalent_gradient(layer: &LoraLayer, ga: &Matrix, gb: &Matrix) -> Result<Matrix> {
    let s = layer.scale();
    let mut out = layer.b().matmul(ga)?.scale(s);
    out.axpy(s, &gb.matmul(layer.a())?)?;
    Ok(out)
}
