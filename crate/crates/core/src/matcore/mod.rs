//! Dense matrix kernels sized for adapter factors: products, norms, damped
//! Gram inverses, subspace projectors and seeded random generation.
//!
//! Everything is `f64`. Functions are pure; a [`Matrix`] is a plain value.

mod linalg;
mod matrix;
mod random;

pub use linalg::{
    cholesky, damped_gram_inverse, gram, inverse, jacobi_svd, orthonormal_columns, projector,
    spd_inverse, Side, Space, Svd, PIVOT_TOLERANCE,
};
pub use matrix::Matrix;
pub use random::{gauge_sample, SeededRng};

/// Library-wide default ridge damping for Gram inverses.
pub const DEFAULT_LAMBDA: f64 = 1e-6;
