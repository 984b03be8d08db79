//! Seeded random generation.
//!
//! All randomness flows through [`SeededRng`], a ChaCha8 stream
//! (`rand_chacha::ChaCha8Rng`) seeded from a `u64` via `seed_from_u64`.
//! Uniform doubles take the top 53 bits of each `next_u64`; Gaussian samples
//! use the Box–Muller transform on that stream. ChaCha8 output is specified
//! bit-for-bit, so runs reproduce across platforms.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::linalg::orthonormal_columns;
use super::matrix::Matrix;

pub struct SeededRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller; the second variate of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.normal())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform_range(-bound, bound))
    }

    /// Haar-ish random orthogonal `n×n` matrix from QR of a Gaussian matrix.
    pub fn orthogonal(&mut self, n: usize) -> Matrix {
        self.orthonormal_columns(n, n)
    }

    /// `rows×cols` matrix with orthonormal columns (`cols ≤ rows`).
    pub fn orthonormal_columns(&mut self, rows: usize, cols: usize) -> Matrix {
        loop {
            let g = self.gaussian_matrix(rows, cols, 1.0);
            // A Gaussian draw is rank deficient with probability zero; retry anyway.
            if let Ok(q) = orthonormal_columns(&g) {
                return q;
            }
        }
    }
}

/// Random invertible `r×r` gauge `Q diag(d) Q'ᵀ` with condition number at
/// most `cond_max`: singular values are log-uniform in
/// `[1/√cond_max, √cond_max]`. Deterministic per seed.
pub fn gauge_sample(r: usize, cond_max: f64, seed: u64) -> Matrix {
    assert!(r > 0, "gauge dimension must be positive");
    assert!(cond_max >= 1.0, "cond_max must be at least 1");
    let mut rng = SeededRng::new(seed);
    let q_left = rng.orthogonal(r);
    let q_right = rng.orthogonal(r);
    let half_log = 0.5 * cond_max.ln();
    let diag: Vec<f64> = (0..r)
        .map(|_| rng.uniform_range(-half_log, half_log).exp())
        .collect();
    let scaled = Matrix::from_fn(r, r, |i, j| q_left[(i, j)] * diag[j]);
    scaled.matmul_t(&q_right).expect("square factors conform")
}
