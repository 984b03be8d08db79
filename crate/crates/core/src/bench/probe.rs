//! Width-scaling probe for feature-update magnitudes.
//!
//! For each width `n` a square `n×n` adapted layer starts from the standard
//! initialization (Kaiming `A`, zero `B`). A fixed gradient
//! `G = (1/b)·Δ·Xᵀ` is built from a batch `X` (`n×b`, entries `N(0,1)`) and
//! back-propagated errors `Δ` with entries `N(0,1)/n`, the scale a readout of
//! width `n` produces. The probe input is the first batch column, so its
//! entries are `Θ(1)`. Alternating optimizers take one B-phase and one
//! A-phase, joint optimizers one step, both with the same `G`. The reported
//! magnitude is `‖ΔW·x‖_∞` averaged over seeds, and the slope is the
//! least-squares fit of `log m(n)` against `log n`.

use serde::{Deserialize, Serialize};

use crate::adapter::{InitPolicy, LoraLayer};
use crate::error::{Error, Result};
use crate::matcore::{Matrix, SeededRng};
use crate::optim::{Optimizer, OptimizerKind, TrainConfig};

pub const DEFAULT_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub rank: usize,
    /// `None` means `alpha = rank`, i.e. `s = 1`.
    pub alpha: Option<f64>,
    pub seeds: u64,
    /// Batch size behind `G`; at least `rank` so that `G` has rank `≥ r`.
    pub batch: usize,
    /// Multiplies every singular value of `G`.
    pub gradient_scale: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: None,
            seeds: 8,
            batch: 8,
            gradient_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub optimizer: OptimizerKind,
    pub widths: Vec<usize>,
    pub magnitudes: Vec<f64>,
    /// `None` when some magnitude is zero.
    pub slope: Option<f64>,
}

pub fn width_scaling_probe(
    widths: &[usize],
    kind: OptimizerKind,
    cfg: &TrainConfig,
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    if widths.len() < 4 || widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "widths must be strictly increasing with at least 4 values".into(),
        ));
    }
    if opts.seeds == 0 || opts.batch < opts.rank {
        return Err(Error::InvalidConfig("need seeds > 0 and batch >= rank".into()));
    }
    let mut magnitudes = Vec::with_capacity(widths.len());
    for &n in widths {
        if n < opts.rank {
            return Err(Error::InvalidConfig(format!("width {n} below rank {}", opts.rank)));
        }
        let mut total = 0.0;
        for seed in 0..opts.seeds {
            total += feature_update(n, seed, kind, cfg, opts)?;
        }
        magnitudes.push(total / opts.seeds as f64);
    }
    let slope = if magnitudes.iter().all(|&m| m > 0.0) {
        let xs: Vec<f64> = widths.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = magnitudes.iter().map(|m| m.ln()).collect();
        Some(fit_slope(&xs, &ys))
    } else {
        None
    };
    Ok(ProbeReport {
        optimizer: kind,
        widths: widths.to_vec(),
        magnitudes,
        slope,
    })
}

fn feature_update(
    n: usize,
    seed: u64,
    kind: OptimizerKind,
    cfg: &TrainConfig,
    opts: &ProbeOptions,
) -> Result<f64> {
    let mut rng = SeededRng::new(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ n as u64);
    let b = opts.batch;
    let x = rng.gaussian_matrix(n, b, 1.0);
    let errors = rng.gaussian_matrix(n, b, 1.0 / n as f64);
    let g = errors.matmul_t(&x)?.scale(opts.gradient_scale / b as f64);
    let probe = Matrix::column_vector(&x.column(0));

    let alpha = opts.alpha.unwrap_or(opts.rank as f64);
    let mut layer = LoraLayer::init(
        Matrix::zeros(n, n),
        opts.rank,
        alpha,
        InitPolicy::Kaiming,
        InitPolicy::Zero,
        &mut rng,
    )?;
    let before = features(&layer, &probe)?;
    let mut opt = Optimizer::new(kind, cfg.clone(), &layer)?;
    let steps = if kind.is_alternating() { 2 } else { 1 };
    for _ in 0..steps {
        opt.step(&mut layer, &g)?;
    }
    let after = features(&layer, &probe)?;
    Ok(after.sub(&before)?.max_abs())
}

/// `s·B·(A·x)`, evaluated right to left.
fn features(layer: &LoraLayer, x: &Matrix) -> Result<Matrix> {
    let ax = layer.a().matmul(x)?;
    Ok(layer.b().matmul(&ax)?.scale(layer.scale()))
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
