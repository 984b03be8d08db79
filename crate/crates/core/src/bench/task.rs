use super::spec::{ExperimentSpec, TaskKind};
use crate::adapter::{LoraLayer, ToyModel};
use crate::error::{Error, Result};
use crate::matcore::{cholesky, Matrix, SeededRng};

/// A generated problem: the student model plus a fixed full batch.
#[derive(Clone, Debug)]
pub struct Task {
    pub model: ToyModel,
    pub x: Matrix,
    pub y: Matrix,
    /// The teacher's adapted-layer weight `W0 + Δ*`.
    pub teacher: Matrix,
    /// The low-rank residual `Δ*`.
    pub teacher_delta: Matrix,
}

impl Task {
    /// `‖W − W*‖_F / ‖W*‖_F` for the student's current merged weight.
    pub fn weight_error(&self) -> f64 {
        self.model.layer.merged_weight().rel_err(&self.teacher)
    }
}

pub fn generate_task(spec: &ExperimentSpec) -> Result<Task> {
    match spec.task {
        TaskKind::LowRankFactorization => gen_lowrank_task(spec),
        TaskKind::TwoLayerRelu => gen_relu_task(spec),
    }
}

/// `n` values log-spaced from `hi` down to `hi/kappa`.
pub fn log_spaced(hi: f64, kappa: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    (0..n)
        .map(|i| hi * kappa.powf(-(i as f64) / (n - 1) as f64))
        .collect()
}

/// `U·diag(σ)·Vᵀ` with random orthonormal `U` (`k×r`) and `V` (`d×r`).
fn low_rank_residual(rng: &mut SeededRng, k: usize, d: usize, sigma: &[f64]) -> Matrix {
    let r = sigma.len();
    let u = rng.orthonormal_columns(k, r);
    let v = rng.orthonormal_columns(d, r);
    let us = Matrix::from_fn(k, r, |i, j| u[(i, j)] * sigma[j]);
    us.matmul_t(&v).expect("rank dimensions agree")
}

/// Linear regression toward `W* = W0 + Δ*` with `rank(Δ*) = r*` and its
/// singular values log-spaced over `[σ_max/κ, σ_max]`. Inputs are standard
/// Gaussian `d×m`; targets are `W*·X`.
pub fn gen_lowrank_task(spec: &ExperimentSpec) -> Result<Task> {
    spec.validate()?;
    if spec.task != TaskKind::LowRankFactorization {
        return Err(Error::InvalidSpec("expected a low_rank_factorization task".into()));
    }
    let (k, d) = (spec.k, spec.d);
    let mut rng = SeededRng::new(spec.seed);
    let w0 = rng.gaussian_matrix(k, d, 1.0 / (d as f64).sqrt());
    let kappa = if spec.kappa_source().teacher() { spec.kappa } else { 1.0 };
    let sigma = log_spaced(spec.teacher_scale, kappa, spec.teacher_rank);
    let delta = low_rank_residual(&mut rng, k, d, &sigma);
    let teacher = w0.add(&delta)?;

    let m = spec.samples();
    let x = if spec.kappa_source().inputs() {
        shaped_inputs(&mut rng, d, m, spec.kappa)?
    } else {
        rng.gaussian_matrix(d, m, 1.0)
    };
    let y = teacher.matmul(&x)?;

    let layer = LoraLayer::init(w0, spec.r, spec.alpha, spec.init_a, spec.init_b, &mut rng)?;
    Ok(Task {
        model: ToyModel::linear(layer),
        x,
        y,
        teacher,
        teacher_delta: delta,
    })
}

/// Teacher–student two-layer ReLU regression. Student and teacher share the
/// frozen first-layer base `W0` (`width×d`) and the frozen head; the teacher
/// adds a rank-`r*` residual to the first layer. Inputs are whitened Gaussian
/// samples reshaped so the sample covariance has eigenvalues spanning
/// `[1/κ, 1]` when the input knob is on.
pub fn gen_relu_task(spec: &ExperimentSpec) -> Result<Task> {
    spec.validate()?;
    if spec.task != TaskKind::TwoLayerRelu {
        return Err(Error::InvalidSpec("expected a two_layer_relu task".into()));
    }
    let (n, d, out) = (spec.width, spec.d, spec.k);
    let mut rng = SeededRng::new(spec.seed);
    let w0 = rng.gaussian_matrix(n, d, 1.0 / (d as f64).sqrt());
    let head = rng.gaussian_matrix(out, n, 1.0 / (n as f64).sqrt());
    let kappa = if spec.kappa_source().teacher() { spec.kappa } else { 1.0 };
    let sigma = log_spaced(spec.teacher_scale, kappa, spec.teacher_rank);
    let delta = low_rank_residual(&mut rng, n, d, &sigma);
    let teacher = w0.add(&delta)?;

    let m = spec.samples();
    let input_kappa = if spec.kappa_source().inputs() { spec.kappa } else { 1.0 };
    let x = shaped_inputs(&mut rng, d, m, input_kappa)?;
    let teacher_model = ToyModel::two_layer_relu(
        LoraLayer::new(
            teacher.clone(),
            Matrix::zeros(1, d),
            Matrix::zeros(n, 1),
            1.0,
        )?,
        head.clone(),
    )?;
    let (y, _) = teacher_model.forward(&x)?;

    let layer = LoraLayer::init(w0, spec.r, spec.alpha, spec.init_a, spec.init_b, &mut rng)?;
    Ok(Task {
        model: ToyModel::two_layer_relu(layer, head)?,
        x,
        y,
        teacher,
        teacher_delta: delta,
    })
}

/// `d×m` inputs with sample covariance `(1/m)XXᵀ = Q·diag(c)·Qᵀ`, where `c`
/// is log-spaced over `[1/κ, 1]`. Requires `m ≥ d`.
fn shaped_inputs(rng: &mut SeededRng, d: usize, m: usize, kappa: f64) -> Result<Matrix> {
    if m < d {
        return Err(Error::InvalidSpec(format!(
            "need at least d = {d} samples to whiten inputs, got {m}"
        )));
    }
    let z = rng.gaussian_matrix(d, m, 1.0);
    let cov = z.matmul_t(&z)?.scale(1.0 / m as f64);
    let l = cholesky(&cov)?;
    // Forward-substitute L·W = Z so that (1/m)·W·Wᵀ = I.
    let mut white = Matrix::zeros(d, m);
    for col in 0..m {
        for i in 0..d {
            let mut v = z[(i, col)];
            for p in 0..i {
                v -= l[(i, p)] * white[(p, col)];
            }
            white[(i, col)] = v / l[(i, i)];
        }
    }
    let q = rng.orthogonal(d);
    let scales: Vec<f64> = log_spaced(1.0, kappa, d).into_iter().map(f64::sqrt).collect();
    let qs = Matrix::from_fn(d, d, |i, j| q[(i, j)] * scales[j]);
    qs.matmul(&white)
}
