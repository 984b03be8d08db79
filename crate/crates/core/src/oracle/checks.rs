//! The named verification suite behind `altlora verify`.
//!
//! Every check draws its instances from a seeded generator and reports the
//! worst deviation it saw against a fixed tolerance. Library errors raised
//! while building or running an instance are returned as `Err`; a check that
//! merely fails its tolerance is reported with `passed = false`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    decompose_pair_step, lstsq_oracle, projector_gauge_check, trajectory_invariance_check,
    InvarianceTask, LstsqObjective, PROJECTOR_GAUGE_TOL, TRAJECTORY_TOL,
};
use crate::adapter::{lora_grads, InitPolicy, LoraLayer, ToyModel};
use crate::bench::{run_experiment, state_accounting, ExperimentSpec};
use crate::error::Result;
use crate::matcore::{gauge_sample, inverse, Matrix, SeededRng};
use crate::optim::{
    align_momentum_a, align_momentum_b, altlora_step, equivalent_gradient, lorapro_equiv_grad,
    scaled_grad_a, scaled_grad_b, AltLoraState, Optimizer, OptimizerKind, TrainConfig,
    UpdateOrder,
};

/// Signature shared by [`scaled_grad_a`] and [`scaled_grad_b`].
pub type ScaledGradFn = fn(&Matrix, &Matrix, f64, f64) -> Result<Matrix>;

/// Whether the tolerance bounds the deviation from above or from below.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Upper,
    Lower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub instances: usize,
    /// Worst case over instances: the largest deviation for an upper bound,
    /// the smallest for a lower bound.
    pub max_deviation: f64,
    pub tolerance: f64,
    pub bound: Bound,
}

impl CheckOutcome {
    fn upper(instances: usize, deviations: impl IntoIterator<Item = f64>, tolerance: f64) -> Self {
        let max_deviation = deviations.into_iter().fold(0.0, nan_max);
        Self {
            instances,
            max_deviation,
            tolerance,
            bound: Bound::Upper,
        }
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::Upper => self.max_deviation <= self.tolerance,
            Bound::Lower => self.max_deviation > self.tolerance,
        }
    }
}

fn nan_max(acc: f64, v: f64) -> f64 {
    if v.is_nan() || acc.is_nan() {
        f64::NAN
    } else {
        acc.max(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub failures: usize,
}

type CheckFn = fn(u64) -> Result<CheckOutcome>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("scaled_grad_a_oracle", |seed| scaled_grad_a_check(scaled_grad_a, 200, seed)),
    ("scaled_grad_b_oracle", |seed| scaled_grad_b_check(scaled_grad_b, 200, seed)),
    ("align_momentum_a_oracle", align_momentum_a_check),
    ("align_momentum_b_oracle", align_momentum_b_check),
    ("pair_step_residual", pair_step_residual_check),
    ("joint_cross_term", joint_cross_term_check),
    ("eta_order_slopes", eta_order_slopes_check),
    ("projector_gauge", projector_gauge_suite),
    ("trajectory_invariance_altlora", trajectory_altlora_check),
    ("trajectory_invariance_lora_adam_control", trajectory_adam_control_check),
    ("lorapro_x_independence", lorapro_x_check),
    ("gradient_fd_linear", |seed| gradient_fd_check(false, seed)),
    ("gradient_fd_relu", |seed| gradient_fd_check(true, seed)),
    ("b_zero_stall", b_zero_stall_check),
    ("state_accounting_bound", state_accounting_check),
    ("run_determinism", determinism_check),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(name, _)| *name).collect()
}

/// Runs every check whose name satisfies `select`, in registry order.
pub fn run_checks(select: impl Fn(&str) -> bool, seed: u64) -> Result<CheckReport> {
    let mut checks = Vec::new();
    for (name, check) in CHECKS.iter().filter(|(name, _)| select(name)) {
        let start = Instant::now();
        let outcome = check(seed)?;
        checks.push(CheckResult {
            name: name.to_string(),
            instances: outcome.instances,
            max_deviation: outcome.max_deviation,
            tolerance: outcome.tolerance,
            bound: outcome.bound,
            passed: outcome.passed(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let failures = checks.iter().filter(|c| !c.passed).count();
    Ok(CheckReport {
        seed,
        checks,
        failures,
    })
}

fn pick(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + ((rng.uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

/// Random `(k, d, r, s)` with `r ≤ 8`, `r ≤ k, d ≤ 64`.
fn random_dims(rng: &mut SeededRng) -> (usize, usize, usize, f64) {
    let r = pick(rng, 1, 8);
    let k = pick(rng, r, 64);
    let d = pick(rng, r, 64);
    let s = rng.uniform_range(0.25, 4.0);
    (k, d, r, s)
}

fn random_layer(rng: &mut SeededRng, k: usize, d: usize, r: usize, s: f64) -> Result<LoraLayer> {
    LoraLayer::new(
        rng.gaussian_matrix(k, d, 1.0),
        rng.gaussian_matrix(r, d, 1.0),
        rng.gaussian_matrix(k, r, 1.0),
        s * r as f64,
    )
}

/// `scaled(s·BᵀG, B, s, 0)` against `argmin_Z ‖s·B·Z − G‖_F`.
pub fn scaled_grad_a_check(scaled: ScaledGradFn, instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0xA1);
    let mut devs = Vec::with_capacity(instances);
    for _ in 0..instances {
        let (k, d, r, s) = random_dims(&mut rng);
        let b = rng.gaussian_matrix(k, r, 1.0);
        let g = rng.gaussian_matrix(k, d, 1.0);
        let grad_a = b.t_matmul(&g)?.scale(s);
        let got = scaled(&grad_a, &b, s, 0.0)?;
        let want = lstsq_oracle(LstsqObjective::LeftFactor { s, b: &b, g: &g })?;
        devs.push(got.rel_err(&want));
    }
    Ok(CheckOutcome::upper(instances, devs, 1e-9))
}

/// `scaled(s·GAᵀ, A, s, 0)` against `argmin_Z ‖s·Z·A − G‖_F`.
pub fn scaled_grad_b_check(scaled: ScaledGradFn, instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0xB1);
    let mut devs = Vec::with_capacity(instances);
    for _ in 0..instances {
        let (k, d, r, s) = random_dims(&mut rng);
        let a = rng.gaussian_matrix(r, d, 1.0);
        let g = rng.gaussian_matrix(k, d, 1.0);
        let grad_b = g.matmul_t(&a)?.scale(s);
        let got = scaled(&grad_b, &a, s, 0.0)?;
        let want = lstsq_oracle(LstsqObjective::RightFactor { s, a: &a, g: &g })?;
        devs.push(got.rel_err(&want));
    }
    Ok(CheckOutcome::upper(instances, devs, 1e-9))
}

fn align_momentum_a_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0xA2);
    let mut devs = Vec::new();
    for _ in 0..200 {
        let (k, d, r, _) = random_dims(&mut rng);
        let ma = rng.gaussian_matrix(r, d, 1.0);
        let b_old = rng.gaussian_matrix(k, r, 1.0);
        let b_new = rng.gaussian_matrix(k, r, 1.0);
        let got = align_momentum_a(&ma, &b_old, &b_new, 0.0)?;
        let want = lstsq_oracle(LstsqObjective::MomentumA {
            ma: &ma,
            b_old: &b_old,
            b_new: &b_new,
        })?;
        devs.push(got.rel_err(&want));
    }
    Ok(CheckOutcome::upper(200, devs, 1e-9))
}

fn align_momentum_b_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0xB2);
    let mut devs = Vec::new();
    for _ in 0..200 {
        let (k, d, r, _) = random_dims(&mut rng);
        let mb = rng.gaussian_matrix(k, r, 1.0);
        let a_old = rng.gaussian_matrix(r, d, 1.0);
        let a_new = rng.gaussian_matrix(r, d, 1.0);
        let got = align_momentum_b(&mb, &a_old, &a_new, 0.0)?;
        let want = lstsq_oracle(LstsqObjective::MomentumB {
            mb: &mb,
            a_old: &a_old,
            a_new: &a_new,
        })?;
        devs.push(got.rel_err(&want));
    }
    Ok(CheckOutcome::upper(200, devs, 1e-9))
}

fn undamped(eta: f64) -> TrainConfig {
    TrainConfig {
        eta,
        lambda: 0.0,
        ..TrainConfig::default()
    }
}

fn pair_step_residual_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0xC1);
    let mut devs = Vec::new();
    for _ in 0..100 {
        let (k, d, r, s) = random_dims(&mut rng);
        let layer = random_layer(&mut rng, k, d, r, s)?;
        let g_t = rng.gaussian_matrix(k, d, 1.0);
        let g_half = rng.gaussian_matrix(k, d, 1.0);
        let report = decompose_pair_step(&layer, &g_t, &g_half, &undamped(1e-2))?;
        devs.push(report.relative_residual());
    }
    Ok(CheckOutcome::upper(100, devs, 1e-10))
}

fn joint_cross_term_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0xC2);
    let mut devs = Vec::new();
    for _ in 0..100 {
        let (k, d, r, s) = random_dims(&mut rng);
        let layer = random_layer(&mut rng, k, d, r, s)?;
        let g = rng.gaussian_matrix(k, d, 1.0);
        let report = decompose_pair_step(&layer, &g, &g, &undamped(1.0))?;
        let dev = if report.cross_term.is_zero() {
            f64::INFINITY
        } else {
            report.cross_term_deviation()
        };
        devs.push(dev);
    }
    Ok(CheckOutcome::upper(100, devs, 1e-10))
}

fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// First-order projected terms scale like `η`, the joint cross term like `η²`.
fn eta_order_slopes_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0xC3);
    let etas = [1e-2, 1e-3, 1e-4];
    let mut devs = Vec::new();
    for _ in 0..20 {
        let (k, d, r, s) = random_dims(&mut rng);
        let layer = random_layer(&mut rng, k, d, r, s)?;
        let g = rng.gaussian_matrix(k, d, 1.0);
        let mut first = Vec::new();
        let mut cross = Vec::new();
        for &eta in &etas {
            let report = decompose_pair_step(&layer, &g, &g, &undamped(eta))?;
            first.push(report.projected_col_term.add(&report.projected_row_term)?.frobenius_norm());
            cross.push(report.cross_term.frobenius_norm());
        }
        devs.push((log_slope(&etas, &first) - 1.0).abs());
        devs.push((log_slope(&etas, &cross) - 2.0).abs());
    }
    Ok(CheckOutcome::upper(20, devs, 0.01))
}

fn projector_gauge_suite(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0xD1);
    let mut devs = Vec::new();
    for i in 0..200u64 {
        let (k, d, r, _) = random_dims(&mut rng);
        let a1 = rng.gaussian_matrix(r, d, 1.0);
        let b1 = rng.gaussian_matrix(k, r, 1.0);
        let gauge = gauge_sample(r, 10.0, seed.wrapping_add(i));
        let a2 = inverse(&gauge)?.matmul(&a1)?;
        let b2 = b1.matmul(&gauge)?;
        devs.push(projector_gauge_check(&a1, &b1, &a2, &b2, PROJECTOR_GAUGE_TOL)?.max_deviation);
    }
    Ok(CheckOutcome::upper(200, devs, PROJECTOR_GAUGE_TOL))
}

/// Linear regression toward a random target with fully random factors, so
/// undamped Gram matrices stay invertible along the trajectory.
pub(crate) fn invariance_task(rng: &mut SeededRng) -> Result<InvarianceTask> {
    let (k, d, r, m) = (8, 10, 3, 40);
    let layer = LoraLayer::new(
        rng.gaussian_matrix(k, d, 1.0 / (d as f64).sqrt()),
        rng.gaussian_matrix(r, d, 1.0 / (d as f64).sqrt()),
        rng.gaussian_matrix(k, r, 1.0 / (r as f64).sqrt()),
        r as f64,
    )?;
    let x = rng.gaussian_matrix(d, m, 1.0);
    let target = rng.gaussian_matrix(k, d, 1.0 / (d as f64).sqrt());
    let y = target.matmul(&x)?;
    Ok(InvarianceTask {
        model: ToyModel::linear(layer),
        x,
        y,
    })
}

fn trajectory_devs(kind: OptimizerKind, betas: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rng = SeededRng::new(seed ^ 0xE1);
    let mut devs = Vec::new();
    for i in 0..20u64 {
        let task = invariance_task(&mut rng)?;
        let gauge = gauge_sample(3, 10.0, seed.wrapping_add(1000 + i));
        for &beta1 in betas {
            let cfg = TrainConfig {
                eta: 0.05,
                beta1,
                lambda: 0.0,
                ..TrainConfig::default()
            };
            let report = trajectory_invariance_check(&task, kind, &cfg, &gauge, 50, TRAJECTORY_TOL, None)?;
            devs.push(report.max_deviation);
        }
    }
    Ok(devs)
}

fn trajectory_altlora_check(seed: u64) -> Result<CheckOutcome> {
    let devs = trajectory_devs(OptimizerKind::AltLora, &[0.0, 0.9], seed)?;
    Ok(CheckOutcome::upper(devs.len(), devs, TRAJECTORY_TOL))
}

/// Elementwise-adaptive LoRA-Adam must visibly break gauge invariance.
fn trajectory_adam_control_check(seed: u64) -> Result<CheckOutcome> {
    let devs = trajectory_devs(OptimizerKind::LoraAdam, &[0.9], seed)?;
    let min = devs.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(CheckOutcome {
        instances: devs.len(),
        max_deviation: min,
        tolerance: 1e-3,
        bound: Bound::Lower,
    })
}

fn lorapro_x_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0xF1);
    let mut devs = Vec::new();
    for _ in 0..50 {
        let (k, d, r, s) = random_dims(&mut rng);
        let layer = random_layer(&mut rng, k, d, r, s)?;
        let g = rng.gaussian_matrix(k, d, 1.0);
        let x1 = rng.gaussian_matrix(r, r, 1.0);
        let x2 = rng.gaussian_matrix(r, r, 1.0);
        let (ga1, gb1) = lorapro_equiv_grad(&g, &layer, &x1, 0.0)?;
        let (ga2, gb2) = lorapro_equiv_grad(&g, &layer, &x2, 0.0)?;
        let e1 = equivalent_gradient(&layer, &ga1, &gb1)?;
        let e2 = equivalent_gradient(&layer, &ga2, &gb2)?;
        devs.push(e2.rel_err(&e1));
    }
    Ok(CheckOutcome::upper(50, devs, 1e-10))
}

/// Central differences of the loss against `full_gradient` (perturbing `W0`,
/// which moves the merged weight entrywise) and against `lora_grads`.
fn gradient_fd_check(relu: bool, seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ if relu { 0x52 } else { 0x51 });
    let h = 1e-5;
    let mut devs = Vec::new();
    for _ in 0..5 {
        let (k, d, r, m, width) = (4, 6, 2, 10, 12);
        let rows = if relu { width } else { k };
        let layer = LoraLayer::new(
            rng.gaussian_matrix(rows, d, 0.5),
            rng.gaussian_matrix(r, d, 0.5),
            rng.gaussian_matrix(rows, r, 0.5),
            2.0,
        )?;
        let head = rng.gaussian_matrix(k, width, 0.5);
        let build = |layer: LoraLayer| -> Result<ToyModel> {
            if relu {
                ToyModel::two_layer_relu(layer, head.clone())
            } else {
                Ok(ToyModel::linear(layer))
            }
        };
        let x = rng.gaussian_matrix(d, m, 1.0);
        let y = rng.gaussian_matrix(k, m, 1.0);
        let model = build(layer.clone())?;
        let (_, g) = model.loss_and_gradient(&x, &y)?;
        let (grad_a, grad_b) = lora_grads(&g.g, &layer)?;

        let fd = |shape: (usize, usize), perturb: &dyn Fn(usize, usize, f64) -> Result<LoraLayer>| {
            let mut out = Matrix::zeros(shape.0, shape.1);
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let plus = build(perturb(i, j, h)?)?.loss(&x, &y)?;
                    let minus = build(perturb(i, j, -h)?)?.loss(&x, &y)?;
                    out.as_mut_slice()[i * shape.1 + j] = (plus - minus) / (2.0 * h);
                }
            }
            Ok::<Matrix, crate::Error>(out)
        };
        let bump = |m: &Matrix, i: usize, j: usize, e: f64| {
            let mut m = m.clone();
            let cols = m.cols();
            m.as_mut_slice()[i * cols + j] += e;
            m
        };
        let fd_w = fd(layer.w0().shape(), &|i, j, e| {
            LoraLayer::new(bump(layer.w0(), i, j, e), layer.a().clone(), layer.b().clone(), layer.alpha())
        })?;
        let fd_a = fd(layer.a().shape(), &|i, j, e| layer.with_factors(bump(layer.a(), i, j, e), layer.b().clone()))?;
        let fd_b = fd(layer.b().shape(), &|i, j, e| layer.with_factors(layer.a().clone(), bump(layer.b(), i, j, e)))?;
        devs.push(fd_w.rel_err(&g.g));
        devs.push(fd_a.rel_err(&grad_a));
        devs.push(fd_b.rel_err(&grad_b));
    }
    Ok(CheckOutcome::upper(5, devs, 1e-6))
}

/// From `B = 0` the A-side scaled gradient is exactly zero, so an A-first
/// step without weight decay leaves `A` bit-identical.
fn b_zero_stall_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0x61);
    let mut devs = Vec::new();
    for _ in 0..20 {
        let (k, d, r, s) = random_dims(&mut rng);
        let layer = LoraLayer::init(
            rng.gaussian_matrix(k, d, 1.0),
            r,
            s * r as f64,
            InitPolicy::Kaiming,
            InitPolicy::Zero,
            &mut rng,
        )?;
        let g = rng.gaussian_matrix(k, d, 1.0);
        let (grad_a, _) = lora_grads(&g, &layer)?;
        let scaled = scaled_grad_a(&grad_a, layer.b(), s, 1e-6)?;
        devs.push(scaled.max_abs());

        let cfg = TrainConfig {
            order: UpdateOrder::AFirst,
            ..TrainConfig::default()
        };
        let mut stepped = layer.clone();
        let mut state = AltLoraState::new(&stepped);
        altlora_step(&mut stepped, &mut state, &g, &cfg)?;
        devs.push(stepped.a().sub(layer.a())?.max_abs());
    }
    Ok(CheckOutcome::upper(20, devs, 0.0))
}

/// Optimizer state per entry of `kr + rd`, both from the accounting tables and
/// from the live buffers of a constructed optimizer.
fn state_accounting_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed ^ 0x71);
    let shapes = [(4096, 4096, 8), (64, 64, 64), (32, 48, 4), (1, 1, 1)];
    let mut devs = Vec::new();
    for &(k, d, r) in &shapes {
        for kind in [OptimizerKind::AltLora, OptimizerKind::AltLoraPlus] {
            let acc = state_accounting(k, d, r, kind);
            devs.push(acc.optimizer_state as f64 / acc.trainable as f64);
            if k * d <= 4096 {
                let layer = LoraLayer::init(
                    Matrix::zeros(k, d),
                    r,
                    r as f64,
                    InitPolicy::Kaiming,
                    InitPolicy::Zero,
                    &mut rng,
                )?;
                let opt = Optimizer::new(kind, TrainConfig::default(), &layer)?;
                devs.push(opt.state_entries() as f64 / acc.trainable as f64);
            }
        }
    }
    let big = state_accounting(4096, 4096, 8, OptimizerKind::AltLora);
    if big.reduction_factor() < 100.0 {
        devs.push(f64::INFINITY);
    }
    Ok(CheckOutcome::upper(shapes.len() * 2, devs, 6.0))
}

fn determinism_check(seed: u64) -> Result<CheckOutcome> {
    let mut devs = Vec::new();
    for kind in [OptimizerKind::AltLora, OptimizerKind::AltLoraPlus, OptimizerKind::LoraAdam] {
        let spec = ExperimentSpec {
            k: 12,
            d: 10,
            r: 3,
            teacher_rank: 3,
            kappa: 10.0,
            seed,
            optimizer: kind,
            train: TrainConfig {
                eta: 0.05,
                steps: 40,
                ..TrainConfig::default()
            },
            ..ExperimentSpec::default()
        };
        let first = run_experiment(&spec)?.to_csv_string()?;
        let second = run_experiment(&spec)?.to_csv_string()?;
        devs.push(if first == second { 0.0 } else { 1.0 });
    }
    Ok(CheckOutcome::upper(3, devs, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names = check_names();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), CHECKS.len());
    }

    #[test]
    fn identity_preconditioner_is_caught() {
        fn mutant(grad: &Matrix, _b: &Matrix, s: f64, _lambda: f64) -> Result<Matrix> {
            Ok(grad.scale(1.0 / (s * s)))
        }
        assert!(!scaled_grad_a_check(mutant, 20, 0).unwrap().passed());
        assert!(scaled_grad_a_check(scaled_grad_a, 20, 0).unwrap().passed());
    }

    #[test]
    fn lower_bound_semantics() {
        let o = CheckOutcome {
            instances: 1,
            max_deviation: 0.5,
            tolerance: 1e-3,
            bound: Bound::Lower,
        };
        assert!(o.passed());
    }
}
