//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use altlora::adapter::{lora_grads, InitPolicy, LoraLayer, ToyModel};
use altlora::bench::{
    run_experiment, state_accounting, width_scaling_probe, ExperimentSpec, ProbeOptions, TaskKind,
    DEFAULT_WIDTHS,
};
use altlora::matcore::{gauge_sample, inverse, Matrix, SeededRng};
use altlora::optim::{
    align_momentum_a, align_momentum_b, equivalent_gradient, lorapro_equiv_grad, scaled_grad_a,
    scaled_grad_b, OptimizerKind, TrainConfig,
};
use altlora::oracle::{
    decompose_pair_step, lstsq_oracle, projector_gauge_check, trajectory_invariance_check,
    InvarianceTask, LstsqObjective,
};
use altlora::{Error, Result};

struct Verdict {
    passed: bool,
    detail: String,
}

fn pick(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + ((rng.uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

fn dims(rng: &mut SeededRng) -> (usize, usize, usize, f64) {
    let r = pick(rng, 1, 8);
    (pick(rng, r, 64), pick(rng, r, 64), r, rng.uniform_range(0.25, 4.0))
}

fn layer(rng: &mut SeededRng, k: usize, d: usize, r: usize, s: f64) -> Result<LoraLayer> {
    LoraLayer::new(
        rng.gaussian_matrix(k, d, 1.0),
        rng.gaussian_matrix(r, d, 1.0),
        rng.gaussian_matrix(k, r, 1.0),
        s * r as f64,
    )
}

fn undamped(eta: f64) -> TrainConfig {
    TrainConfig {
        eta,
        lambda: 0.0,
        ..TrainConfig::default()
    }
}

fn max(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |a, v| if v.is_nan() { f64::NAN } else { a.max(v) })
}

fn closed_form_optimality() -> Result<Verdict> {
    let mut rng = SeededRng::new(101);
    let (mut err_a, mut err_b) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (k, d, r, s) = dims(&mut rng);
        let b = rng.gaussian_matrix(k, r, 1.0);
        let g = rng.gaussian_matrix(k, d, 1.0);
        let got = scaled_grad_a(&b.t_matmul(&g)?.scale(s), &b, s, 0.0)?;
        let want = lstsq_oracle(LstsqObjective::LeftFactor { s, b: &b, g: &g })?;
        err_a = max([err_a, got.rel_err(&want)]);
    }
    for _ in 0..200 {
        let (k, d, r, s) = dims(&mut rng);
        let a = rng.gaussian_matrix(r, d, 1.0);
        let g = rng.gaussian_matrix(k, d, 1.0);
        let got = scaled_grad_b(&g.matmul_t(&a)?.scale(s), &a, s, 0.0)?;
        let want = lstsq_oracle(LstsqObjective::RightFactor { s, a: &a, g: &g })?;
        err_b = max([err_b, got.rel_err(&want)]);
    }
    Ok(Verdict {
        passed: err_a <= 1e-9 && err_b <= 1e-9,
        detail: format!("200+200 instances, max rel err A {err_a:.2e}, B {err_b:.2e} (tol 1e-9)"),
    })
}

fn momentum_alignment_optimality() -> Result<Verdict> {
    let mut rng = SeededRng::new(102);
    let (mut err_a, mut err_b) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (k, d, r, _) = dims(&mut rng);
        let ma = rng.gaussian_matrix(r, d, 1.0);
        let (b_old, b_new) = (rng.gaussian_matrix(k, r, 1.0), rng.gaussian_matrix(k, r, 1.0));
        let got = align_momentum_a(&ma, &b_old, &b_new, 0.0)?;
        let want = lstsq_oracle(LstsqObjective::MomentumA { ma: &ma, b_old: &b_old, b_new: &b_new })?;
        err_a = max([err_a, got.rel_err(&want)]);
    }
    for _ in 0..200 {
        let (k, d, r, _) = dims(&mut rng);
        let mb = rng.gaussian_matrix(k, r, 1.0);
        let (a_old, a_new) = (rng.gaussian_matrix(r, d, 1.0), rng.gaussian_matrix(r, d, 1.0));
        let got = align_momentum_b(&mb, &a_old, &a_new, 0.0)?;
        let want = lstsq_oracle(LstsqObjective::MomentumB { mb: &mb, a_old: &a_old, a_new: &a_new })?;
        err_b = max([err_b, got.rel_err(&want)]);
    }
    Ok(Verdict {
        passed: err_a <= 1e-9 && err_b <= 1e-9,
        detail: format!("200+200 instances, max rel err A {err_a:.2e}, B {err_b:.2e} (tol 1e-9)"),
    })
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn pair_step_decomposition() -> Result<Verdict> {
    let mut rng = SeededRng::new(103);
    let mut residual = 0.0f64;
    let mut cross = 0.0f64;
    for _ in 0..100 {
        let (k, d, r, s) = dims(&mut rng);
        let l = layer(&mut rng, k, d, r, s)?;
        let (g_t, g_half) = (rng.gaussian_matrix(k, d, 1.0), rng.gaussian_matrix(k, d, 1.0));
        residual = max([residual, decompose_pair_step(&l, &g_t, &g_half, &undamped(1e-2))?.relative_residual()]);
        // At unit step size the cross term is comparable to the first-order
        // terms, so subtracting them does not cancel away its digits.
        let joint = decompose_pair_step(&l, &g_t, &g_t, &undamped(1.0))?;
        let dev = if joint.cross_term.is_zero() { f64::INFINITY } else { joint.cross_term_deviation() };
        cross = max([cross, dev]);
    }
    let etas = [1e-2, 1e-3, 1e-4];
    let mut slope_dev = 0.0f64;
    for _ in 0..20 {
        let (k, d, r, s) = dims(&mut rng);
        let l = layer(&mut rng, k, d, r, s)?;
        let g = rng.gaussian_matrix(k, d, 1.0);
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for &eta in &etas {
            let rep = decompose_pair_step(&l, &g, &g, &undamped(eta))?;
            first.push(rep.projected_col_term.add(&rep.projected_row_term)?.frobenius_norm());
            second.push(rep.cross_term.frobenius_norm());
        }
        slope_dev = max([slope_dev, (slope(&etas, &first) - 1.0).abs(), (slope(&etas, &second) - 2.0).abs()]);
    }
    Ok(Verdict {
        passed: residual <= 1e-10 && cross <= 1e-10 && slope_dev <= 0.01,
        detail: format!(
            "pair residual {residual:.2e} (tol 1e-10), cross term dev {cross:.2e} (tol 1e-10), slope dev {slope_dev:.2e} (tol 0.01)"
        ),
    })
}

fn projector_gauge_invariance() -> Result<Verdict> {
    let mut rng = SeededRng::new(104);
    let mut dev = 0.0f64;
    for i in 0..200 {
        let (k, d, r, _) = dims(&mut rng);
        let a1 = rng.gaussian_matrix(r, d, 1.0);
        let b1 = rng.gaussian_matrix(k, r, 1.0);
        let gauge = gauge_sample(r, 10.0, 5000 + i);
        let a2 = inverse(&gauge)?.matmul(&a1)?;
        let b2 = b1.matmul(&gauge)?;
        dev = max([dev, projector_gauge_check(&a1, &b1, &a2, &b2, 1e-9)?.max_deviation]);
    }
    Ok(Verdict {
        passed: dev < 1e-9,
        detail: format!("200 gauges cond <= 10, max projector deviation {dev:.2e} (tol 1e-9)"),
    })
}

fn invariance_task(rng: &mut SeededRng) -> Result<InvarianceTask> {
    let (k, d, r, m) = (8, 10, 3, 40);
    let sd = 1.0 / (d as f64).sqrt();
    let l = LoraLayer::new(
        rng.gaussian_matrix(k, d, sd),
        rng.gaussian_matrix(r, d, sd),
        rng.gaussian_matrix(k, r, 1.0 / (r as f64).sqrt()),
        r as f64,
    )?;
    let x = rng.gaussian_matrix(d, m, 1.0);
    let y = rng.gaussian_matrix(k, d, sd).matmul(&x)?;
    Ok(InvarianceTask { model: ToyModel::linear(l), x, y })
}

fn trajectory_invariance() -> Result<Verdict> {
    let mut rng = SeededRng::new(105);
    let mut alt = 0.0f64;
    let mut adam = f64::INFINITY;
    for i in 0..20 {
        let task = invariance_task(&mut rng)?;
        let gauge = gauge_sample(3, 10.0, 6000 + i);
        for beta1 in [0.0, 0.9] {
            let cfg = TrainConfig { eta: 0.05, beta1, lambda: 0.0, ..TrainConfig::default() };
            let rep = trajectory_invariance_check(&task, OptimizerKind::AltLora, &cfg, &gauge, 50, 1e-6, None)?;
            alt = max([alt, rep.max_deviation]);
        }
        let cfg = TrainConfig { eta: 0.05, lambda: 0.0, ..TrainConfig::default() };
        let rep = trajectory_invariance_check(&task, OptimizerKind::LoraAdam, &cfg, &gauge, 50, 1e-6, None)?;
        adam = adam.min(rep.max_deviation);
    }
    Ok(Verdict {
        passed: alt <= 1e-6 && adam > 1e-3,
        detail: format!(
            "20 gauges x beta1 {{0, 0.9}}, AltLoRA max dev {alt:.2e} (tol 1e-6); LoRA-Adam min dev {adam:.2e} (must exceed 1e-3)"
        ),
    })
}

fn lorapro_x_independence() -> Result<Verdict> {
    let mut rng = SeededRng::new(106);
    let mut dev = 0.0f64;
    for _ in 0..50 {
        let (k, d, r, s) = dims(&mut rng);
        let l = layer(&mut rng, k, d, r, s)?;
        let g = rng.gaussian_matrix(k, d, 1.0);
        let (x1, x2) = (rng.gaussian_matrix(r, r, 1.0), rng.gaussian_matrix(r, r, 1.0));
        let (ga1, gb1) = lorapro_equiv_grad(&g, &l, &x1, 0.0)?;
        let (ga2, gb2) = lorapro_equiv_grad(&g, &l, &x2, 0.0)?;
        let e1 = equivalent_gradient(&l, &ga1, &gb1)?;
        dev = max([dev, equivalent_gradient(&l, &ga2, &gb2)?.rel_err(&e1)]);
    }
    Ok(Verdict {
        passed: dev <= 1e-10,
        detail: format!("50 X pairs, max rel deviation {dev:.2e} (tol 1e-10)"),
    })
}

fn kappa_spec(optimizer: OptimizerKind, eta: f64, kappa: f64) -> ExperimentSpec {
    ExperimentSpec {
        k: 32,
        d: 32,
        r: 4,
        teacher_rank: 4,
        kappa,
        seed: 1,
        optimizer,
        stop_at_threshold: true,
        train: TrainConfig { eta, steps: 5000, ..TrainConfig::default() },
        ..ExperimentSpec::default()
    }
}

fn condition_number_robustness() -> Result<Verdict> {
    let kappas = [1.0, 10.0, 100.0];
    let steps = |kind, eta| -> Result<Vec<i64>> {
        kappas.iter().map(|&k| Ok(run_experiment(&kappa_spec(kind, eta, k))?.steps_to_threshold)).collect()
    };
    let alt = steps(OptimizerKind::AltLora, 0.5)?;
    let sgd = steps(OptimizerKind::LoraSgd, 0.05)?;
    let ratio = |v: &[i64]| {
        if v.iter().any(|&s| s < 0) {
            f64::INFINITY
        } else {
            *v.iter().max().unwrap() as f64 / (*v.iter().min().unwrap()).max(1) as f64
        }
    };
    let (ra, rs) = (ratio(&alt), ratio(&sgd));
    let monotone = sgd.iter().all(|&s| s >= 0) && sgd.windows(2).all(|w| w[0] < w[1]);
    Ok(Verdict {
        passed: ra < 2.0 && rs >= 5.0 && monotone,
        detail: format!(
            "kappa 1/10/100: AltLoRA(eta 0.5) {alt:?} ratio {ra:.2} (< 2); LoRA-SGD(eta 0.05) {sgd:?} ratio {rs:.2} (>= 5, monotone {monotone})"
        ),
    })
}

fn stable_feature_learning() -> Result<Verdict> {
    let cfg = TrainConfig { eta: 1.0, ..TrainConfig::default() };
    let opts = ProbeOptions::default();
    let alt = width_scaling_probe(&DEFAULT_WIDTHS, OptimizerKind::AltLora, &cfg, &opts)?;
    let sgd = width_scaling_probe(&DEFAULT_WIDTHS, OptimizerKind::LoraSgd, &cfg, &opts)?;
    let slope = alt.slope.unwrap_or(f64::NAN);
    Ok(Verdict {
        passed: (-0.25..=0.25).contains(&slope),
        detail: format!(
            "widths 64..1024, {} seeds: AltLoRA slope {slope:.3} (in [-0.25, 0.25]); LoRA-SGD slope {:.3} (informational)",
            opts.seeds,
            sgd.slope.unwrap_or(f64::NAN)
        ),
    })
}

fn memory_separation() -> Result<Verdict> {
    let shapes = [(4096, 4096, 8), (1024, 4096, 16), (64, 64, 64), (32, 48, 4), (7, 3, 2), (1, 1, 1)];
    let mut bounded = true;
    for &(k, d, r) in &shapes {
        for kind in [OptimizerKind::AltLora, OptimizerKind::AltLoraPlus] {
            let acc = state_accounting(k, d, r, kind);
            bounded &= acc.optimizer_state <= 6 * (k * r + r * d) as u64;
        }
    }
    let alt = state_accounting(4096, 4096, 8, OptimizerKind::AltLora);
    let plus = state_accounting(4096, 4096, 8, OptimizerKind::AltLoraPlus);
    let exact = alt.optimizer_state == 262_144
        && plus.optimizer_state == 393_216
        && plus.full_moment_reference == 33_554_432;
    Ok(Verdict {
        passed: bounded && exact && alt.reduction_factor() >= 100.0,
        detail: format!(
            "state <= 6(kr+rd) on {} shapes: {bounded}; k=d=4096 r=8: AltLoRA {} vs {} ({:.1}x, >= 100x), AltLoRA+ {} vs {} ({:.1}x)",
            shapes.len(),
            alt.optimizer_state,
            alt.full_moment_reference,
            alt.reduction_factor(),
            plus.optimizer_state,
            plus.full_moment_reference,
            plus.reduction_factor()
        ),
    })
}

fn finite_difference(model: &ToyModel, x: &Matrix, y: &Matrix) -> Result<f64> {
    let h = 1e-5;
    let l = &model.layer;
    let (_, g) = model.loss_and_gradient(x, y)?;
    let (grad_a, grad_b) = lora_grads(&g.g, l)?;
    let loss_with = |w0: Matrix, a: Matrix, b: Matrix| -> Result<f64> {
        let mut m = model.clone();
        m.layer = LoraLayer::new(w0, a, b, l.alpha())?;
        m.loss(x, y)
    };
    let bumped = |m: &Matrix, idx: usize, e: f64| {
        let mut m = m.clone();
        m.as_mut_slice()[idx] += e;
        m
    };
    let mut fd_w = Matrix::zeros(l.w0().rows(), l.w0().cols());
    for idx in 0..fd_w.len() {
        let p = loss_with(bumped(l.w0(), idx, h), l.a().clone(), l.b().clone())?;
        let n = loss_with(bumped(l.w0(), idx, -h), l.a().clone(), l.b().clone())?;
        fd_w.as_mut_slice()[idx] = (p - n) / (2.0 * h);
    }
    let mut fd_a = Matrix::zeros(l.a().rows(), l.a().cols());
    for idx in 0..fd_a.len() {
        let p = loss_with(l.w0().clone(), bumped(l.a(), idx, h), l.b().clone())?;
        let n = loss_with(l.w0().clone(), bumped(l.a(), idx, -h), l.b().clone())?;
        fd_a.as_mut_slice()[idx] = (p - n) / (2.0 * h);
    }
    let mut fd_b = Matrix::zeros(l.b().rows(), l.b().cols());
    for idx in 0..fd_b.len() {
        let p = loss_with(l.w0().clone(), l.a().clone(), bumped(l.b(), idx, h))?;
        let n = loss_with(l.w0().clone(), l.a().clone(), bumped(l.b(), idx, -h))?;
        fd_b.as_mut_slice()[idx] = (p - n) / (2.0 * h);
    }
    Ok(max([fd_w.rel_err(&g.g), fd_a.rel_err(&grad_a), fd_b.rel_err(&grad_b)]))
}

fn gradient_correctness() -> Result<Verdict> {
    let mut rng = SeededRng::new(110);
    let (mut lin, mut relu) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let (k, d, r, m, width) = (5, 7, 2, 12, 16);
        let x = rng.gaussian_matrix(d, m, 1.0);
        let y = rng.gaussian_matrix(k, m, 1.0);
        let linear = ToyModel::linear(LoraLayer::new(
            rng.gaussian_matrix(k, d, 0.5),
            rng.gaussian_matrix(r, d, 0.5),
            rng.gaussian_matrix(k, r, 0.5),
            4.0,
        )?);
        lin = max([lin, finite_difference(&linear, &x, &y)?]);
        let two_layer = ToyModel::two_layer_relu(
            LoraLayer::new(
                rng.gaussian_matrix(width, d, 0.5),
                rng.gaussian_matrix(r, d, 0.5),
                rng.gaussian_matrix(width, r, 0.5),
                4.0,
            )?,
            rng.gaussian_matrix(k, width, 0.5),
        )?;
        relu = max([relu, finite_difference(&two_layer, &x, &y)?]);
    }
    Ok(Verdict {
        passed: lin < 1e-6 && relu < 1e-6,
        detail: format!("central differences, max rel err linear {lin:.2e}, two-layer ReLU {relu:.2e} (tol 1e-6)"),
    })
}

fn b_zero_stall() -> Result<Verdict> {
    let mut rng = SeededRng::new(111);
    let mut nonzero = 0usize;
    let mut total = 0usize;
    for _ in 0..50 {
        let (k, d, r, s) = dims(&mut rng);
        let l = LoraLayer::init(
            rng.gaussian_matrix(k, d, 1.0),
            r,
            s * r as f64,
            InitPolicy::Kaiming,
            InitPolicy::Zero,
            &mut rng,
        )?;
        let g = rng.gaussian_matrix(k, d, 1.0);
        let (grad_a, _) = lora_grads(&g, &l)?;
        let scaled = scaled_grad_a(&grad_a, l.b(), s, 1e-6)?;
        nonzero += scaled.as_slice().iter().filter(|v| v.to_bits() != 0).count();
        total += scaled.len();
    }
    Ok(Verdict {
        passed: nonzero == 0,
        detail: format!("50 instances, lambda 1e-6: {nonzero} of {total} scaled-gradient entries differ from +0.0"),
    })
}

/// CSV of the run, or of the partial record if it diverged.
fn record_csv(spec: &ExperimentSpec) -> Result<String> {
    match run_experiment(spec) {
        Ok(record) => record.to_csv_string(),
        Err(Error::DivergenceDetected { partial, .. }) => partial.to_csv_string(),
        Err(e) => Err(e),
    }
}

fn determinism() -> Result<Verdict> {
    let mut identical = 0;
    let mut runs = 0;
    for task in [TaskKind::LowRankFactorization, TaskKind::TwoLayerRelu] {
        for optimizer in OptimizerKind::ALL {
            let spec = ExperimentSpec {
                task,
                k: 6,
                d: 8,
                r: 3,
                width: 32,
                teacher_rank: 2,
                kappa: 10.0,
                seed: 42,
                optimizer,
                eval_every: 5,
                train: TrainConfig { eta: 0.02, steps: 60, ..TrainConfig::default() },
                ..ExperimentSpec::default()
            };
            let a = record_csv(&spec)?;
            let b = record_csv(&spec)?;
            runs += 1;
            identical += (a == b) as usize;
        }
    }
    Ok(Verdict {
        passed: identical == runs,
        detail: format!("{identical} of {runs} spec pairs produced byte-identical CSVs"),
    })
}

type Criterion = (&'static str, Duration, fn() -> Result<Verdict>);

fn main() -> ExitCode {
    let s = Duration::from_secs;
    let criteria: [Criterion; 12] = [
        ("closed-form optimality", s(10), closed_form_optimality),
        ("momentum-alignment optimality", s(10), momentum_alignment_optimality),
        ("pair-step decomposition", s(10), pair_step_decomposition),
        ("projector gauge invariance", s(5), projector_gauge_invariance),
        ("trajectory transformation invariance", s(60), trajectory_invariance),
        ("LoRA-Pro X-independence", s(5), lorapro_x_independence),
        ("condition-number robustness", s(300), condition_number_robustness),
        ("stable feature learning", s(180), stable_feature_learning),
        ("memory-complexity separation", s(1), memory_separation),
        ("gradient correctness", s(30), gradient_correctness),
        ("B=0 stall", s(1), b_zero_stall),
        ("determinism", s(30), determinism),
    ];
    let mut failures = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (passed, detail) = match result {
            Ok(v) => (v.passed && elapsed <= *limit, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += !passed as usize;
        println!(
            "[{}] {:>2}. {name}: {detail}; {:.2} s (limit {} s)",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
