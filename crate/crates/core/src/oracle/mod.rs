//! Brute-force verifiers for the closed forms used by the optimizers.
//!
//! Nothing here reuses the code under test: least-squares problems are solved
//! column by column through dense normal equations in `nalgebra`, projectors
//! are rebuilt with `nalgebra` inverses, and merged-weight updates are
//! materialised as full `k×d` matrices. These `k×d` buffers are verification
//! only and are excluded from the optimizer memory accounting.

mod checks;

pub use checks::{
    check_names, run_checks, scaled_grad_a_check, scaled_grad_b_check, Bound, CheckOutcome,
    CheckReport, CheckResult, ScaledGradFn,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adapter::{LoraLayer, ToyModel};
use crate::error::{Error, Result};
use crate::matcore::{inverse, projector, Matrix, Space};
use crate::optim::{
    altlora_step, baseline_step, AltLoraState, BaselineKind, BaselineState, Optimizer,
    OptimizerKind, TrainConfig, UpdateOrder,
};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Least-squares objectives with closed forms in [`crate::optim`].
#[derive(Clone, Copy, Debug)]
pub enum LstsqObjective<'a> {
    /// `min_Z ‖s·B·Z − G‖_F`.
    LeftFactor { s: f64, b: &'a Matrix, g: &'a Matrix },
    /// `min_Z ‖s·Z·A − G‖_F`.
    RightFactor { s: f64, a: &'a Matrix, g: &'a Matrix },
    /// `min_Z ‖M_B·A_old − Z·A_new‖_F`.
    MomentumB {
        mb: &'a Matrix,
        a_old: &'a Matrix,
        a_new: &'a Matrix,
    },
    /// `min_Z ‖B_old·M_A − B_new·Z‖_F`.
    MomentumA {
        ma: &'a Matrix,
        b_old: &'a Matrix,
        b_new: &'a Matrix,
    },
}

/// Solves the objective by reducing it to `min_Z ‖M·Z − T‖_F` and solving the
/// normal equations `(MᵀM) z_j = Mᵀ t_j` for every column `j`.
pub fn lstsq_oracle(objective: LstsqObjective<'_>) -> Result<Matrix> {
    match objective {
        LstsqObjective::LeftFactor { s, b, g } => {
            if b.rows() != g.rows() {
                return Err(Error::shape("lstsq left", b.shape(), g.shape()));
            }
            let z = column_lstsq(&(to_na(b) * s), &to_na(g))?;
            Ok(from_na(&z))
        }
        LstsqObjective::RightFactor { s, a, g } => {
            if a.cols() != g.cols() {
                return Err(Error::shape("lstsq right", a.shape(), g.shape()));
            }
            let z = column_lstsq(&(to_na(a).transpose() * s), &to_na(g).transpose())?;
            Ok(from_na(&z.transpose()))
        }
        LstsqObjective::MomentumB { mb, a_old, a_new } => {
            if mb.cols() != a_old.rows() || a_old.shape() != a_new.shape() {
                return Err(Error::shape("lstsq momentum B", a_old.shape(), a_new.shape()));
            }
            let target = (to_na(mb) * to_na(a_old)).transpose();
            let z = column_lstsq(&to_na(a_new).transpose(), &target)?;
            Ok(from_na(&z.transpose()))
        }
        LstsqObjective::MomentumA { ma, b_old, b_new } => {
            if ma.rows() != b_old.cols() || b_old.shape() != b_new.shape() {
                return Err(Error::shape("lstsq momentum A", b_old.shape(), b_new.shape()));
            }
            let target = to_na(b_old) * to_na(ma);
            let z = column_lstsq(&to_na(b_new), &target)?;
            Ok(from_na(&z))
        }
    }
}

fn column_lstsq(m: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(Error::SingularSystem(format!(
            "design matrix {}x{} is rank deficient (σ_min/σ_max = {:.3e})",
            m.nrows(),
            m.ncols(),
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    let normal = m.transpose() * m;
    let lu = normal.lu();
    let mut z = DMatrix::zeros(m.ncols(), t.ncols());
    for j in 0..t.ncols() {
        let rhs = m.transpose() * t.column(j);
        let col = lu
            .solve(&rhs)
            .ok_or_else(|| Error::SingularSystem("normal matrix is singular".into()))?;
        z.set_column(j, &col);
    }
    Ok(z)
}

/// `‖M·Z − T‖_F` for the reduced form of an objective, evaluated directly.
pub fn lstsq_residual(objective: LstsqObjective<'_>, z: &Matrix) -> f64 {
    let z = to_na(z);
    let diff = match objective {
        LstsqObjective::LeftFactor { s, b, g } => to_na(b) * &z * s - to_na(g),
        LstsqObjective::RightFactor { s, a, g } => &z * to_na(a) * s - to_na(g),
        LstsqObjective::MomentumB { mb, a_old, a_new } => {
            to_na(mb) * to_na(a_old) - &z * to_na(a_new)
        }
        LstsqObjective::MomentumA { ma, b_old, b_new } => {
            to_na(b_old) * to_na(ma) - to_na(b_new) * &z
        }
    };
    diff.norm()
}

/// `merged(after) − merged(before)`, materialised.
pub fn equivalent_update(before: &LoraLayer, after: &LoraLayer) -> Result<Matrix> {
    if before.dims() != after.dims() || before.rank() != after.rank() {
        return Err(Error::shape("equivalent_update", before.dims(), after.dims()));
    }
    after.merged_weight().sub(&before.merged_weight())
}

/// Damped projector rebuilt with `nalgebra`.
fn na_projector(m: &Matrix, space: Space, lambda: f64) -> Result<DMatrix<f64>> {
    let m = match space {
        Space::ColumnSpace => to_na(m),
        Space::RowSpace => to_na(m).transpose(),
    };
    let r = m.ncols();
    let gram = m.transpose() * &m + DMatrix::identity(r, r) * lambda;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::SingularSystem("Gram matrix not invertible".into()))?;
    Ok(&m * inv * m.transpose())
}

/// Terms of one alternating pair step and one joint step from the same point.
#[derive(Clone, Debug)]
pub struct DecompositionReport {
    /// `η·Proj_c(B)·G_t`.
    pub projected_col_term: Matrix,
    /// `η·G_half·Proj_r(A⁺)`, with `A⁺` the factor after the A-phase.
    pub projected_row_term: Matrix,
    /// Joint step's update minus its two first-order projected terms.
    pub cross_term: Matrix,
    /// `(η²/s)·G·Aᵀ(AAᵀ+λI)⁻¹(BᵀB+λI)⁻¹Bᵀ·G`.
    pub cross_term_formula: Matrix,
    /// `‖ΔW_alt + η·Proj_c(B)·G_t + η·G_half·Proj_r(A⁺)‖_F`.
    pub residual_norm: f64,
    /// `‖ΔW_alt‖_F`.
    pub alternating_update_norm: f64,
}

impl DecompositionReport {
    pub fn relative_residual(&self) -> f64 {
        if self.alternating_update_norm == 0.0 {
            self.residual_norm
        } else {
            self.residual_norm / self.alternating_update_norm
        }
    }

    /// Relative distance between the measured and the explicit cross term.
    pub fn cross_term_deviation(&self) -> f64 {
        self.cross_term.rel_err(&self.cross_term_formula)
    }
}

/// Runs an A-phase (gradient `g_t`) then a B-phase (gradient `g_half`) and,
/// separately, one joint scaled step with `g_t`, all without momentum or
/// weight decay, and decomposes the resulting merged-weight changes.
pub fn decompose_pair_step(
    layer: &LoraLayer,
    g_t: &Matrix,
    g_half: &Matrix,
    cfg: &TrainConfig,
) -> Result<DecompositionReport> {
    let cfg = TrainConfig {
        beta1: 0.0,
        gamma: 0.0,
        order: UpdateOrder::AFirst,
        ..cfg.clone()
    };
    let (eta, lambda, s) = (cfg.eta, cfg.lambda, layer.scale());

    let mut alt = layer.clone();
    let mut state = AltLoraState::new(&alt);
    altlora_step(&mut alt, &mut state, g_t, &cfg)?;
    let a_plus = alt.a().clone();
    altlora_step(&mut alt, &mut state, g_half, &cfg)?;
    let delta_alt = to_na(&equivalent_update(layer, &alt)?);

    let p_col = na_projector(layer.b(), Space::ColumnSpace, lambda)?;
    let p_row_plus = na_projector(&a_plus, Space::RowSpace, lambda)?;
    let p_row = na_projector(layer.a(), Space::RowSpace, lambda)?;
    let (gt, gh) = (to_na(g_t), to_na(g_half));

    let col_term = &p_col * &gt * eta;
    let row_term = &gh * &p_row_plus * eta;
    let residual = (&delta_alt + &col_term + &row_term).norm();

    let mut joint = layer.clone();
    let mut joint_state = BaselineState::new(BaselineKind::ScaledGdJoint, &joint);
    baseline_step(BaselineKind::ScaledGdJoint, &mut joint, &mut joint_state, g_t, &cfg)?;
    let delta_joint = to_na(&equivalent_update(layer, &joint)?);
    let first_order = &p_col * &gt * eta + &gt * &p_row * eta;
    let cross = delta_joint + first_order;

    let (a, b) = (to_na(layer.a()), to_na(layer.b()));
    let r = layer.rank();
    let inv_aat = (&a * a.transpose() + DMatrix::identity(r, r) * lambda)
        .try_inverse()
        .ok_or_else(|| Error::SingularSystem("AAᵀ + λI".into()))?;
    let inv_btb = (b.transpose() * &b + DMatrix::identity(r, r) * lambda)
        .try_inverse()
        .ok_or_else(|| Error::SingularSystem("BᵀB + λI".into()))?;
    let formula = &gt * a.transpose() * inv_aat * inv_btb * b.transpose() * &gt * (eta * eta / s);

    Ok(DecompositionReport {
        projected_col_term: from_na(&col_term),
        projected_row_term: from_na(&row_term),
        cross_term: from_na(&cross),
        cross_term_formula: from_na(&formula),
        residual_norm: residual,
        alternating_update_norm: delta_alt.norm(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeCheck {
    pub passed: bool,
    pub max_deviation: f64,
}

/// Default relative tolerance for [`projector_gauge_check`].
pub const PROJECTOR_GAUGE_TOL: f64 = 1e-9;

/// Checks that two factorizations of the same product share column- and
/// row-space projectors.
pub fn projector_gauge_check(
    a1: &Matrix,
    b1: &Matrix,
    a2: &Matrix,
    b2: &Matrix,
    tol: f64,
) -> Result<GaugeCheck> {
    let p1 = b1.matmul(a1)?;
    let p2 = b2.matmul(a2)?;
    let mismatch = p2.rel_err(&p1);
    if mismatch > 1e-10 {
        return Err(Error::PreconditionViolated(format!(
            "factorizations differ: ‖B1A1 − B2A2‖/‖B1A1‖ = {mismatch:.3e}"
        )));
    }
    let col = projector(b2, Space::ColumnSpace, 0.0)?.rel_err(&projector(b1, Space::ColumnSpace, 0.0)?);
    let row = projector(a2, Space::RowSpace, 0.0)?.rel_err(&projector(a1, Space::RowSpace, 0.0)?);
    let max_deviation = col.max(row);
    Ok(GaugeCheck {
        passed: max_deviation <= tol,
        max_deviation,
    })
}

/// A fixed regression problem shared by both runs of an invariance check.
#[derive(Clone, Debug)]
pub struct InvarianceTask {
    pub model: ToyModel,
    pub x: Matrix,
    pub y: Matrix,
}

/// Optional nonzero starting moments `(M_A, M_B)` for the first run.
pub type InitialMomenta = (Matrix, Matrix);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryReport {
    /// `‖W¹_t − W²_t‖_F / ‖W¹_t‖_F` for `t = 0..=steps`.
    pub per_step: Vec<f64>,
    pub max_deviation: f64,
    pub passed: bool,
}

/// Default tolerance for [`trajectory_invariance_check`].
pub const TRAJECTORY_TOL: f64 = 1e-6;

/// Runs `kind` from `(A, B)` and from the gauge-equivalent `(R⁻¹A, BR)` and
/// compares merged weights after every step.
///
/// For the alternating kinds, starting moments are mapped as
/// `M_A ↦ R⁻¹M_A`, `M_B ↦ M_B·R`, and the snapshots like the factors.
pub fn trajectory_invariance_check(
    task: &InvarianceTask,
    kind: OptimizerKind,
    cfg: &TrainConfig,
    gauge: &Matrix,
    steps: usize,
    tol: f64,
    initial_momenta: Option<&InitialMomenta>,
) -> Result<TrajectoryReport> {
    let r = task.model.layer.rank();
    if gauge.shape() != (r, r) {
        return Err(Error::shape("gauge", gauge.shape(), (r, r)));
    }
    let gauge_inv = inverse(gauge)?;
    let layer1 = task.model.layer.clone();
    let layer2 = layer1.with_factors(
        gauge_inv.matmul(layer1.a())?,
        layer1.b().matmul(gauge)?,
    )?;

    let (opt1, opt2) = if kind.is_alternating() {
        let mut s1 = if kind == OptimizerKind::AltLoraPlus {
            AltLoraState::with_second_moments(&layer1)
        } else {
            AltLoraState::new(&layer1)
        };
        if let Some((ma, mb)) = initial_momenta {
            s1.ma = ma.clone();
            s1.mb = mb.clone();
        }
        let mut s2 = s1.clone();
        s2.ma = gauge_inv.matmul(&s1.ma)?;
        s2.mb = s1.mb.matmul(gauge)?;
        s2.prev_a = gauge_inv.matmul(&s1.prev_a)?;
        s2.prev_b = s1.prev_b.matmul(gauge)?;
        (
            Optimizer::from_altlora_state(cfg.clone(), s1)?,
            Optimizer::from_altlora_state(cfg.clone(), s2)?,
        )
    } else {
        (
            Optimizer::new(kind, cfg.clone(), &layer1)?,
            Optimizer::new(kind, cfg.clone(), &layer2)?,
        )
    };

    let mut runs = [
        (task.model.clone(), opt1),
        (task.model.clone(), opt2),
    ];
    runs[0].0.layer = layer1;
    runs[1].0.layer = layer2;

    let deviation = |runs: &[(ToyModel, Optimizer); 2]| {
        let w1 = runs[0].0.layer.merged_weight();
        let w2 = runs[1].0.layer.merged_weight();
        w2.rel_err(&w1)
    };
    let mut per_step = Vec::with_capacity(steps + 1);
    per_step.push(deviation(&runs));
    for _ in 0..steps {
        for (model, opt) in runs.iter_mut() {
            let (_, g) = model.loss_and_gradient(&task.x, &task.y)?;
            opt.step(&mut model.layer, &g.g)?;
        }
        per_step.push(deviation(&runs));
    }
    let max_deviation = per_step.iter().cloned().fold(0.0, f64::max);
    Ok(TrajectoryReport {
        passed: max_deviation <= tol,
        max_deviation,
        per_step,
    })
}
