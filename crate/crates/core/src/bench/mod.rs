//! Desk-scale experiments: synthetic tasks, the training loop, the width
//! probe and state/FLOP accounting.

mod accounting;
mod probe;
mod runner;
mod spec;
mod task;

pub use accounting::{gradient_flops, optimizer_step_flops, state_accounting, StateAccounting};
pub use probe::{width_scaling_probe, ProbeOptions, ProbeReport, DEFAULT_WIDTHS};
pub use runner::{
    run_experiment, EvalRow, RunRecord, RunSidecar, BUILD_ID, CSV_HEADER, DIVERGENCE_LOSS, LOSS_THRESHOLD,
};
pub use spec::{ExperimentSpec, KappaSource, TaskKind};
pub use task::{gen_lowrank_task, gen_relu_task, generate_task, log_spaced, Task};
