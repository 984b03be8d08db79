use serde::{Deserialize, Serialize};

use crate::adapter::InitPolicy;
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LowRankFactorization,
    TwoLayerRelu,
}

/// Where the condition number `kappa` is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaSource {
    /// Singular values of the teacher's low-rank residual.
    Teacher,
    /// Eigenvalues of the input covariance.
    Inputs,
    Both,
}

impl KappaSource {
    pub fn teacher(self) -> bool {
        matches!(self, KappaSource::Teacher | KappaSource::Both)
    }

    pub fn inputs(self) -> bool {
        matches!(self, KappaSource::Inputs | KappaSource::Both)
    }
}

/// Declarative description of one training run.
///
/// For [`TaskKind::LowRankFactorization`] the adapted layer is `k×d`. For
/// [`TaskKind::TwoLayerRelu`] the adapted first layer is `width×d` and the
/// frozen head maps `width` hidden units to `k` outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub task: TaskKind,
    pub k: usize,
    pub d: usize,
    pub r: usize,
    pub width: usize,
    pub teacher_rank: usize,
    pub kappa: f64,
    /// Defaults to `teacher` for the factorization task and `inputs` for the ReLU task.
    pub kappa_source: Option<KappaSource>,
    /// Largest singular value of the teacher residual.
    pub teacher_scale: f64,
    /// Batch size; defaults to `4·d`.
    pub samples: Option<usize>,
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub train: TrainConfig,
    pub init_a: InitPolicy,
    pub init_b: InitPolicy,
    pub seed: u64,
    pub eval_every: usize,
    /// End the run at the first step whose loss reaches the threshold.
    pub stop_at_threshold: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::LowRankFactorization,
            k: 32,
            d: 32,
            r: 8,
            width: 128,
            teacher_rank: 4,
            kappa: 1.0,
            kappa_source: None,
            teacher_scale: 1.0,
            samples: None,
            alpha: 16.0,
            optimizer: OptimizerKind::AltLora,
            train: TrainConfig::default(),
            init_a: InitPolicy::Kaiming,
            init_b: InitPolicy::Zero,
            seed: 0,
            eval_every: 10,
            stop_at_threshold: false,
        }
    }
}

impl ExperimentSpec {
    pub fn kappa_source(&self) -> KappaSource {
        self.kappa_source.unwrap_or(match self.task {
            TaskKind::LowRankFactorization => KappaSource::Teacher,
            TaskKind::TwoLayerRelu => KappaSource::Inputs,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples.unwrap_or(4 * self.d)
    }

    /// `(k, d)` of the adapted layer.
    pub fn layer_dims(&self) -> (usize, usize) {
        match self.task {
            TaskKind::LowRankFactorization => (self.k, self.d),
            TaskKind::TwoLayerRelu => (self.width, self.d),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.k == 0 || self.d == 0 || self.r == 0 || self.teacher_rank == 0 {
            return fail("k, d, r and teacher_rank must be positive".into());
        }
        if !(self.kappa >= 1.0) || !self.kappa.is_finite() {
            return fail(format!("kappa must be at least 1, got {}", self.kappa));
        }
        if !(self.teacher_scale > 0.0) || !self.teacher_scale.is_finite() {
            return fail("teacher_scale must be positive".into());
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return fail("alpha must be positive".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        if self.samples() == 0 {
            return fail("samples must be positive".into());
        }
        let (k, d) = self.layer_dims();
        match self.task {
            TaskKind::LowRankFactorization => {
                if !(self.teacher_rank <= self.r && self.r <= k.min(d)) {
                    return fail(format!(
                        "need teacher_rank <= r <= min(k, d), got {} <= {} <= {}",
                        self.teacher_rank,
                        self.r,
                        k.min(d)
                    ));
                }
            }
            TaskKind::TwoLayerRelu => {
                if self.width < 4 * self.d {
                    return fail(format!(
                        "width {} must be at least 4·d = {}",
                        self.width,
                        4 * self.d
                    ));
                }
                if self.r > k.min(d) || self.teacher_rank > k.min(d) {
                    return fail("ranks must not exceed min(width, d)".into());
                }
            }
        }
        self.train
            .validate()
            .map_err(|e| Error::InvalidSpec(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        ExperimentSpec::default().validate().unwrap();
    }

    #[test]
    fn rank_ordering_is_enforced() {
        let spec = ExperimentSpec {
            teacher_rank: 5,
            r: 4,
            ..ExperimentSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        let spec = ExperimentSpec {
            kappa: 0.5,
            ..ExperimentSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn relu_width_must_overparameterize() {
        let spec = ExperimentSpec {
            task: TaskKind::TwoLayerRelu,
            d: 16,
            width: 32,
            ..ExperimentSpec::default()
        };
        assert!(spec.validate().is_err());
        assert_eq!(spec.kappa_source(), KappaSource::Inputs);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentSpec>(r#"{"kapa": 3}"#);
        assert!(err.is_err());
        let ok: ExperimentSpec = serde_json::from_str(r#"{"kappa": 3, "optimizer": "lora_sgd"}"#).unwrap();
        assert_eq!(ok.kappa, 3.0);
        assert_eq!(ok.optimizer, OptimizerKind::LoraSgd);
    }
}
