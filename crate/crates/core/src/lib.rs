//! Alternating projected-gradient optimizers for LoRA factors.
//!
//! The crate is organised bottom-up:
//!
//! - [`matcore`]: dense kernels, damped Gram inverses, projectors, seeded RNG.
//! - [`adapter`]: LoRA layers and the two hand-differentiated toy models.
//! - [`optim`]: AltLoRA, AltLoRA+ and the baseline optimizers.
//! - [`oracle`]: brute-force verifiers for the closed forms and invariances.
//! - [`bench`]: task generators, the experiment runner, probes and accounting.
//! - [`cli`]: configuration, verification suite and command drivers.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod bench;
pub mod cli;
pub mod error;
pub mod matcore;
pub mod optim;
pub mod oracle;

pub use error::{Error, Result};
pub use matcore::Matrix;
