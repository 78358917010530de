//! Proxy-space reprogramming of a frozen feature extractor and progressive
//! distillation of that space into a small student network.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches the
//! filesystem, configuration files or the command line lives in the `proxykd`
//! companion crate.
//!
//! Layout:
//!
//! * [`nn`] is a small reverse-mode engine over sequential layer stacks.
//! * [`models`] holds the parameterized modules, the teacher pipeline and the
//!   student, plus classifier transfer and parameter checksums.
//! * [`objectives`] and [`domain_gap`] hold the losses and the MMD estimator.
//! * [`reprogram`] and [`distill`] are the two training stages; [`semisup`]
//!   and [`baselines`] build on them.
//! * [`synth`] generates the two-domain image benchmark and [`pretrain`]
//!   trains the stand-in foundation extractor on its broad domain.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod baselines;
pub mod data;
pub mod distill;
pub mod domain_gap;
mod error;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pretrain;
mod real;
pub mod record;
pub mod reprogram;
pub mod rng;
pub mod semisup;
pub mod synth;
pub mod tensor;
mod train;

/// Version string recorded in run records and manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
pub use train::{evaluate, predict_logits, Classifier};
