//! Multi-exit CNNs with on-device exit personalisation.
//!
//! The crate turns a small chain-CNN backbone into a multi-exit network,
//! trains it jointly on generic data, then personalises only the exit heads
//! on a user's (non-IID) data with a hybrid supervised / self-distillation /
//! self-supervised loss. Inference runs a confidence-thresholded early-exit
//! policy whose threshold is picked by Pareto-front calibration, and a
//! three-phase orchestrator schedules inference, exploration and
//! re-personalisation at run time.
//!
//! Start with the runnable examples (`cargo run --release --example <name>`):
//!
//! - `flops_accounting` - per-block FLOP/parameter accounting and exit placement
//! - `train_global` - joint training of backbone + exits on generic data
//! - `personalise` - frozen-backbone personalisation of the exit heads
//! - `early_exit_inference` - confidence-thresholded inference and exit rates
//! - `calibrate` - profiling, Pareto-front analysis and threshold selection
//! - `orchestrate` - the three-phase runtime loop with drift detection
//! - `non_iid_users` - Gaussian label-popularity user distributions
//! - `checkpoint_roundtrip` - bit-exact model and IDX dataset persistence
//!
//! The same capabilities are reachable through the thin `exitnet` binary
//! (`exitnet <subcommand> --help`).

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod layer;
pub mod loss;
pub mod model;
pub mod optim;
pub mod orchestrator;
pub mod plot;
pub mod profile;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
