//! Dynamic channel pruning with feature-gate coupling.
//!
//! A self-contained training and analysis toolkit for gated convolutional
//! networks whose per-instance channel gates are regularized - via memory
//! banks and a contrastive loss - to reproduce the instance neighborhood
//! structure of the feature space.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: float64 tensors with tape-based reverse-mode autodiff.
//! - [`layers`]: gating modules, gated layers, and small classifier networks.
//! - [`coupling`]: memory banks, neighborhood exploration, and the
//!   feature-gate alignment loss.
//! - [`objectives`]: task/sparsity losses, the composite objective, and the
//!   mutual-information bound diagnostic.
//! - [`metrics`]: FLOP accounting, pruning ratios, and normalized mutual
//!   information.
//! - [`data`]: synthetic cluster datasets, IDX readers/writers, batch plans.
//! - [`config`], [`train`], [`checkpoint`], [`analyze`]: the end-to-end
//!   training harness behind the `fgc` command-line tool.

pub mod analyze;
pub mod checkpoint;
pub mod config;
pub mod coupling;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Mode, Tape, Tensor};
