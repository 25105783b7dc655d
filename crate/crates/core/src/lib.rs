//! Semi-supervised ensemble training with online knowledge distillation.
//!
//! An ensemble of classifiers is trained on a labeled pool with a
//! class-weighted cross-entropy plus a distillation term toward the
//! ensemble's own softened, averaged logits. The trained ensemble then
//! pseudo-labels confident unlabeled examples, which are moved into the
//! labeled pool, and the cycle repeats.

pub mod augment;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::ExecMode;
