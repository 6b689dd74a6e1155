//! Skeleton-based action recognition at desk scale.
//!
//! The pipeline: skeleton topologies define joint orders (`skeleton`), joint
//! sequences become fixed-size skeleton images (`encode`), a small
//! reverse-mode autodiff tensor core (`tensor`) powers two-branch attention
//! networks (`nn`) and a sub-sequence LSTM attention model (`ssan`), and the
//! harness (`data`, `train`, `metrics`) generates datasets, runs self-paced
//! curriculum training and reports per-class accuracy.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod checkpoint;
pub mod data;
pub mod encode;
pub mod metrics;
pub mod nn;
pub mod skeleton;
pub mod ssan;
pub mod suite;
pub mod tensor;
pub mod train;
