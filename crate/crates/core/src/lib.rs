//! Core algorithms for debiasing pre-trained classifiers by tuning a
//! zero-initialized change network under a parameter-change penalty.
//!
//! The crate is `no_std` (with `alloc`): all compute is pure and
//! deterministic. File formats, the CLI, and the experiment harness live
//! in the companion `changetune` crate.

#![no_std]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod datagen;
pub mod eval;
pub mod network;
pub mod params;
pub mod penalty;
pub mod pretrain;
pub mod tape;
pub mod tensor;
pub mod tuner;

pub use network::{ChangeModel, LayerSpec, ModelSpec, RunningStats, SideTunedModel};
pub use params::ParamSet;
pub use tape::Tape;
pub use tensor::Tensor;
