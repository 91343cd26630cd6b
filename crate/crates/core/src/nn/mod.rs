//! Deterministic tensor networks with layer-wise reverse-mode gradients.

pub mod arch;
pub mod layers;
pub mod loss;
pub mod model;
pub mod sampler;
pub mod train;

pub use arch::{build, Arch, ArchSpec, Bayes};
pub use layers::{binarize_ste, ste_mask, Layer};
pub use loss::{one_hot, Loss};
pub use model::{Gradients, Mode, Model, PassOptions, Trace};
pub use sampler::{RngStats, Sampler};
pub use train::{accuracy, train, NoiseSpec, Optimizer, TrainConfig, TrainLog};
