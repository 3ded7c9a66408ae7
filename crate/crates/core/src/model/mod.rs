//! Decoder-only transformer with manual backpropagation.

pub mod backward;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod intervention;
pub mod lm_loss;
pub mod params;
pub mod train;

pub use backward::{loss_and_grad, loss_and_grad_linked};
pub use checkpoint::{fingerprint, load_model, save_model};
pub use config::{ModelConfig, TrainConfig};
pub use forward::{forward, forward_batch, Capture, ForwardOptions, ForwardPass, HiddenTrace, StateLink};
pub use intervention::{apply_intervention, InterventionMode, InterventionSpec, DEFAULT_ALPHA};
pub use lm_loss::probe_loss;
pub use params::{Layout, ModelParams};
pub use train::{train, Sample, TrainLog};
