//! Minimal dense neural-network engine.
//!
//! Everything the simulator trains — the federated classifier and the
//! activation-reconstruction autoencoders — is a chain of fully connected
//! layers driven by plain mini-batch SGD. Model math runs in `f32`; losses
//! and statistics accumulate in `f64`.

mod activation;
mod checkpoint;
mod loss;
mod network;
mod profile;

pub use activation::Activation;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::LossFn;
pub use network::{
    gradient, gradient_with_loss, init_weights, loss, train, train_with_report, DenseLayer,
    GradientSet, LayerGradient, LayerSpec, TrainConfig, TrainReport, WeightSet,
};
pub use profile::{ActivationProfile, LayerSlice};
