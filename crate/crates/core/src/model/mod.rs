//! The grouped-convolution encoder and its interpretability stage.

mod config;
mod disentangle;
mod encoder;
pub mod layers;
mod weights;

pub use config::ModelConfig;
pub use disentangle::{disentanglement_check, disentanglement_trials, input_gradient, DisentanglementReport, TrialSummary};
pub use encoder::{
    channel_contribution, permute_channel_blocks, ChannelNormalizer, Embedding, ForwardTrace,
    Grads, InterpretabilityActivations, NextChannelEncoder, Param, ParamRole, ParamStore,
};
pub use layers::FeatureMap;
pub use weights::{encoder_from_file, encoder_to_file, load_weights, load_weights_expecting, save_weights};

/// Planar `channels x size x size` cell-centred crop.
pub type Patch = FeatureMap;
