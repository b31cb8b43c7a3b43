//! Encoder-decoder segmentation network with a dilated bottleneck.

mod checkpoint;
mod config;
mod model;
mod weights;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Progress};
pub use config::{ModelConfig, DILATION_RATES, LEVELS};
pub use model::{bind_params, model_forward, train_forward, Network, ParamVars, TrainForward};
pub use weights::{build_model, Layout, ModelWeights, ParamKind, ParamSpec, Provenance};

#[cfg(test)]
mod tests;
