//! Neural-network kernel: parameter store, autodiff tape, layers, Adam,
//! checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod store;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{
    feed_forward, init_attention, init_feed_forward, init_layer_norm, init_linear, layer_norm,
    lease_attention, lease_feed_forward, lease_layer_norm, lease_linear, linear, multi_head_attention,
    Activation, AttentionConfig, AttentionParams, FeedForwardParams, LayerNormParams, LinearParams,
    MhaOutput, LN_EPS,
};
pub use store::{ParamStore, ParamTensor};
pub use tape::{gelu_scalar, Tape, Var};
