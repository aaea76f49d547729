//! The gradual-fusion transformer architecture.

pub mod config;
pub mod graft;
pub mod layers;
pub mod patch;

pub use config::{FusionMethod, GraftConfig};
pub use graft::{fuse_average, modality_encoder_layer, ForwardOpts, ForwardOutput, GraftModel};
pub use layers::EncoderBlock;
pub use patch::PatchEmbed;
