//! Defocus blur detection networks with an explicit encoder/decoder split.

pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod config;
mod net;

pub use backbone::{
    build_builtin as build_builtin_backbone, Backbone, MediumBackbone, TinyBackbone,
};
pub use blocks::spatial_attention;
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CheckpointKind};
pub use config::{BackboneId, ModelConfig, Variant};
pub use net::{
    build_model, build_model_with_backbone, DbdNet, DepthOutput, EncoderOutput, ModelOutput,
};
