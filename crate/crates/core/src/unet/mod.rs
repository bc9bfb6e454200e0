//! The U-Net: residual encoder with strided-convolution downsampling,
//! transposed-convolution decoder with concatenated skips, and TTT blocks
//! at the bottleneck (`bot`), in every encoder stage (`enc`) or nowhere
//! (`none`).
//!
//! A TTT block runs two residual blocks, flattens each sample's feature map
//! into raster-order tokens, layer-normalizes them, and mixes them through
//! three linear branches (V directly, K and Q each followed by a causal
//! depthwise convolution) feeding a TTT scan, gated elementwise by a SiLU
//! branch.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_FORMAT, MANIFEST_FILE};
pub use config::{preset, NetworkConfig, Preset, TttBlockConfig, Variant, PRESET_NAMES};
pub use model::{
    build_model, decode, encode, forward, residual_block, ttt_block, ttt_mix_tokens, Architecture, ConvRef,
    DecoderStage, EncoderStage, LinearRef, ModelParams, NormRef, ParamId, ParamStore, ResidualBlockParams,
    StageBlock, TttBlockParams,
};
