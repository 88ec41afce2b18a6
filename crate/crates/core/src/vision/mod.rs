//! Patch-based vision transformer with zero-vector soft prompts.

mod attention;
mod encoder;
mod image;
mod saliency;

pub use attention::attention_with_sink;
pub use encoder::{
    embed_patches, encode_image, encoder_forward, image_features, ZeroPromptConfig, ZeroPromptMode,
};
pub use image::{patchify, ImageTensor, PatchGrid};
pub use saliency::{saliency, saliency_with, Heatmap, SaliencyMethod};
