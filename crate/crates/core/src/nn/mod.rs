//! Adaptive graph convolution network: blocks, the full model, the bone
//! stream transform, two-stream fusion and checkpoint I/O.

mod block;
pub mod checkpoint;
mod layers;
mod model;

pub use block::{AgcnBlock, AgcnBlockConfig};
pub use layers::{BatchNorm, Binder, ForwardCtx, Role};
pub use model::{fuse_streams, to_bone_stream, AgcnModel, ModelConfig, Stream};
