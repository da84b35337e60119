//! Isolated sign recognition from hand-keypoint sequences.
//!
//! Each video becomes a `[C = 3, T, V = 21]` tensor of x-y-z joint positions
//! over an augmented hand graph, classified by a stack of adaptive graph
//! convolution blocks. A joint stream and a bone stream are trained
//! separately and fused at the score level.
//!
//! - [`keypoints`]: interchange documents, manifests and the stratified split
//! - [`graph`]: hand topology and the `[V, V, 3]` adjacency stack
//! - [`tensor`], [`autodiff`]: dense arrays and reverse-mode differentiation
//! - [`nn`]: AGCN blocks, the full model, stream fusion and checkpoints
//! - [`pipeline`]: preprocessing, training, evaluation and metrics

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod keypoints;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
