//! Dense tensors, reverse-mode autodiff and transformer layers.

mod graph;
pub mod gradcheck;
pub mod layers;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{
    modulate, sincos_2d, BlockNorm, Init, LabelEmbedding, LayerNorm, Linear, Mlp,
    MultiHeadAttention, TimestepEmbedder, TransformerBlock, INIT_STD,
};
pub use params::{standard_normal, trunc_normal, ParamId, ParamStore};
pub use tensor::{gemm, Tensor};
