//! Balanced low-bit-width quantization of recurrent networks.
//!
//! Training runs on a small reverse-mode tape ([`autograd`]) with
//! straight-through quantization nodes; inference runs on bit-plane packed
//! weights and activations ([`bitpack`]) loaded from the export format in
//! [`modelio`].

pub mod autograd;
pub mod bitpack;
pub mod cells;
pub mod config;
pub mod data;
pub mod modelio;
pub mod quantizers;
pub mod tensor;
pub mod training;

pub use tensor::Matrix;
