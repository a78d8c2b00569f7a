//! Adaptive per-object region mining on synthetic scenes.
//!
//! The crate is organized around a small reverse-mode tensor library
//! ([`tensor`]), a deterministic synthetic-scene generator ([`scene`]), the
//! three miner networks ([`nets`]), the step-wise mining engine ([`mining`]),
//! a toy distribution-mapping verification ([`distmap`]), and evaluation
//! against ground truth ([`metrics`]).

pub mod gradcheck;
pub mod tensor;

pub use tensor::{ParamId, ParamStore, Parameter, Tape, Tensor, TensorError};
