//! Parameter-efficient video-text retrieval built on a small reverse-mode
//! autodiff engine.
//!
//! The model adapts frozen transformer encoders with low-rank projections and
//! image/video fusion adapters, and trains them with video-level contrastive
//! alignment, fine-grained pseudo image-level alignment and a KL distillation
//! term from image-level to video-level similarity distributions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod data;
pub mod encoders;
pub mod error;
pub mod numerics;
pub mod retrieval;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, Tensor, Var};
