//! Retrieval-and-reranking place recognition on a minimal autodiff engine.
//!
//! The crate is `no_std` (with `alloc`): it carries the numerical kernels,
//! the vision-transformer encoder, attention-based token selection, the
//! exhaustive global index, the correlation reranker and the staged
//! training procedure. File formats and the command line live in the
//! `placerank` companion crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod rerank;
pub mod retrieval;
pub mod selection;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
