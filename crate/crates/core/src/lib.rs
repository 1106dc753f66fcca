//! Part-aware transformer (PAT) for occluded person re-identification.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), transformer layers ([`nn`]), the PAT network
//! ([`model`]), its training objectives ([`losses`]), a synthetic occluded
//! corpus with PK batching ([`data`]), the training loop and checkpoints
//! ([`trainer`]) and retrieval evaluation ([`evaluator`]).

pub mod autodiff;
pub mod data;
pub mod evaluator;
pub mod gradcheck;
pub mod gradcheck_suite;
pub mod kvconfig;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor, TensorError};
