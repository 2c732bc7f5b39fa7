//! Vision-tabular masked autoencoding with geography-aware cross-attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`graph`], [`nn`], [`optim`]: a small `f64` tensor engine
//!   with reverse-mode autodiff, transformer blocks and AdamW.
//! - [`geo`], [`geometry`], [`posenc`]: local planar coordinates, polygon
//!   summaries, the distance bias and positional-encoding MLPs.
//! - [`vision`], [`tabular`], [`fusion`]: the two modality pathways and the
//!   bilateral cross-attention between them.
//! - [`data`]: the synthetic co-registered world, regions and file formats.
//! - [`train`]: the joint model, pretraining, joint training, checkpoints.
//! - [`eval`]: embeddings, baselines, ridge probes, PCA and ablations.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod geo;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod params;
pub mod posenc;
pub mod tabular;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::Tensor;
