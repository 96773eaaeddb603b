//! Articulated neural radiance fields with constant and frame-unique latents.
//!
//! A body is described by a capsule [`deform::Skeleton`] posed per frame.
//! Observation-space samples are mapped to a shared canonical space through
//! blended part transforms whose weights are corrected by an MLP conditioned
//! on a constant latent ψᶜ and a fused frame-unique latent; a radiance field in
//! canonical space is then volume rendered. [`trainer`] fits the model to a
//! [`synthdata::Dataset`].

pub mod checkpoint;
pub mod deform;
mod error;
pub mod experiments;
pub mod fields;
pub mod geometry;
pub mod image;
pub mod kv;
pub mod losses;
pub mod model;
pub mod nn;
pub mod render;
pub mod synthdata;
pub mod train;
pub mod txformer;

pub use error::{CatError, Result};
pub use model::{Model, ModelConfig, Objective, SceneContext};
