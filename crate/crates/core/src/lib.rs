//! Rotation-equivariant dense feature matching.
//!
//! The crate covers the whole pipeline: a small tensor engine with
//! reverse-mode differentiation, cyclic-group actions and steerable layers,
//! a feature-pyramid backbone in plain and equivariant variants, a
//! coarse-to-fine attention matcher, homography estimation with the usual
//! benchmark metrics, and the synthetic/HPatches-style data harness.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod equivariance;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod group;
pub mod image;
pub mod matcher;
pub mod model;
pub mod params;
pub mod steerable;
pub mod tensor;
pub mod train;
pub mod visualize;

pub use error::{Error, Result};
