//! Differentiable, phenotype-driven human body model.
//!
//! A body is a quad mesh deformed in two stages: phenotype parameters in
//! [0, 1] blend prototype displacement targets onto a base mesh
//! ([`shape`]), then a skeleton rigged by linear blend skinning poses it
//! ([`pose`]). Both stages provide analytic Jacobians, which drive scan
//! fitting ([`fitting`]) and topology transfer ([`regressor`]).

pub mod asset;
pub mod bench;
pub mod collision;
pub mod error;
pub mod fitting;
pub mod geometry;
pub mod math;
pub mod pose;
pub mod regressor;
pub mod shape;
pub mod stats;

pub use error::{Error, Result};
