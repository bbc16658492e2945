//! GroupMamba: a hierarchical vision backbone built from grouped,
//! four-direction selective scans with channel affinity modulation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two concrete instantiations.

pub mod bench;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod ssm;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
