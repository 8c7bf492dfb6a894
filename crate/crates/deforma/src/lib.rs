//! Differentiable radiance-manifold rendering with expression-driven
//! deformation, supervised against a linear morphable face model.
//!
//! The engine is generic over the scalar type (`f32` or `f64`, see
//! [`scalar::Real`]); concrete `f64` aliases live at the crate root.

pub mod autodiff;
pub mod error;
pub mod facemodel;
pub mod fitkit;
pub mod losses;
pub mod manifolds;
pub mod math;
pub mod neuralfields;
pub mod oracle;
pub mod renderer;
pub mod scalar;

pub use error::{Error, Result};

/// Concrete `f64` aliases for the main engine types.
pub type Tape64 = autodiff::Tape<f64>;
pub type FaceBasis64 = facemodel::FaceBasis<f64>;
pub type Mesh64 = facemodel::Mesh<f64>;
pub type Coefficients64 = facemodel::Coefficients<f64>;
pub type FieldParams64 = neuralfields::FieldParams<f64>;
pub type LatentCodes64 = neuralfields::LatentCodes<f64>;
pub type ManifoldField64 = manifolds::ManifoldField<f64>;
pub type Ray64 = manifolds::Ray<f64>;
pub type Intersection64 = manifolds::Intersection<f64>;
pub type Camera64 = renderer::Camera<f64>;
pub type ImageBuffer64 = renderer::ImageBuffer<f64>;
pub type LossWeights64 = losses::LossWeights<f64>;
pub type LossReport64 = losses::LossReport<f64>;
pub type FitReport64 = fitkit::FitReport<f64>;
pub type Adam64 = fitkit::Adam<f64>;
