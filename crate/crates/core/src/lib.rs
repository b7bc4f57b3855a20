//! Electrical impedance tomography with an unknown outer boundary and
//! unknown electrode positions.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for everyday use.

pub mod error;
pub mod forward;
pub mod geometry;
pub mod linalg;
pub mod mesher;
pub mod metrics;
pub mod phantoms;
pub mod priors;
pub mod quadrature;
pub mod recon;
pub mod scalar;
pub mod sensitivities;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Boundary = geometry::FourierBoundary<f64>;
pub type Layout = geometry::ElectrodeLayout<f64>;
pub type Mesh = mesher::Mesh2D<f64>;
pub type Grid = mesher::ReconGrid<f64>;
pub type Impedances = forward::ContactImpedances<f64>;
pub type Drives = forward::DriveBasis<f64>;
pub type System<'a> = forward::CemSystem<'a, f64>;
pub type Solution = forward::ForwardSolution<f64>;

pub type Boundary32 = geometry::FourierBoundary<f32>;
pub type Layout32 = geometry::ElectrodeLayout<f32>;
pub type Mesh32 = mesher::Mesh2D<f32>;
pub type Grid32 = mesher::ReconGrid<f32>;
