//! Numerical laboratory for inclusion identification in isotropic linear
//! elasticity: forward FEM solves, discrete Dirichlet-to-Neumann maps,
//! fundamental matrices and empirical stability experiments.

pub mod bounds_lab;
pub mod cli;
pub mod dtn;
pub mod error;
pub mod geometry;
pub mod greens;
pub mod mesh_fem;
pub mod recon_norms;
pub mod scalar;
pub mod stability_harness;
pub mod tensor_field;

pub use error::{Error, Result};
pub use geometry::{DomainSpec, InclusionGeometry, ProbeFrame, ProbeSelection, SurfaceSample};
pub use scalar::Real;
pub use tensor_field::{IsotropicTensor, LameField, PiecewiseTensor};

pub type DomainF64 = DomainSpec<f64>;
pub type DomainF32 = DomainSpec<f32>;
pub type InclusionF64 = InclusionGeometry<f64>;
pub type InclusionF32 = InclusionGeometry<f32>;
pub type TensorF64 = IsotropicTensor<f64>;
pub type TensorF32 = IsotropicTensor<f32>;
pub type CompositeF64 = PiecewiseTensor<f64>;
pub type CompositeF32 = PiecewiseTensor<f32>;
