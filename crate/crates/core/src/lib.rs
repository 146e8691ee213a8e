//! Finite-width neural tangent kernels of vanilla, residual and densely
//! connected ReLU networks, their infinite-width limits, and Monte Carlo
//! harnesses for the moment identities relating them.
//!
//! The network, gradient and kernel code is generic over [`Scalar`] (`f32` or
//! `f64`); the aliases below fix the scalar for the common cases. Statistical
//! labs and the CLI run in `f64`.

pub mod cli;
pub mod duality;
pub mod error;
pub mod kreg;
pub mod limit;
pub mod net;
pub mod ntk;
pub mod numerics;
pub mod scalar;
pub mod variance;

pub use error::{Error, Result};
pub use net::{ArchKind, ArchitectureSpec, MatrixId, WeightIndex};
pub use numerics::{MomentEstimate, RngStream};
pub use scalar::Scalar;

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type WeightSet64 = net::WeightSet<f64>;
pub type WeightSet32 = net::WeightSet<f32>;
pub type ForwardTrace64 = net::ForwardTrace<f64>;
pub type ForwardTrace32 = net::ForwardTrace<f32>;
pub type GradientSet64 = ntk::GradientSet<f64>;
pub type GradientSet32 = ntk::GradientSet<f32>;
pub type GramMatrix64 = ntk::GramMatrix<f64>;
pub type GramMatrix32 = ntk::GramMatrix<f32>;
pub type BivariateCov64 = limit::BivariateCov<f64>;
pub type BivariateCov32 = limit::BivariateCov<f32>;
