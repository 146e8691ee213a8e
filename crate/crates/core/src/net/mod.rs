//! Architectures, weight sampling, forward passes and reduced networks.

pub mod arch;
pub mod forward;
pub mod weights;

pub use arch::{build_arch, Alphas, ArchKind, ArchitectureSpec, MatrixId, WeightIndex};
pub use forward::{forward, relu_site, ForwardTrace};
pub use weights::{sample_weights, sample_weights_with, WeightSet};

/// Functional form of [`ArchitectureSpec::reduce`].
pub fn reduce(spec: &ArchitectureSpec, k: WeightIndex) -> crate::Result<ArchitectureSpec> {
    spec.reduce(k)
}
