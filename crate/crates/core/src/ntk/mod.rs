//! Reverse-mode gradients, empirical NTK entries and Gram matrices.

pub mod backward;
pub mod gram;

pub use backward::{backward, backward_factors, GradientSet, JacobianFactors, RankOne};
pub use gram::{
    avg_ntk_gram, f_through, f_through_factors, factor_gram, jacobian, ntk_entry, ntk_gram,
    GramMatrix,
};
