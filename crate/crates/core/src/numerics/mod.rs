//! Random streams, dense matrices, SPD solves and streaming statistics.

pub mod linalg;
pub mod matrix;
pub mod rng;
pub mod stats;

pub use linalg::{cholesky, spd_solve};
pub use matrix::{dot, gaussian_matrix, norm_sq, Matrix};
pub use rng::{splitmix64, standard_normal, RngStream, StreamRng};
pub use stats::{map_draws, pearson, spearman, MomentEstimate};
