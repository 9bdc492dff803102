//! Sparse-view CT reconstruction with a learned sparse-autoencoder
//! regularizer. The variational objective
//!
//!   ||K u - y||^2 + alpha * ( sum_l w_l |E(u)_l| + (c/2) ||u - N(u)||^2 )
//!
//! couples data consistency with sparsity of the encoder coefficients and a
//! penalty for the distance to the learned image manifold; it is minimized
//! by ADMM with a soft-threshold coefficient update and a momentum gradient
//! image update.

pub mod grid;
pub mod net;
pub mod phantoms;
pub mod regularizer;
pub mod solver;
pub mod tomo;
pub mod training;

pub mod experiments;
