//! Deterministic dense linear algebra, seeded randomness, and reverse-mode
//! gradients. Everything downstream builds on this module.

mod matrix;
pub mod reference;
mod rng;
mod solve;
mod tape;

pub use matrix::{frobenius_norm, matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{Rng, RNG_ALGORITHM};
pub use solve::{solve_spd, Ridge};
pub use tape::{GradMap, NodeId, Tape};
