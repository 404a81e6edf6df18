//! Dense matrices, Cholesky solves, temperature softmax and the seeded RNG.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{cholesky, cholesky_solve, damp, softmax_with_temperature, solve_with_factor, spd_inverse};
pub use matrix::Matrix;
pub use rng::Rng;
