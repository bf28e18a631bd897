//! Dense linear algebra and reproducible random streams shared by every
//! other module. Everything is `f64`.

mod linalg;
mod matrix;
mod rng;
mod svd;

pub use linalg::{cholesky_solve, Cholesky, mean, pearson, std_dev};
pub use matrix::Matrix;
pub(crate) use matrix::gemm;
pub use rng::{derive_stream, permutation, RngStream};
pub use svd::{svd, Svd};
