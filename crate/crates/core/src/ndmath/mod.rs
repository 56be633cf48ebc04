//! Dense linear algebra, seeded sampling and reverse-mode differentiation.

pub mod linalg;
pub mod matrix;
pub mod rng;
pub mod tape;

pub use linalg::{pseudo_inverse, svd, Svd, DEFAULT_RCOND};
pub use matrix::{gemm, Matrix};
pub use rng::{sample_gaussian, Rng};
pub use tape::{backward, softmax_columns, Gradients, Tape, Var};
