//! Dense matrix kernels, the differentiation tape, and their verification
//! tooling.

mod gradcheck;
mod matrix;
pub mod ops;
mod pca;
mod tape;

pub use gradcheck::finite_diff_check;
pub use matrix::Matrix;
pub use ops::{cross_entropy, matmul, softmax_temp, transposed_conv2d};
pub use pca::pca2d;
pub use tape::{NodeId, Tape};
