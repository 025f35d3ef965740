//! Dense linear algebra, decompositions and seeded sampling.

mod io;
mod linalg;
mod matrix;
mod rng;

pub use io::{format_g17, read_binary, read_csv, write_binary, write_csv};
pub use linalg::{
    frobenius_norm, gemm, gram_residual, matmul, matmul_op, matvec, max_abs, power_iteration_sigma_max,
    sample_uniform_orthogonal, singular_values, svd, Op, SvdResult, DEFAULT_POWER_ITERS,
};
pub use matrix::Matrix;
pub use rng::RngState;

#[cfg(test)]
pub(crate) use linalg::oracle;
