//! Linear algebra services and the nonlinear structural solve: sparse
//! matrices, a direct LU factorization with partial pivoting (plain and
//! transpose solves from one factorization), and Newton–Raphson with
//! backtracking.

mod lu;
mod newton;
pub mod sparse;

pub use lu::{sparse_solve, sparse_solve_transpose, SparseLu};
pub use newton::{newton_solve, LineSearch, NewtonReport, NewtonSettings, NonlinearSystem};
pub use sparse::{CscMatrix, Triplets};
