//! Dense and sparse linear algebra used by the solver.

pub mod dense;
pub mod sparse;

pub use dense::{Cholesky, Matrix};
pub use sparse::{SparseCholesky, SparseSym, TripletBuilder};
