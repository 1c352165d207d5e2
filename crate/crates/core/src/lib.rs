//! Low-rank adapter gradient descent with executable convergence checks.
//!
//! The adapter factors `B` (`m x r`) and `A` (`r x n`) are handled as one
//! stacked matrix `V = [B; A^T]`, so that `J(V) = L(BA)` and its gradient can
//! be analysed as a single symmetric factorization.

pub mod adapter;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod optimizer;
pub mod rng;
pub mod trace_csv;
pub mod verification;

pub use adapter::StackedAdapter;
pub use error::{Error, Result};
pub use losses::SmoothLoss;
pub use matrix::Matrix;
pub use optimizer::{IterateRecord, LoraTrace, Trace};
