//! Coordinate descent for factorization models trained on implicit feedback.
//!
//! Unobserved context-item cells are never enumerated: for any model whose
//! score is a dot product `⟨φ(c), ψ(i)⟩` of a context-only and an item-only
//! map, their contribution to the objective and to every coordinate
//! derivative is computed from two small Gram matrices.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod feature;
pub mod io;
pub mod matrix;
pub mod mf;
pub mod model_file;
pub mod oracle;
pub mod params;
pub mod separable;
pub mod tensor;
pub mod train;

pub use config::{Lambdas, SolverConfig};
pub use error::{IcdError, Result};
pub use matrix::Matrix;
pub use params::{Coordinate, Family, ParamKind, ParamStore, UpdateTrace};
