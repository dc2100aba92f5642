//! Derivative-free optimizers used by policy learning.

pub mod cobyla;
pub mod genetic;
pub mod nelder_mead;

pub use cobyla::{cobyla_solve, minimize, CobylaOptions, CobylaResult, ConstraintFn, TracePoint};
pub use genetic::{genetic_search, GeneticOptions, GeneticResult};
pub use nelder_mead::{nelder_mead, NelderMeadOptions, NelderMeadResult};
