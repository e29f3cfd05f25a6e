//! Weight-sharing supernet NAS toolkit.
//!
//! Single-path supernet training (uniform and strictly fair sampling),
//! equivariant learnable stabilizers with exact fold-out, constrained
//! weighted NSGA-II search, and ranking diagnostics against exhaustively
//! trained ground truth.

pub mod cli;
pub mod dataset;
pub mod els;
pub mod engine;
pub mod evolution;
pub mod diagnostics;
pub mod error;
pub mod rng;
pub mod space;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
