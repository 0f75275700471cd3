//! Radial-parallel autoregressive generation over discrete token grids.
//!
//! Grids are decoded ring by ring: each step feeds a nested rectangular
//! extent whose interior holds the tokens generated so far and whose border
//! holds prompt placeholders, predicts every border token in parallel, and
//! optionally revises the interior.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod grid;
pub mod infer;
pub mod linalg;
pub mod mask;
pub mod model;
pub mod optim;
pub mod par;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
