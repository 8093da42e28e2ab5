//! Sparse self-attention by pruning low-weight attention connections.
//!
//! Two pruning schemes are provided: a fixed per-row mean threshold shared
//! across heads, and a learnable per-layer threshold trained through a
//! sigmoid relaxation and then applied as a hard mask. They run inside a
//! small non-autoregressive encoder/decoder trained on a synthetic
//! regression task with a controllable domain shift.

pub mod attention;
pub mod checks;
pub mod container;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
