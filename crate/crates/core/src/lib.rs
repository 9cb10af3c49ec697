//! Face verification with client-specific two-directional 2D discriminant
//! templates and an opponent-chroma skin-colour score.

// `!(a < b)` is how validation rejects NaN along with bad orderings.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod colorfeat;
pub mod decision;
pub mod discriminant;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod model;
pub mod subspace;

pub use error::{Error, Result};
