//! Every Rust block in the guide runs as a doctest of this crate.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/imaging.md")]
pub mod imaging {}

#[doc = include_str!("../../../book/src/subspace.md")]
pub mod subspace {}

#[doc = include_str!("../../../book/src/templates.md")]
pub mod templates {}

#[doc = include_str!("../../../book/src/colour.md")]
pub mod colour {}

#[doc = include_str!("../../../book/src/decision.md")]
pub mod decision {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
