//! Sequential fault diagnosis of combinational circuits.
//!
//! Circuits are compiled into smooth d-DNNF; measurements are proposed one
//! at a time from posterior failure probabilities and wire entropies, and
//! structural abstraction keeps the compiled models small.

pub mod abstraction;
pub mod bundled;
pub mod circuit;
pub mod cloning;
pub mod compile;
pub mod costmodel;
pub mod diagnose;
pub mod encode;
pub mod gen;
pub mod harness;

#[cfg(test)]
pub(crate) mod testutil;
