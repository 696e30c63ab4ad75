//! A desk-scale laboratory for interleaved-head attention (IHA).
//!
//! The crate implements plain multi-head attention and IHA from scratch over
//! a minimal f64 tensor core, mechanically verifies the constructive
//! expressivity results (superset embedding, polynomial-filter banks, the
//! CPM-3 counting task) against brute-force oracles, generates the synthetic
//! multi-hop reasoning datasets, and trains single-layer toy models with a
//! tape-based reverse-mode autodiff engine.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod constructions;
pub mod error;
pub mod iha;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Mask, Tensor};
