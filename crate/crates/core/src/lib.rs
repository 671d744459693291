//! Depth-elastic residual networks trained so that every priority prefix of
//! their hidden units is a working model, plus the machinery to profile them
//! and ship them incrementally over a link budget.
//!
//! Module map:
//!
//! - [`nncore`]: tensors, parameters, SGD, gradient checking.
//! - [`arch`]: the residual network with its skip schemes, plus size and MAC accounting.
//! - [`policy`]: distributions over depth configurations.
//! - [`train`]: the layer-subset training loop and evaluation.
//! - [`data`]: the synthetic spiral benchmark and its binary file format.
//! - [`profile`]: the configuration → (size, MACs, error) lookup table.
//! - [`wire`]: the `.acdn` manifest / chunk format and partial assembly.
//! - [`protocol`]: framed messages and the endpoint and client state machines over real or simulated links.
//! - [`config`]: experiment configuration files.

pub mod arch;
pub mod config;
pub mod data;
mod error;
pub mod nncore;
pub mod policy;
pub mod profile;
pub mod protocol;
pub mod train;
pub mod wire;

pub use error::{Error, Result};
