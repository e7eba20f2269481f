//! Compiler and simulator for an abstract int8 CNN accelerator with four
//! instruction queues (LOAD, SAVE, CONV, MISC) synchronized by typed
//! dependencies.
//!
//! The pass pipeline is: [`graph::parse_graph`] → [`graph::fold_constants_and_quantizers`]
//! → [`graph::fuse_superlayers`] → schedule → [`lowering`] → [`pipeline`] →
//! [`memory`] allocation, driven by [`compile::compile`]. The [`sim`] module
//! executes the result functionally and in time.

pub mod compile;
pub mod corpus;
pub mod error;
pub mod graph;
pub mod hw;
pub mod lowering;
pub mod memory;
pub mod pipeline;
pub mod quant;
pub mod sim;
