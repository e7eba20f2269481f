//! Abstract machine: memories, the four-type instruction set, its text form
//! and the cost model.

pub mod asm;
pub mod config;
pub mod cost;
pub mod isa;

pub use asm::{emit_assembly, parse_assembly};
pub use config::MachineConfig;
pub use cost::instruction_cost;
pub use isa::*;
