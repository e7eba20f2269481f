//! Execution of graphs and compiled programs.

pub mod functional;
pub mod hazards;
pub mod reference;
pub mod timeline;
pub mod timing;

pub use functional::{run_functional, MachineState, Memory};
pub use hazards::{check_hazards, Hazard, HazardContext, HazardKind};
pub use reference::reference_execute;
pub use timeline::{emit_timeline, TimelineFormat};
pub use timing::{run_timing, ColorClass, Trace, TraceEvent};
