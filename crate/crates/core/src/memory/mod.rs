//! Address assignment: the DDR segment layout, liveness of local slices and
//! their placement in the circular FM and PM memories.

mod alloc;
mod ddr;
mod liveness;

pub use alloc::{
    allocate_circular, assign_fm_memories, port_conflicts, stage_accesses, AllocRequest, CircularAlloc, FmAssignment,
    MemId, Policy, SliceAlloc, StageAccess,
};
pub use ddr::{ddr_layout, DdrLayout, Segment, SegmentKind, TensorPlace};
pub use liveness::{compute_liveness, LiveRange};
