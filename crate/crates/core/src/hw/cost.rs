//! Linear work model: cycles = ceil(work / rate) + fixed issue overhead.

use super::config::MachineConfig;
use super::isa::{Instruction, Op};

/// Work units of an instruction: bytes for transfers, MACs for CONV,
/// produced elements (times the window for pooling) for MISC.
pub fn instruction_work(i: &Instruction) -> u64 {
    match &i.op {
        Op::Load(t) | Op::Save(t) => t.bytes(),
        Op::Conv(c) => c.macs(),
        Op::Pool(p) => {
            p.output.len() as u64 * p.out_cols as u64 * p.ch as u64 * p.kernel[0] as u64 * p.kernel[1] as u64
        }
        Op::Elt(e) => e.output.len() as u64 * e.row_bytes as u64,
        Op::Move(m) => m.zero.len() as u64 * m.zero_bytes as u64 + m.rows.len() as u64 * m.cols as u64 * m.ch as u64,
        Op::Nop(_) => 0,
    }
}

pub fn instruction_cost(i: &Instruction, cfg: &MachineConfig) -> u64 {
    let work = instruction_work(i);
    let rate = match &i.op {
        Op::Load(_) | Op::Save(_) => cfg.ddr_bytes_per_cycle,
        Op::Conv(_) => cfg.conv_macs_per_cycle,
        Op::Pool(_) | Op::Elt(_) | Op::Move(_) => cfg.misc_elems_per_cycle,
        Op::Nop(_) => 1,
    } as u64;
    (work.div_ceil(rate) + cfg.issue_overhead as u64).max(1)
}
