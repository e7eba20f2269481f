//! Post-hoc validation of a timed program: data races at byte granularity,
//! overlapping live allocations, FM port oversubscription and DDR segment
//! discipline.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::timing::Trace;
use crate::hw::{Loc, MachineConfig, Op, Program, Region};
use crate::memory::{DdrLayout, MemId, SegmentKind, SliceAlloc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HazardKind {
    ReadBeforeWrite,
    WriteAfterRead,
    WriteAfterWrite,
    AllocationOverlap,
    PortConflict,
    Segment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hazard {
    pub kind: HazardKind,
    pub instr: usize,
    pub other: Option<usize>,
    pub detail: String,
}

pub struct HazardContext<'a> {
    pub cfg: &'a MachineConfig,
    pub layout: Option<&'a DdrLayout>,
    pub slices: &'a [SliceAlloc],
}

/// Entries kept per hazard kind.
const LIMIT: usize = 64;

struct Report {
    out: Vec<Hazard>,
    seen: BTreeSet<(HazardKind, usize, Option<usize>)>,
}

impl Report {
    fn add(&mut self, kind: HazardKind, instr: usize, other: Option<usize>, detail: impl FnOnce() -> String) {
        if self.out.iter().filter(|h| h.kind == kind).count() < LIMIT && self.seen.insert((kind, instr, other)) {
            self.out.push(Hazard { kind, instr, other, detail: detail() });
        }
    }
}

/// Byte ranges `(space, range)` of a region; space 0 is DDR, 1 is PM and
/// `2 + m` is FM memory `m`. Circular memories split at the wrap.
fn spans(r: Region, cfg: &MachineConfig) -> Vec<(usize, std::ops::Range<usize>)> {
    let circ = |space: usize, addr: u64, len: u32, cap: u64| {
        let a = (addr % cap) as usize;
        let (len, cap) = (len as usize, cap as usize);
        if a + len <= cap {
            vec![(space, a..a + len)]
        } else {
            vec![(space, a..cap), (space, 0..a + len - cap)]
        }
    };
    match r {
        Region::Ddr { addr, len } => vec![(0, addr as usize..addr as usize + len as usize)],
        Region::Local { loc: Loc::Pm { addr }, len } => circ(1, addr as u64, len, cfg.pm_bytes as u64),
        Region::Local { loc: Loc::Fm { mem, addr }, len } => {
            circ(2 + mem as usize, addr as u64, len, cfg.fm_capacity() as u64)
        }
        Region::Local { loc: Loc::Slice { .. }, .. } => vec![],
    }
}

/// Empty iff the program is race-free under `trace` and respects the
/// allocation, port and segment rules.
pub fn check_hazards(p: &Program, trace: &Trace, ctx: &HazardContext) -> Vec<Hazard> {
    let cfg = ctx.cfg;
    let mut rep = Report { out: Vec::new(), seen: BTreeSet::new() };
    let ev = &trace.events;
    let accesses: Vec<_> = p.instrs.iter().map(|i| i.accesses()).collect();

    // Byte-level ordering against the issue-order semantics.
    let ddr_size = accesses
        .iter()
        .flatten()
        .filter_map(|a| match a.region {
            Region::Ddr { addr, len } => Some(addr as usize + len as usize),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let sizes = {
        let mut v = vec![ddr_size, cfg.pm_bytes as usize];
        v.extend((0..cfg.fm_memories).map(|_| cfg.fm_capacity() as usize));
        v
    };
    let mut last_write: Vec<Vec<u32>> = sizes.iter().map(|&n| vec![u32::MAX; n]).collect();
    let mut read_end: Vec<Vec<(u64, u32)>> = sizes.iter().map(|&n| vec![(0, u32::MAX); n]).collect();
    for (i, acc) in accesses.iter().enumerate() {
        let (start, end) = (ev[i].start, ev[i].end());
        for a in acc.iter().filter(|a| !a.write) {
            for (s, r) in spans(a.region, cfg) {
                let Some(lw) = last_write.get(s) else { continue };
                for b in r.clone() {
                    let w = lw[b];
                    if w != u32::MAX && ev[w as usize].end() > start {
                        rep.add(HazardKind::ReadBeforeWrite, i, Some(w as usize), || {
                            format!("reads space {s} byte {b} before instruction {w} finishes writing it")
                        });
                        break;
                    }
                }
            }
        }
        for a in acc.iter().filter(|a| a.write) {
            for (s, r) in spans(a.region, cfg) {
                if s >= last_write.len() {
                    continue;
                }
                for b in r.clone() {
                    let w = last_write[s][b];
                    if w != u32::MAX && w as usize != i && ev[w as usize].end() > start {
                        rep.add(HazardKind::WriteAfterWrite, i, Some(w as usize), || {
                            format!("overwrites space {s} byte {b} while instruction {w} still writes it")
                        });
                        break;
                    }
                    let (re, rd) = read_end[s][b];
                    if rd != u32::MAX && rd as usize != i && re > start {
                        rep.add(HazardKind::WriteAfterRead, i, Some(rd as usize), || {
                            format!("overwrites space {s} byte {b} while instruction {rd} still reads it")
                        });
                        break;
                    }
                }
            }
        }
        for a in acc.iter().filter(|a| !a.write) {
            for (s, r) in spans(a.region, cfg) {
                if let Some(re) = read_end.get_mut(s) {
                    for b in r {
                        if re[b].0 <= end {
                            re[b] = (end, i as u32);
                        }
                    }
                }
            }
        }
        for a in acc.iter().filter(|a| a.write) {
            for (s, r) in spans(a.region, cfg) {
                if s < last_write.len() {
                    for b in r {
                        last_write[s][b] = i as u32;
                        read_end[s][b] = (0, u32::MAX);
                    }
                }
            }
        }
    }

    // Live allocations in one memory must be disjoint while both are in use.
    let mut allocs: Vec<(u64, u64, &SliceAlloc)> = ctx
        .slices
        .iter()
        .filter(|s| s.first_instr < ev.len() && s.last_instr < ev.len())
        .map(|s| (ev[s.first_instr].start, ev[s.last_instr].end(), s))
        .collect();
    allocs.sort_by_key(|a| (a.0, a.2.id));
    let mut active: Vec<(u64, &SliceAlloc)> = Vec::new();
    for &(s, e, a) in &allocs {
        active.retain(|x| x.0 > s);
        for &(_, b) in &active {
            let cap = match a.alloc.mem {
                MemId::Pm => cfg.pm_bytes,
                MemId::Fm(_) => cfg.fm_capacity(),
            };
            if a.alloc.overlaps(&b.alloc, cap) {
                rep.add(HazardKind::AllocationOverlap, a.first_instr, Some(b.first_instr), || {
                    format!("slices {} and {} share bytes of {:?} while both are live", b.id, a.id, a.alloc.mem)
                });
            }
        }
        active.push((e, a));
    }

    // One reader and one writer per FM memory at any time.
    let mut ports: Vec<(u64, u64, usize, usize, bool)> = Vec::new();
    for (i, acc) in accesses.iter().enumerate() {
        let mut seen = BTreeSet::new();
        for a in acc {
            if let Region::Local { loc: Loc::Fm { mem, .. }, .. } = a.region {
                if seen.insert((mem, a.write)) {
                    ports.push((ev[i].start, ev[i].end(), i, mem as usize, a.write));
                }
            }
        }
    }
    ports.sort();
    let mut busy: Vec<(u64, usize, usize, bool)> = Vec::new();
    for &(s, e, i, mem, write) in &ports {
        busy.retain(|x| x.0 > s);
        if let Some(o) = busy.iter().find(|x| x.2 == mem && x.3 == write && x.1 != i) {
            let (a, b) = (o.1.min(i), o.1.max(i));
            rep.add(HazardKind::PortConflict, b, Some(a), || {
                format!(
                    "FM{mem} {} port used by instructions {a} and {b} at once",
                    if write { "write" } else { "read" }
                )
            });
        }
        if e > s {
            busy.push((e, i, mem, write));
        }
    }

    // DDR segment discipline.
    if let Some(l) = ctx.layout {
        for (i, ins) in p.instrs.iter().enumerate() {
            let (t, allowed): (_, &[SegmentKind]) = match &ins.op {
                Op::Save(t) => (t, &[SegmentKind::Outputs, SegmentKind::Swap]),
                Op::Load(t) if t.local.is_pm() => (t, &[SegmentKind::Parameters]),
                Op::Load(t) => (t, &[SegmentKind::Inputs, SegmentKind::Outputs, SegmentKind::Swap]),
                _ => continue,
            };
            for (addr, len) in t.ddr_chunks() {
                let seg = l.segment_of(addr, len as u64);
                if !seg.is_some_and(|s| allowed.contains(&s)) {
                    rep.add(HazardKind::Segment, i, None, || {
                        format!("{} touches DDR [{addr}, {}) in {seg:?}", ins.sub_op(), addr + len as u64)
                    });
                    break;
                }
            }
        }
    }
    rep.out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::{Instruction, Transfer};
    use crate::lowering::Role;
    use crate::memory::CircularAlloc;
    use crate::sim::timing::run_timing;

    fn xfer(load: bool, ddr: u64, local: Loc, n: u32) -> Instruction {
        let t = Transfer { ddr, chunk: n, count: 1, stride: n as u64, local };
        Instruction::new(if load { Op::Load(t) } else { Op::Save(t) })
    }

    fn fm(addr: u32) -> Loc {
        Loc::Fm { mem: 0, addr }
    }

    #[test]
    fn ordered_program_is_clean() {
        let cfg = MachineConfig::default();
        let mut l = xfer(true, 0, fm(0), 64);
        l.deps.dpby.insert(crate::hw::OpType::Save);
        let mut s = xfer(false, 64, fm(0), 64);
        s.deps.dpon.insert(crate::hw::OpType::Load);
        let p = Program { instrs: vec![l, s] };
        let t = run_timing(&p, &cfg).unwrap();
        assert!(check_hazards(&p, &t, &HazardContext { cfg: &cfg, layout: None, slices: &[] }).is_empty());
    }

    #[test]
    fn dropped_wait_is_a_read_before_write() {
        let cfg = MachineConfig::default();
        let p = Program { instrs: vec![xfer(true, 0, fm(0), 64), xfer(false, 64, fm(0), 64)] };
        let t = run_timing(&p, &cfg).unwrap();
        let h = check_hazards(&p, &t, &HazardContext { cfg: &cfg, layout: None, slices: &[] });
        assert!(h.iter().any(|h| h.kind == HazardKind::ReadBeforeWrite && h.instr == 1 && h.other == Some(0)));
    }

    #[test]
    fn overlapping_live_slices_are_reported() {
        let cfg = MachineConfig::default();
        let p = Program { instrs: vec![xfer(true, 0, fm(0), 64), xfer(true, 64, fm(32), 64)] };
        let t = run_timing(&p, &cfg).unwrap();
        let slice = |id, start, i| SliceAlloc {
            id,
            role: Role::Load,
            alloc: CircularAlloc { mem: MemId::Fm(0), start, len: 64, wrap: false },
            first_instr: i,
            last_instr: 1,
            first_group: 0,
            last_group: 0,
        };
        let slices = [slice(0, 0, 0), slice(1, 32, 1)];
        let h = check_hazards(&p, &t, &HazardContext { cfg: &cfg, layout: None, slices: &slices });
        assert!(h.iter().any(|h| h.kind == HazardKind::AllocationOverlap));
        // Same queue, so the two writes to FM0 never coincide.
        assert!(!h.iter().any(|h| h.kind == HazardKind::PortConflict));
    }

    #[test]
    fn concurrent_writers_of_one_memory_conflict() {
        let cfg = MachineConfig::default();
        let mv = Instruction::new(Op::Move(crate::hw::MoveOp {
            zero: vec![fm(512)],
            zero_bytes: 64,
            rows: vec![],
            cols: 0,
            ch: 0,
            pitch: 0,
            shift: 0,
        }));
        let p = Program { instrs: vec![xfer(true, 0, fm(0), 64), mv] };
        let t = run_timing(&p, &cfg).unwrap();
        assert_eq!(t.events[0].start, t.events[1].start);
        let h = check_hazards(&p, &t, &HazardContext { cfg: &cfg, layout: None, slices: &[] });
        assert!(h.iter().any(|h| h.kind == HazardKind::PortConflict && h.instr == 1 && h.other == Some(0)), "{h:?}");
    }
}
