use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::MemError;
use crate::hw::{Loc, MachineConfig, OpType, Region};
use crate::lowering::{LoweredNode, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemId {
    Fm(u8),
    Pm,
}

/// Occupied arc `[start, start + len)` modulo the memory capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircularAlloc {
    pub mem: MemId,
    pub start: u32,
    pub len: u32,
    pub wrap: bool,
}

impl CircularAlloc {
    pub fn overlaps(&self, o: &CircularAlloc, capacity: u32) -> bool {
        let d1 = (o.start + capacity - self.start) % capacity;
        let d2 = (self.start + capacity - o.start) % capacity;
        self.mem == o.mem && (d1 < self.len || d2 < o.len)
    }
}

/// Final placement of one slice with the instructions and pipeline groups
/// between which it is live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceAlloc {
    pub id: u32,
    pub role: Role,
    pub alloc: CircularAlloc,
    pub first_instr: usize,
    pub last_instr: usize,
    pub first_group: usize,
    pub last_group: usize,
}

/// A slice live over the inclusive interval `[start, end]` (any monotone
/// time unit; the compiler uses pipeline group indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocRequest {
    pub id: u32,
    pub start: usize,
    pub end: usize,
    pub len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Bump pointer around the circle, falling back to the first free arc.
    CircularBump,
    /// Lowest offset that fits, never wrapping.
    FirstFit,
}

/// Place every request so that no two with intersecting intervals overlap.
pub fn allocate_circular(
    reqs: &[AllocRequest],
    mem: MemId,
    capacity: u32,
    policy: Policy,
) -> Result<BTreeMap<u32, CircularAlloc>, MemError> {
    let space = match mem {
        MemId::Fm(m) => format!("FM{m}"),
        MemId::Pm => "PM".to_string(),
    };
    let mut order: Vec<&AllocRequest> = reqs.iter().collect();
    order.sort_by_key(|r| (r.start, r.id));
    let mut out = BTreeMap::new();
    let mut active: Vec<(usize, CircularAlloc)> = Vec::new();
    let mut ptr = 0u32;
    for r in order {
        if r.len > capacity || r.len == 0 {
            return Err(MemError::OutOfMemory { space, need: r.len as u64, capacity: capacity as u64 });
        }
        active.retain(|(end, _)| *end >= r.start);
        let arc = |start: u32| CircularAlloc { mem, start, len: r.len, wrap: start + r.len > capacity };
        let free = |a: &CircularAlloc| active.iter().all(|(_, b)| !a.overlaps(b, capacity));
        let mut starts: Vec<u32> = vec![0];
        starts.extend(active.iter().map(|(_, b)| (b.start + b.len) % capacity));
        starts.sort_unstable();
        starts.dedup();
        let found = match policy {
            Policy::CircularBump => Some(arc(ptr)).filter(free).or_else(|| starts.iter().map(|&s| arc(s)).find(free)),
            Policy::FirstFit => starts.iter().map(|&s| arc(s)).find(|a| !a.wrap && free(a)),
        };
        let Some(a) = found else {
            let live: u64 = active.iter().map(|(_, b)| b.len as u64).sum();
            return Err(MemError::OutOfMemory { space, need: live + r.len as u64, capacity: capacity as u64 });
        };
        ptr = (a.start + a.len) % capacity;
        active.push((r.end, a));
        out.insert(r.id, a);
    }
    Ok(out)
}

/// Local memories one pipeline stage class reads and writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAccess {
    pub class: OpType,
    pub reads: BTreeSet<Role>,
    pub writes: BTreeSet<Role>,
}

/// Per stage class, the slice roles a lowered node's instructions touch.
pub fn stage_accesses(n: &LoweredNode) -> Vec<StageAccess> {
    let role: BTreeMap<u32, Role> = n.slices.iter().map(|s| (s.id, s.role)).collect();
    let mut out = Vec::new();
    for class in crate::lowering::TileStages::CLASSES {
        let mut acc = StageAccess { class, reads: BTreeSet::new(), writes: BTreeSet::new() };
        let mut any = false;
        for t in &n.tiles {
            for ins in t.stage(class) {
                any = true;
                for a in ins.accesses() {
                    if let Region::Local { loc: Loc::Slice { id, .. }, .. } = a.region {
                        let r = role[&id];
                        if a.write {
                            acc.writes.insert(r);
                        } else {
                            acc.reads.insert(r);
                        }
                    }
                }
            }
        }
        if any {
            out.push(acc);
        }
    }
    out
}

/// FM memory of each slice role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FmAssignment {
    pub mem_of_role: [u8; 3],
}

impl FmAssignment {
    /// Load, conv and misc outputs in memories 0, 1 and 2 (modulo the count).
    pub fn by_role(cfg: &MachineConfig) -> Self {
        let m = cfg.fm_memories.max(1) as u8;
        FmAssignment { mem_of_role: [0, 1 % m, 2 % m] }
    }

    pub fn mem(&self, role: Role) -> MemId {
        match role {
            Role::Param => MemId::Pm,
            r => MemId::Fm(self.mem_of_role[r.index()]),
        }
    }
}

/// Pairs of concurrent stage classes that would share a read or write port,
/// with the contested memory.
pub fn port_conflicts(concurrent: &[StageAccess], a: &FmAssignment) -> Vec<(OpType, OpType, u8)> {
    let mems = |roles: &BTreeSet<Role>| -> BTreeSet<u8> {
        roles
            .iter()
            .filter_map(|&r| match a.mem(r) {
                MemId::Fm(m) => Some(m),
                MemId::Pm => None,
            })
            .collect()
    };
    let mut out = Vec::new();
    for (i, x) in concurrent.iter().enumerate() {
        for y in &concurrent[i + 1..] {
            let reads = mems(&x.reads).intersection(&mems(&y.reads)).next().copied();
            let writes = mems(&x.writes).intersection(&mems(&y.writes)).next().copied();
            if let Some(m) = reads.or(writes) {
                out.push((x.class, y.class, m));
            }
        }
    }
    out
}

/// Role-based FM assignment, checked against every set of stages that may
/// run concurrently.
pub fn assign_fm_memories(concurrent_sets: &[Vec<StageAccess>], cfg: &MachineConfig) -> Result<FmAssignment, MemError> {
    let a = FmAssignment::by_role(cfg);
    for set in concurrent_sets {
        if let Some((x, y, mem)) = port_conflicts(set, &a).into_iter().next() {
            return Err(MemError::PortConflict { mem, detail: format!("{x} and {y} contend for one port") });
        }
    }
    Ok(a)
}
