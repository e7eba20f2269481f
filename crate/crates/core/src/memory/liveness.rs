use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::MemError;
use crate::hw::{Instruction, Loc, Region};

/// Instruction indices between which a slice holds data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveRange {
    pub slice: u32,
    pub first_write: usize,
    pub last_read: usize,
    /// Written but never read; the range collapses to the write.
    pub dead: bool,
}

/// Per-slice live ranges over an issue-ordered stream, sorted by slice id.
pub fn compute_liveness(instrs: &[Instruction]) -> Result<Vec<LiveRange>, MemError> {
    let mut ranges: BTreeMap<u32, LiveRange> = BTreeMap::new();
    for (i, ins) in instrs.iter().enumerate() {
        let acc = ins.accesses();
        // Reads happen before writes within one instruction.
        for a in acc.iter().filter(|a| !a.write) {
            if let Region::Local { loc: Loc::Slice { id, .. }, .. } = a.region {
                let r = ranges.get_mut(&id).ok_or(MemError::UseBeforeDef { slice: id, at: i })?;
                r.last_read = i;
                r.dead = false;
            }
        }
        for a in acc.iter().filter(|a| a.write) {
            if let Region::Local { loc: Loc::Slice { id, .. }, .. } = a.region {
                ranges.entry(id).or_insert(LiveRange { slice: id, first_write: i, last_read: i, dead: true });
            }
        }
    }
    Ok(ranges.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::{Op, Transfer};

    fn load(id: u32) -> Instruction {
        Instruction::new(Op::Load(Transfer { ddr: 0, chunk: 4, count: 1, stride: 4, local: Loc::slice(id) }))
    }

    fn save(id: u32) -> Instruction {
        Instruction::new(Op::Save(Transfer { ddr: 64, chunk: 4, count: 1, stride: 4, local: Loc::slice(id) }))
    }

    #[test]
    fn write_then_reads() {
        let r = compute_liveness(&[load(1), save(1), load(2), save(1)]).unwrap();
        assert_eq!(r[0], LiveRange { slice: 1, first_write: 0, last_read: 3, dead: false });
        assert!(r[1].dead);
        assert_eq!((r[1].first_write, r[1].last_read), (2, 2));
    }

    #[test]
    fn read_before_write_is_an_error() {
        assert_eq!(compute_liveness(&[save(5)]), Err(MemError::UseBeforeDef { slice: 5, at: 0 }));
    }
}
