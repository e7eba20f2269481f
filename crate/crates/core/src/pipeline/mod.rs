//! Software pipelining of a node's tiles and typed-dependency assignment.
//!
//! Tile `t`'s stage `j` (over the stage classes the node uses, in L, C, P, S
//! order) runs in group `t + j`. Each group ends with a pacemaker: a SAVE
//! no-op that waits on every started non-SAVE class of the group and that the
//! first instruction of each class in the next group waits on. Inside a
//! queue, instructions run in issue order, so one dependency per stage
//! boundary is enough.

use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::hw::{DepSets, Instruction, OpType, TypeSet};
use crate::lowering::TileStages;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Head,
    Steady,
    Tail,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub instr: Instruction,
    pub group: usize,
    /// Stage class the instruction belongs to.
    pub class: OpType,
    pub tile: Option<usize>,
    pub phase: Phase,
    /// For pacemakers, the classes it waits on; `None` otherwise.
    pub pacemaker: Option<TypeSet>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinedStream {
    pub slots: Vec<Slot>,
    pub pipelined: bool,
    /// Class pairs `(x, y)` where `y` must not start in a group before `x`
    /// of the same group has finished.
    pub serialize: Vec<(OpType, OpType)>,
    /// Work issued before this stream must be complete before it starts.
    pub after_barrier: bool,
    pub groups: usize,
}

impl PipelinedStream {
    pub fn instructions(&self) -> Vec<Instruction> {
        self.slots.iter().map(|s| s.instr.clone()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineOptions {
    pub pipelined: bool,
    pub serialize: Vec<(OpType, OpType)>,
    pub after_barrier: bool,
}

/// Order the tiles' stages into groups. Pipelining needs at least two tiles
/// and a non-SAVE stage; otherwise stages are chained one after another.
pub fn pipeline(tiles: &[TileStages], opts: &PipelineOptions) -> PipelinedStream {
    let classes: Vec<OpType> =
        TileStages::CLASSES.into_iter().filter(|&c| tiles.iter().any(|t| !t.stage(c).is_empty())).collect();
    let k = tiles.len();
    let d = classes.len();
    let pipelined = opts.pipelined && k >= 2 && classes.iter().any(|&c| c != OpType::Save);
    let mut slots = Vec::new();
    let mut groups = 0;
    if pipelined {
        groups = k + d - 1;
        for g in 0..groups {
            let phase = if g + 1 < d {
                Phase::Head
            } else if g < k {
                Phase::Steady
            } else {
                Phase::Tail
            };
            let mut started = TypeSet::EMPTY;
            for (j, &c) in classes.iter().enumerate() {
                if j > g {
                    break;
                }
                if c != OpType::Save {
                    started.insert(c);
                }
                let t = g - j;
                if t < k {
                    for ins in tiles[t].stage(c) {
                        slots.push(Slot {
                            instr: ins.clone(),
                            group: g,
                            class: c,
                            tile: Some(t),
                            phase,
                            pacemaker: None,
                        });
                    }
                }
            }
            let instr = Instruction::nop(OpType::Save);
            slots.push(Slot { instr, group: g, class: OpType::Save, tile: None, phase, pacemaker: Some(started) });
        }
    } else {
        let mut last = None;
        for (t, tile) in tiles.iter().enumerate() {
            for &c in &classes {
                let stage = tile.stage(c);
                if stage.is_empty() {
                    continue;
                }
                for ins in stage {
                    slots.push(Slot {
                        instr: ins.clone(),
                        group: groups,
                        class: c,
                        tile: Some(t),
                        phase: Phase::Sequential,
                        pacemaker: None,
                    });
                }
                groups += 1;
                last = Some(c);
            }
        }
        if let Some(c) = last.filter(|&c| c != OpType::Save) {
            // A node ends on a SAVE so the next node can wait on it.
            let instr = Instruction::nop(OpType::Save);
            slots.push(Slot {
                instr,
                group: groups,
                class: OpType::Save,
                tile: None,
                phase: Phase::Sequential,
                pacemaker: Some(TypeSet::of(&[c])),
            });
            groups += 1;
        }
    }
    PipelinedStream { slots, pipelined, serialize: opts.serialize.clone(), after_barrier: opts.after_barrier, groups }
}

/// Add a no-op to every group in which a class the pacemaker waits on has no
/// instruction, so the wait resolves inside the group.
pub fn insert_noops(mut s: PipelinedStream) -> PipelinedStream {
    if !s.pipelined {
        return s;
    }
    let mut out = Vec::with_capacity(s.slots.len());
    let mut start = 0;
    while start < s.slots.len() {
        let g = s.slots[start].group;
        let end = start + s.slots[start..].iter().take_while(|x| x.group == g).count();
        let group = &s.slots[start..end];
        let waits = group.last().and_then(|p| p.pacemaker).unwrap_or(TypeSet::EMPTY);
        let phase = group[0].phase;
        for c in TileStages::CLASSES {
            let mine: Vec<&Slot> = group.iter().filter(|x| x.class == c && x.pacemaker.is_none()).collect();
            if mine.is_empty() && waits.contains(c) {
                out.push(Slot { instr: Instruction::nop(c), group: g, class: c, tile: None, phase, pacemaker: None });
            }
            out.extend(mine.into_iter().cloned());
        }
        out.extend(group.iter().filter(|x| x.pacemaker.is_some()).cloned());
        start = end;
    }
    s.slots = out;
    s
}

/// Fill in DPON/DPBY for every instruction of the stream.
pub fn assign_typed_deps(mut s: PipelinedStream) -> Result<PipelinedStream, PipelineError> {
    for x in &mut s.slots {
        x.instr.deps = DepSets::default();
    }
    let n = s.slots.len();
    // Runs of one class within one group.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        let key = (s.slots[i].group, s.slots[i].class, s.slots[i].pacemaker.is_some());
        let mut j = i + 1;
        while j < n && (s.slots[j].group, s.slots[j].class, s.slots[j].pacemaker.is_some()) == key {
            j += 1;
        }
        runs.push((i, j));
        i = j;
    }
    let all_but_save = TypeSet::of(&[OpType::Load, OpType::Conv, OpType::Misc]);
    if s.pipelined {
        for &(a, b) in &runs {
            let (g, class) = (s.slots[a].group, s.slots[a].class);
            if let Some(waits) = s.slots[a].pacemaker {
                for c in waits.iter() {
                    let ok = runs.iter().any(|&(x, y)| {
                        s.slots[x].group == g && s.slots[x].class == c && s.slots[x].pacemaker.is_none() && x < y
                    });
                    if !ok {
                        return Err(PipelineError::Encoding(format!(
                            "group {g}: pacemaker waits on {c} but the group has no {c} instruction"
                        )));
                    }
                }
                s.slots[a].instr.deps = DepSets { dpon: waits, dpby: all_but_save };
                continue;
            }
            if class == OpType::Save {
                continue;
            }
            if g > 0 || s.after_barrier {
                s.slots[a].instr.deps.dpon.insert(OpType::Save);
            }
            s.slots[b - 1].instr.deps.dpby.insert(OpType::Save);
        }
        for &(x, y) in &s.serialize.clone() {
            for &(a, _) in &runs {
                if s.slots[a].class != y || s.slots[a].pacemaker.is_some() {
                    continue;
                }
                let g = s.slots[a].group;
                let prev = runs
                    .iter()
                    .find(|&&(p, _)| s.slots[p].group == g && s.slots[p].class == x && s.slots[p].pacemaker.is_none());
                if let Some(&(_, pe)) = prev {
                    if pe <= a {
                        s.slots[a].instr.deps.dpon.insert(x);
                        s.slots[pe - 1].instr.deps.dpby.insert(y);
                    }
                }
            }
        }
    } else {
        for (r, &(a, _)) in runs.iter().enumerate() {
            let class = s.slots[a].class;
            if r == 0 {
                if s.after_barrier && class != OpType::Save {
                    s.slots[a].instr.deps.dpon.insert(OpType::Save);
                }
                continue;
            }
            let (pa, pb) = runs[r - 1];
            let prev = s.slots[pa].class;
            if prev != class {
                s.slots[a].instr.deps.dpon.insert(prev);
                s.slots[pb - 1].instr.deps.dpby.insert(class);
            }
        }
        if let Some(&(_, b)) = runs.last() {
            let last = &mut s.slots[b - 1].instr;
            debug_assert_eq!(last.op_type(), OpType::Save);
            last.deps.dpby = last.deps.dpby.union(all_but_save);
        }
    }
    Ok(s)
}

/// The three passes in order.
pub fn schedule_node(tiles: &[TileStages], opts: &PipelineOptions) -> Result<PipelinedStream, PipelineError> {
    assign_typed_deps(insert_noops(pipeline(tiles, opts)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::{Loc, Op, Transfer};

    fn xfer(load: bool) -> Instruction {
        let t = Transfer { ddr: 0, chunk: 1, count: 1, stride: 1, local: Loc::slice(0) };
        Instruction::new(if load { Op::Load(t) } else { Op::Save(t) })
    }

    fn tile(shape: &[OpType]) -> TileStages {
        let mut t = TileStages::default();
        for &c in shape {
            let ins = match c {
                OpType::Load => xfer(true),
                OpType::Save => xfer(false),
                c => Instruction::nop(c),
            };
            match c {
                OpType::Load => t.load.push(ins),
                OpType::Conv => t.conv.push(ins),
                OpType::Misc => t.misc.push(ins),
                OpType::Save => t.save.push(ins),
            }
        }
        t
    }

    const FULL: [OpType; 4] = [OpType::Load, OpType::Conv, OpType::Misc, OpType::Save];

    fn group_tiles(s: &PipelinedStream, g: usize) -> Vec<(OpType, usize)> {
        s.slots.iter().filter(|x| x.group == g).filter_map(|x| x.tile.map(|t| (x.class, t))).collect()
    }

    #[test]
    fn steady_groups_skew_four_stages() {
        let tiles: Vec<_> = (0..6).map(|_| tile(&FULL)).collect();
        let s = pipeline(&tiles, &PipelineOptions { pipelined: true, ..Default::default() });
        assert_eq!(group_tiles(&s, 0), vec![(OpType::Load, 0)]);
        assert_eq!(group_tiles(&s, 1), vec![(OpType::Load, 1), (OpType::Conv, 0)]);
        assert_eq!(group_tiles(&s, 2), vec![(OpType::Load, 2), (OpType::Conv, 1), (OpType::Misc, 0)]);
        for g in 3..6 {
            let expect = vec![(OpType::Load, g), (OpType::Conv, g - 1), (OpType::Misc, g - 2), (OpType::Save, g - 3)];
            assert_eq!(group_tiles(&s, g), expect);
            assert!(s.slots.iter().filter(|x| x.group == g).all(|x| x.phase == Phase::Steady));
        }
        assert_eq!(s.groups, 9);
    }

    #[test]
    fn two_stage_tiles_skew_by_one() {
        let tiles: Vec<_> = (0..5).map(|_| tile(&[OpType::Load, OpType::Misc])).collect();
        let s = pipeline(&tiles, &PipelineOptions { pipelined: true, ..Default::default() });
        for g in 1..5 {
            assert_eq!(group_tiles(&s, g), vec![(OpType::Load, g), (OpType::Misc, g - 1)]);
        }
    }

    #[test]
    fn single_tile_is_a_chain() {
        let s = schedule_node(&[tile(&FULL)], &PipelineOptions { pipelined: true, ..Default::default() }).unwrap();
        assert!(!s.pipelined);
        let deps: Vec<DepSets> = s.slots.iter().map(|x| x.instr.deps).collect();
        assert_eq!(deps[0], DepSets { dpon: TypeSet::EMPTY, dpby: TypeSet::of(&[OpType::Conv]) });
        assert_eq!(deps[1].dpon, TypeSet::of(&[OpType::Load]));
        assert_eq!(deps[2].dpon, TypeSet::of(&[OpType::Conv]));
        assert_eq!(deps[3].dpon, TypeSet::of(&[OpType::Misc]));
        assert!(deps[3].dpby.contains(OpType::Load));
    }

    #[test]
    fn steady_load_waits_on_the_pacemaker() {
        let tiles: Vec<_> = (0..6).map(|_| tile(&FULL)).collect();
        let s = schedule_node(&tiles, &PipelineOptions { pipelined: true, ..Default::default() }).unwrap();
        let first = &s.slots[0];
        assert_eq!(first.instr.deps.dpon, TypeSet::EMPTY);
        let l4 = s.slots.iter().find(|x| x.group == 4 && x.class == OpType::Load).unwrap();
        assert_eq!(l4.instr.deps.dpon, TypeSet::of(&[OpType::Save]));
        assert!(l4.instr.deps.dpby.contains(OpType::Save));
        let pm = s.slots.iter().find(|x| x.group == 4 && x.pacemaker.is_some()).unwrap();
        assert_eq!(pm.instr.deps.dpon, TypeSet::of(&[OpType::Load, OpType::Conv, OpType::Misc]));
        // The head pacemaker only waits on what has started.
        let pm0 = s.slots.iter().find(|x| x.group == 0 && x.pacemaker.is_some()).unwrap();
        assert_eq!(pm0.instr.deps.dpon, TypeSet::of(&[OpType::Load]));
    }

    #[test]
    fn drained_tail_groups_get_load_bubbles() {
        let tiles: Vec<_> = (0..5).map(|_| tile(&FULL)).collect();
        let s = schedule_node(&tiles, &PipelineOptions { pipelined: true, ..Default::default() }).unwrap();
        for g in 5..8 {
            let loads: Vec<&Slot> = s.slots.iter().filter(|x| x.group == g && x.class == OpType::Load).collect();
            assert_eq!(loads.len(), 1);
            assert!(loads[0].instr.is_noop());
        }
        assert!(s.slots.iter().filter(|x| x.group < 5 && x.class == OpType::Load).all(|x| !x.instr.is_noop()));
    }

    #[test]
    fn saves_only_stream_is_flat() {
        let tiles: Vec<_> = (0..3).map(|_| tile(&[OpType::Save])).collect();
        let s = schedule_node(&tiles, &PipelineOptions { pipelined: true, ..Default::default() }).unwrap();
        assert!(!s.pipelined);
        assert_eq!(s.slots.len(), 3);
        assert!(s.slots.iter().all(|x| !x.instr.is_noop()));
    }

    #[test]
    fn missing_bubble_is_an_encoding_error() {
        let tiles: Vec<_> = (0..5).map(|_| tile(&FULL)).collect();
        let s = pipeline(&tiles, &PipelineOptions { pipelined: true, ..Default::default() });
        assert!(matches!(assign_typed_deps(s), Err(PipelineError::Encoding(_))));
    }

    #[test]
    fn serialization_orders_two_classes_in_a_group() {
        let tiles: Vec<_> = (0..5).map(|_| tile(&FULL)).collect();
        let opts =
            PipelineOptions { pipelined: true, serialize: vec![(OpType::Conv, OpType::Misc)], after_barrier: false };
        let s = schedule_node(&tiles, &opts).unwrap();
        let p3 = s.slots.iter().find(|x| x.group == 3 && x.class == OpType::Misc).unwrap();
        assert!(p3.instr.deps.dpon.contains(OpType::Conv));
        let c3 = s.slots.iter().find(|x| x.group == 3 && x.class == OpType::Conv).unwrap();
        assert!(c3.instr.deps.dpby.contains(OpType::Misc));
    }
}
