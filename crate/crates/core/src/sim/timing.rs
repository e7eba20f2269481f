//! Discrete-event timing over the four in-order queues.
//!
//! Instructions are dispatched in program order into their queue; a queue
//! holds at most `queue_depth` instructions that have not started. An
//! instruction starts once its queue is idle and, for each type in its DPON,
//! the latest earlier instruction of that type whose DPBY names this
//! instruction's type has completed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::hw::{instruction_cost, Instruction, MachineConfig, Op, OpType, Program};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorClass {
    LoadActivation,
    LoadWeight,
    Conv,
    ConvInit,
    Pool,
    Eltwise,
    Move,
    Save,
    Noop,
}

impl ColorClass {
    pub fn of(i: &Instruction) -> Self {
        match &i.op {
            Op::Load(t) if t.local.is_pm() => ColorClass::LoadWeight,
            Op::Load(_) => ColorClass::LoadActivation,
            Op::Save(_) => ColorClass::Save,
            Op::Conv(c) if c.init => ColorClass::ConvInit,
            Op::Conv(_) => ColorClass::Conv,
            Op::Pool(_) => ColorClass::Pool,
            Op::Elt(_) => ColorClass::Eltwise,
            Op::Move(_) => ColorClass::Move,
            Op::Nop(_) => ColorClass::Noop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub index: usize,
    pub queue: OpType,
    pub issue: u64,
    pub start: u64,
    pub duration: u64,
    pub color: ColorClass,
}

impl TraceEvent {
    pub fn end(&self) -> u64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub makespan: u64,
    /// Busy cycles per queue.
    pub busy: BTreeMap<OpType, u64>,
    pub utilization: BTreeMap<OpType, f64>,
}

impl Trace {
    fn finish(events: Vec<TraceEvent>) -> Self {
        let makespan = events.iter().map(TraceEvent::end).max().unwrap_or(0);
        let mut busy: BTreeMap<OpType, u64> = OpType::ALL.iter().map(|&t| (t, 0)).collect();
        for e in &events {
            *busy.get_mut(&e.queue).unwrap() += e.duration;
        }
        let utilization =
            busy.iter().map(|(&t, &b)| (t, if makespan == 0 { 0.0 } else { b as f64 / makespan as f64 })).collect();
        Trace { events, makespan, busy, utilization }
    }
}

/// Dependency target of each instruction: per DPON type, the index it waits on.
pub fn resolve_dependencies(p: &Program) -> Result<Vec<Vec<usize>>, (usize, OpType)> {
    // latest[t][u]: latest instruction of type t whose DPBY contains u.
    let mut latest = [[None::<usize>; 4]; 4];
    let mut out = Vec::with_capacity(p.instrs.len());
    for (i, ins) in p.instrs.iter().enumerate() {
        let me = ins.op_type();
        let mut deps = Vec::new();
        for t in ins.deps.dpon.iter() {
            match latest[t.index()][me.index()] {
                Some(j) => deps.push(j),
                None => return Err((i, t)),
            }
        }
        for u in ins.deps.dpby.iter() {
            latest[me.index()][u.index()] = Some(i);
        }
        out.push(deps);
    }
    Ok(out)
}

pub fn run_timing(p: &Program, cfg: &MachineConfig) -> Result<Trace, SimError> {
    let deps =
        resolve_dependencies(p).map_err(|(i, _)| SimError::Deadlock { cycle: 0, pending: p.instrs.len() - i })?;
    let depth = cfg.queue_depth.max(1) as usize;
    let mut events: Vec<TraceEvent> = Vec::with_capacity(p.instrs.len());
    let mut queue_members: [Vec<usize>; 4] = Default::default();
    let mut queue_free = [0u64; 4];
    let mut last_issue = 0u64;
    let mut progress = 0u64;
    for (i, ins) in p.instrs.iter().enumerate() {
        let q = ins.op_type().index();
        let members = &queue_members[q];
        // Dispatch waits for room in the queue.
        let room = if members.len() >= depth { events[members[members.len() - depth]].start } else { 0 };
        let issue = last_issue.max(room);
        let ready = deps[i].iter().map(|&j| events[j].end()).max().unwrap_or(0);
        let start = issue.max(queue_free[q]).max(ready);
        if start > progress + cfg.watchdog_cycles {
            return Err(SimError::Deadlock { cycle: progress, pending: p.instrs.len() - i });
        }
        let duration = instruction_cost(ins, cfg);
        let e = TraceEvent { index: i, queue: ins.op_type(), issue, start, duration, color: ColorClass::of(ins) };
        queue_free[q] = e.end();
        progress = progress.max(e.end());
        last_issue = issue;
        queue_members[q].push(i);
        events.push(e);
    }
    Ok(Trace::finish(events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::{DepSets, Loc, Transfer, TypeSet};

    fn load(bytes: u32) -> Instruction {
        Instruction::new(Op::Load(Transfer {
            ddr: 0,
            chunk: bytes,
            count: 1,
            stride: bytes as u64,
            local: Loc::slice(0),
        }))
    }

    #[test]
    fn single_instruction() {
        let cfg = MachineConfig::default();
        let p = Program { instrs: vec![load(1024)] };
        let t = run_timing(&p, &cfg).unwrap();
        assert_eq!(t.events[0].start, 0);
        assert_eq!(t.makespan, instruction_cost(&p.instrs[0], &cfg));
    }

    #[test]
    fn conv_starts_at_load_end() {
        let cfg = MachineConfig::default();
        let mut l = load(1024);
        l.deps.dpby = TypeSet::of(&[OpType::Conv]);
        let mut c = Instruction::nop(OpType::Conv);
        c.deps = DepSets { dpon: TypeSet::of(&[OpType::Load]), dpby: TypeSet::EMPTY };
        let t = run_timing(&Program { instrs: vec![l, c] }, &cfg).unwrap();
        assert_eq!(t.events[1].start, t.events[0].end());
    }

    #[test]
    fn independent_queues_overlap() {
        let cfg = MachineConfig::default();
        let t = run_timing(&Program { instrs: vec![load(4096), Instruction::nop(OpType::Conv)] }, &cfg).unwrap();
        assert_eq!(t.events[1].start, 0);
        assert!(t.utilization[&OpType::Load] > 0.99);
    }

    #[test]
    fn unmatched_wait_deadlocks() {
        let mut c = Instruction::nop(OpType::Conv);
        c.deps.dpon = TypeSet::of(&[OpType::Load]);
        let e = run_timing(&Program { instrs: vec![load(8), c] }, &MachineConfig::default()).unwrap_err();
        assert!(matches!(e, SimError::Deadlock { pending: 1, .. }));
    }

    #[test]
    fn queue_depth_throttles_dispatch() {
        let cfg = MachineConfig { queue_depth: 1, ..MachineConfig::default() };
        let instrs = vec![load(1600), load(1600), load(1600), Instruction::nop(OpType::Conv)];
        let t = run_timing(&Program { instrs: instrs.clone() }, &cfg).unwrap();
        // The third load waits for the second to start before dispatch, and
        // the conv behind it cannot be dispatched earlier.
        assert_eq!(t.events[2].issue, t.events[1].start);
        assert_eq!(t.events[3].start, t.events[1].start);
        let deep = run_timing(&Program { instrs }, &MachineConfig::default()).unwrap();
        assert_eq!(deep.events[3].start, 0);
    }

    #[test]
    fn timing_is_deterministic() {
        let cfg = MachineConfig::default();
        let p = Program { instrs: (0..50).map(|i| load(64 * (i + 1))).collect() };
        assert_eq!(run_timing(&p, &cfg).unwrap(), run_timing(&p, &cfg).unwrap());
    }
}
