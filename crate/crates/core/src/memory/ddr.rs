use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::MemError;
use crate::graph::{Graph, NodeId, OpKind};
use crate::hw::MachineConfig;
use crate::lowering::{param_bytes, DdrPlace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Inputs,
    Outputs,
    Parameters,
    Swap,
    Instructions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Segment {
    pub base: u64,
    pub size: u64,
}

impl Segment {
    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn contains(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr + len <= self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorPlace {
    pub segment: SegmentKind,
    pub base: u64,
    /// Bytes between consecutive pixels.
    pub pitch: u32,
    pub bytes: u64,
    /// Enclosing concat output when the tensor is stored inside it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
}

impl TensorPlace {
    pub fn place(&self) -> DdrPlace {
        DdrPlace { base: self.base, pitch: self.pitch }
    }
}

/// DDR segments in address order: inputs, outputs, parameters, swap and
/// instructions. Instructions come last so their size can be fixed after
/// code generation without moving anything else.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DdrLayout {
    pub inputs: Segment,
    pub outputs: Segment,
    pub parameters: Segment,
    pub swap: Segment,
    pub instructions: Segment,
    pub tensors: BTreeMap<String, TensorPlace>,
    /// Parameter block of each weighted node.
    pub params: BTreeMap<NodeId, Segment>,
}

impl DdrLayout {
    pub fn segment(&self, k: SegmentKind) -> Segment {
        match k {
            SegmentKind::Inputs => self.inputs,
            SegmentKind::Outputs => self.outputs,
            SegmentKind::Parameters => self.parameters,
            SegmentKind::Swap => self.swap,
            SegmentKind::Instructions => self.instructions,
        }
    }

    pub fn segments(&self) -> [(SegmentKind, Segment); 5] {
        use SegmentKind::*;
        [Inputs, Outputs, Parameters, Swap, Instructions].map(|k| (k, self.segment(k)))
    }

    /// Segment fully containing `[addr, addr + len)`.
    pub fn segment_of(&self, addr: u64, len: u64) -> Option<SegmentKind> {
        self.segments().into_iter().find(|(_, s)| s.size > 0 && s.contains(addr, len)).map(|(k, _)| k)
    }

    pub fn total(&self) -> u64 {
        self.instructions.end()
    }

    pub fn place(&self, tensor: &str) -> Option<DdrPlace> {
        self.tensors.get(tensor).map(TensorPlace::place)
    }

    pub fn set_instructions(&mut self, bytes: u64, cfg: &MachineConfig) -> Result<(), MemError> {
        self.instructions.size = bytes;
        check_capacity(self.total(), cfg)
    }
}

fn check_capacity(need: u64, cfg: &MachineConfig) -> Result<(), MemError> {
    match cfg.ddr_capacity {
        Some(cap) if need > cap => Err(MemError::Capacity { need, cap }),
        _ => Ok(()),
    }
}

/// Concat operands stored directly inside the concat output: produced by a
/// compute node, consumed only by that concat, not a graph output, and at
/// the output's scale. Maps operand to `(host, channel offset)`.
fn concat_views(g: &Graph) -> BTreeMap<String, (String, usize)> {
    let mut views = BTreeMap::new();
    for n in g.nodes.iter().filter(|n| n.op == OpKind::Concat) {
        let Ok(e_out) = g.tensor(&n.output).and_then(|t| t.exponent()) else { continue };
        let mut off = 0;
        for t in &n.inputs {
            let Ok(tr) = g.tensor(t) else { break };
            let c = tr.dims.last().copied().unwrap_or(0);
            let single_use = g.consumers(t).len() == 1 && n.inputs.iter().filter(|i| *i == t).count() == 1;
            let computed = g.producer(t).is_some_and(|p| p.op.is_compute());
            if single_use && computed && !g.outputs.contains(t) && tr.exponent().ok() == Some(e_out) {
                views.insert(t.clone(), (n.output.clone(), off));
            }
            off += c;
        }
    }
    views
}

fn view_root<'a>(views: &'a BTreeMap<String, (String, usize)>, mut t: &'a str) -> String {
    while let Some((h, _)) = views.get(t) {
        t = h;
    }
    t.to_string()
}

/// Packed DDR layout for `g` executed in `order`. Intermediate tensors share
/// the swap segment first-fit by node lifetime; concat operands that need no
/// conversion are placed inside the concat output.
pub fn ddr_layout(g: &Graph, order: &[NodeId], program_bytes: u64, cfg: &MachineConfig) -> Result<DdrLayout, MemError> {
    let mut layout = DdrLayout::default();
    let bytes = |t: &str| g.tensors.get(t).map_or(0, |t| t.elements() as u64);
    let pitch = |t: &str| g.tensors.get(t).and_then(|t| t.dims.last().copied()).unwrap_or(1) as u32;
    let place = |segment, base, t: &str| TensorPlace { segment, base, pitch: pitch(t), bytes: bytes(t), host: None };

    let mut at = 0;
    layout.inputs.base = at;
    for t in &g.inputs {
        layout.tensors.insert(t.clone(), place(SegmentKind::Inputs, at, t));
        at += bytes(t);
    }
    layout.inputs.size = at;
    layout.outputs.base = at;
    for t in &g.outputs {
        if !layout.tensors.contains_key(t) {
            layout.tensors.insert(t.clone(), place(SegmentKind::Outputs, at, t));
            at += bytes(t);
        }
    }
    layout.outputs.size = at - layout.outputs.base;

    layout.parameters.base = at;
    for &id in order {
        let Some(n) = g.node(id) else { continue };
        let size = param_bytes(g, n) as u64;
        if size > 0 {
            layout.params.insert(id, Segment { base: at, size });
            at += size;
        }
    }
    layout.parameters.size = at - layout.parameters.base;

    // Node-order lifetimes of intermediates; a concat host lives from the
    // first write of any of its operands.
    let views = concat_views(g);
    let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let root = |t: &str| view_root(&views, t);
    let mut life: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for n in &g.nodes {
        let Some(&p) = pos.get(&n.id) else { continue };
        let host = root(&n.output);
        let e = life.entry(host).or_insert((p, p));
        e.0 = e.0.min(p);
        e.1 = e.1.max(p);
        for t in &n.inputs {
            let e = life.entry(root(t)).or_insert((p, p));
            e.0 = e.0.min(p);
            e.1 = e.1.max(p);
        }
    }
    layout.swap.base = at;
    let mut placed: Vec<(u64, u64, usize, usize)> = Vec::new();
    let mut by_def: Vec<(&String, &(usize, usize))> = life.iter().collect();
    by_def.sort_by_key(|(t, (s, _))| (*s, (*t).clone()));
    for (t, &(s, e)) in by_def {
        if layout.tensors.contains_key(t) || !g.tensors.contains_key(t) {
            continue;
        }
        let size = bytes(t);
        let mut conflicts: Vec<(u64, u64)> =
            placed.iter().filter(|p| p.2 <= e && s <= p.3).map(|p| (p.0, p.1)).collect();
        conflicts.sort_unstable();
        let mut off = 0;
        for (o, sz) in conflicts {
            if off + size <= o {
                break;
            }
            off = off.max(o + sz);
        }
        placed.push((off, size, s, e));
        layout.tensors.insert(t.clone(), place(SegmentKind::Swap, at + off, t));
    }
    layout.swap.size = placed.iter().map(|p| p.0 + p.1).max().unwrap_or(0);
    at += layout.swap.size;

    // Views resolve outermost first.
    let mut pending: Vec<&String> = views.keys().collect();
    while !pending.is_empty() {
        pending.retain(|t| {
            let (h, off) = &views[*t];
            let Some(hp) = layout.tensors.get(h).cloned() else { return true };
            let tp = TensorPlace {
                segment: hp.segment,
                base: hp.base + *off as u64,
                pitch: hp.pitch,
                bytes: bytes(t),
                host: Some(h.clone()),
            };
            layout.tensors.insert((*t).clone(), tp);
            false
        });
    }

    layout.instructions = Segment { base: at, size: program_bytes };
    check_capacity(layout.total(), cfg)?;
    Ok(layout)
}
