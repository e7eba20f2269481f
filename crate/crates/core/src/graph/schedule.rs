//! Topological schedules and a liveness-based peak-memory estimate.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, OpKind};
use crate::error::GraphError;

/// Upper bound on complete orders visited by [`explore_schedules`].
const ENUMERATION_LIMIT: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Schedule {
    pub order: Vec<NodeId>,
}

impl Schedule {
    /// Every node appears once and after all of its producers.
    pub fn is_valid(&self, g: &Graph) -> bool {
        let pos: BTreeMap<NodeId, usize> = self.order.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        pos.len() == self.order.len()
            && pos.len() == g.nodes.len()
            && g.edges().iter().all(|(p, c)| match (pos.get(p), pos.get(c)) {
                (Some(a), Some(b)) => a < b,
                _ => false,
            })
    }
}

/// Kahn's algorithm; among ready nodes the smallest id goes first.
pub fn topological_schedule(g: &Graph) -> Result<Schedule, GraphError> {
    let mut preds = g.predecessors();
    let mut ready: BTreeSet<NodeId> = preds.iter().filter(|(_, p)| p.is_empty()).map(|(&n, _)| n).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(n) = ready.pop_first() {
        order.push(n);
        preds.remove(&n);
        for (&m, p) in preds.iter_mut() {
            if p.remove(&n) && p.is_empty() {
                ready.insert(m);
            }
        }
    }
    if let Some((&stuck, _)) = preds.iter().next() {
        return Err(GraphError::Cycle(format!("node {stuck}")));
    }
    Ok(Schedule { order })
}

/// Largest sum of live activation bytes over the steps of `order`. A tensor
/// is live from the step producing it through its last consuming step; graph
/// outputs stay live to the end.
pub fn peak_memory(g: &Graph, order: &[NodeId]) -> u64 {
    let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut delta = vec![0i64; order.len() + 1];
    for n in &g.nodes {
        if matches!(n.op, OpKind::Const | OpKind::Fix) && g.tensors[&n.output].dims.len() != 3 {
            continue;
        }
        let Some(&def) = pos.get(&n.id) else { continue };
        let last = if g.outputs.contains(&n.output) {
            order.len() - 1
        } else {
            g.consumers(&n.output).iter().filter_map(|c| pos.get(&c.id).copied()).max().unwrap_or(def).max(def)
        };
        let bytes = g.tensors[&n.output].elements() as i64;
        delta[def] += bytes;
        delta[last + 1] -= bytes;
    }
    let mut live = 0i64;
    let mut peak = 0i64;
    for d in &delta[..order.len()] {
        live += d;
        peak = peak.max(live);
    }
    peak as u64
}

/// Up to `budget` distinct valid schedules ranked by ascending peak memory
/// (ties by order). Enumeration is depth-first by node id and capped, so very
/// wide graphs see a deterministic subset of their orders.
pub fn explore_schedules(g: &Graph, budget: usize) -> Vec<(Schedule, u64)> {
    if budget == 0 {
        return Vec::new();
    }
    let preds = g.predecessors();
    let mut indeg: BTreeMap<NodeId, usize> = preds.iter().map(|(&n, p)| (n, p.len())).collect();
    let succs: BTreeMap<NodeId, Vec<NodeId>> = {
        let mut s: BTreeMap<NodeId, Vec<NodeId>> = preds.keys().map(|&n| (n, vec![])).collect();
        for (p, c) in g.edges() {
            s.get_mut(&p).unwrap().push(c);
        }
        s
    };
    let mut found = Vec::new();
    let mut prefix = Vec::new();
    enumerate(&mut indeg, &succs, &mut prefix, &mut found);
    let mut ranked: Vec<(Schedule, u64)> = found
        .into_iter()
        .map(|order| {
            let peak = peak_memory(g, &order);
            (Schedule { order }, peak)
        })
        .collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(budget);
    ranked
}

fn enumerate(
    indeg: &mut BTreeMap<NodeId, usize>,
    succs: &BTreeMap<NodeId, Vec<NodeId>>,
    prefix: &mut Vec<NodeId>,
    found: &mut Vec<Vec<NodeId>>,
) {
    if found.len() >= ENUMERATION_LIMIT {
        return;
    }
    if prefix.len() == indeg.len() {
        found.push(prefix.clone());
        return;
    }
    let ready: Vec<NodeId> = indeg.iter().filter(|(n, &d)| d == 0 && !prefix.contains(n)).map(|(&n, _)| n).collect();
    for n in ready {
        prefix.push(n);
        for s in &succs[&n] {
            *indeg.get_mut(s).unwrap() -= 1;
        }
        enumerate(indeg, succs, prefix, found);
        for s in &succs[&n] {
            *indeg.get_mut(s).unwrap() += 1;
        }
        prefix.pop();
    }
}
