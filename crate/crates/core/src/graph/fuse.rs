//! Super-layer formation: a convolution absorbs the max pool or residual add
//! that is the sole consumer of its output.

use super::*;
use crate::hw::MachineConfig;
use crate::lowering::fusion::{plan_fusion, Consumer};
use crate::lowering::split::{OpGeometry, Window};

/// Row/column geometry of a conv or pool node in `g`.
pub(crate) fn window_geometry(g: &Graph, n: &Node) -> Result<OpGeometry, GraphError> {
    let x = g.tensor(&n.inputs[0])?.shape()?;
    let y = match &n.fused {
        Some(t) => t.mid().shape()?,
        None => g.tensor(&n.output)?.shape()?,
    };
    let a = n.attrs;
    Ok(OpGeometry {
        in_h: x.h,
        in_w: x.w,
        in_c: x.c,
        out_h: y.h,
        out_w: y.w,
        out_c: y.c,
        rows: Window::new(a.kernel[0], a.stride[0], a.padding[0]),
        cols: Window::new(a.kernel[1], a.stride[1], a.padding[1]),
    })
}

fn macs(g: &Graph, n: &Node) -> u64 {
    let p = n.params.as_ref().expect("folded conv");
    let y = match &n.fused {
        Some(t) => t.mid().elements(),
        None => g.tensors[&n.output].elements(),
    };
    (y * p.kh * p.kw * p.ci) as u64
}

/// Fuse each conv with its single consumer when a steady state exists and no
/// conv that could run in parallel with it is larger.
pub fn fuse_superlayers(g: &Graph, cfg: &MachineConfig) -> Graph {
    let mut g = g.clone();
    let convs: Vec<NodeId> = g.nodes.iter().filter(|n| n.op == OpKind::Conv).map(|n| n.id).collect();
    for id in convs {
        if let Some((tail, consumer)) = fusion_candidate(&g, id, cfg) {
            let consumer = consumer.clone();
            let mid_name = g.node(id).unwrap().output.clone();
            let mid = g.tensors.remove(&mid_name).expect("conv output");
            let n = g.nodes.iter_mut().find(|n| n.id == id).unwrap();
            n.output = consumer.output.clone();
            n.fused = Some(match tail {
                Consumer::Pool(_) => FusedTail::MaxPool { attrs: consumer.attrs, mid },
                Consumer::Eltwise => {
                    let z = consumer.inputs.iter().find(|i| **i != mid.name).unwrap().clone();
                    n.inputs.push(z);
                    FusedTail::EltwiseAdd { relu: consumer.attrs.relu, mid }
                }
            });
            g.nodes.retain(|m| m.id != consumer.id);
        }
    }
    g
}

fn fusion_candidate<'a>(g: &'a Graph, id: NodeId, cfg: &MachineConfig) -> Option<(Consumer, &'a Node)> {
    let n = g.node(id)?;
    if n.fused.is_some() || n.params.is_none() || g.outputs.contains(&n.output) {
        return None;
    }
    let consumers = g.consumers(&n.output);
    let [c] = consumers[..] else { return None };
    if c.inputs.iter().filter(|i| **i == n.output).count() != 1 {
        return None;
    }
    let tail = match c.op {
        OpKind::MaxPool => Consumer::Pool(Window::new(c.attrs.kernel[0], c.attrs.stride[0], c.attrs.padding[0])),
        OpKind::EltwiseAdd => Consumer::Eltwise,
        _ => return None,
    };
    let geom = window_geometry(g, n).ok()?;
    if !plan_fusion(&geom, tail, cfg).enabled {
        return None;
    }
    let related: BTreeSet<NodeId> = g.ancestors(id).union(&g.descendants(id)).copied().collect();
    let own = macs(g, n);
    let largest = g
        .nodes
        .iter()
        .filter(|m| m.op.has_weights() && m.id != id && !related.contains(&m.id))
        .all(|m| macs(g, m) <= own);
    largest.then_some((tail, c))
}
