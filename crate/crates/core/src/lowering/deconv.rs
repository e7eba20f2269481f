//! Transposed convolution as a set of dense sub-convolutions.
//!
//! A deconvolution here is `conv_{k, stride 1, pad p}(upsample_s(x))` where
//! upsampling places `x[i]` at `s * i` and zeros elsewhere. Output position
//! `o = s*q + r` only meets non-zero inputs through taps `t` with
//! `t ≡ p - r (mod s)`; those taps form a dense kernel over the original `x`
//! whose window starts at input `q + d_r`.

use serde::{Deserialize, Serialize};

use crate::error::{GraphError, LowerError};
use crate::graph::{Attrs, Graph, Node, NodeId, OpKind, TensorRef, WeightSpec};

/// Taps of one output phase along one axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTaps {
    pub phase: usize,
    /// Original kernel indices, ascending, `s` apart.
    pub taps: Vec<usize>,
    /// Input offset of the window for phase row `q`: it reads `x[q + d ..]`.
    pub d: isize,
    /// Number of phase outputs along this axis.
    pub outputs: usize,
}

pub fn phase_taps(k: usize, s: usize, p: usize, r: usize, out_len: usize) -> PhaseTaps {
    let t0 = (p + s * k - r) % s;
    let taps: Vec<usize> = (t0..k).step_by(s).collect();
    let d = (r as isize + t0 as isize - p as isize) / s as isize;
    let outputs = if out_len > r { (out_len - r).div_ceil(s) } else { 0 };
    PhaseTaps { phase: r, taps, d, outputs }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubKernel {
    /// `(row phase, column phase)`.
    pub phase: [usize; 2],
    pub rows: PhaseTaps,
    pub cols: PhaseTaps,
    /// Effective padding `[top, left, bottom, right]` of the dense
    /// sub-convolution; negative values skip input instead.
    pub pad: [isize; 4],
}

impl SubKernel {
    pub fn kernel(&self) -> [usize; 2] {
        [self.rows.taps.len(), self.cols.taps.len()]
    }

    pub fn outputs(&self) -> [usize; 2] {
        [self.rows.outputs, self.cols.outputs]
    }

    /// Sub-kernel weights `(co, kh', kw', ci)` gathered from the original kernel.
    pub fn weights(&self, p: &WeightSpec) -> Vec<i8> {
        let mut out = Vec::with_capacity(p.co * self.rows.taps.len() * self.cols.taps.len() * p.ci);
        for co in 0..p.co {
            for &ty in &self.rows.taps {
                for &tx in &self.cols.taps {
                    for ci in 0..p.ci {
                        out.push(p.weight(co, ty, tx, ci));
                    }
                }
            }
        }
        out
    }

    pub fn macs(&self, ci: usize, co: usize) -> u64 {
        (self.rows.outputs * self.cols.outputs * self.rows.taps.len() * self.cols.taps.len() * ci * co) as u64
    }
}

/// Geometry of a deconvolution node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeconvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: [usize; 2],
    pub s: [usize; 2],
    pub p: [usize; 2],
}

impl DeconvGeometry {
    pub fn of(g: &Graph, n: &Node) -> Result<Self, GraphError> {
        let x = g.tensor(&n.inputs[0])?.shape()?;
        let y = g.tensor(&n.output)?.shape()?;
        Ok(DeconvGeometry {
            in_h: x.h,
            in_w: x.w,
            out_h: y.h,
            out_w: y.w,
            k: n.attrs.kernel,
            s: n.attrs.stride,
            p: n.attrs.padding,
        })
    }
}

/// The `min(k, s)^2` sub-kernels replacing a deconvolution. Only factors up
/// to 2 with `k >= s` are decomposed; other shapes use [`fallback_rewrite`].
pub fn decompose_deconv(g: &DeconvGeometry) -> Result<Vec<SubKernel>, LowerError> {
    for axis in 0..2 {
        if g.s[axis] > 2 {
            return Err(LowerError::Unsupported(format!("deconv factor {} > 2", g.s[axis])));
        }
        if g.k[axis] < g.s[axis] {
            return Err(LowerError::Unsupported(format!(
                "deconv kernel {} smaller than factor {} leaves output phases without taps",
                g.k[axis], g.s[axis]
            )));
        }
    }
    let mut subs = Vec::new();
    for ry in 0..g.s[0] {
        for rx in 0..g.s[1] {
            let rows = phase_taps(g.k[0], g.s[0], g.p[0], ry, g.out_h);
            let cols = phase_taps(g.k[1], g.s[1], g.p[1], rx, g.out_w);
            let tail = |t: &PhaseTaps, len: usize| {
                (t.outputs as isize - 1 + t.d + t.taps.len() as isize - len as isize).max(0)
            };
            let pad = [-rows.d, -cols.d, tail(&rows, g.in_h), tail(&cols, g.in_w)];
            subs.push(SubKernel { phase: [ry, rx], rows, cols, pad });
        }
    }
    Ok(subs)
}

/// Multiplications of the equivalent upsample + dense convolution.
pub fn upsample_conv_macs(g: &DeconvGeometry, ci: usize, co: usize) -> u64 {
    (g.out_h * g.out_w * g.k[0] * g.k[1] * ci * co) as u64
}

/// Replace every deconvolution by an explicit upsample node followed by a
/// stride-1 convolution with the same kernel and padding.
pub fn fallback_rewrite(g: &Graph, only_unsupported: bool) -> Result<Graph, GraphError> {
    let mut out = g.clone();
    let mut next_id: NodeId = g.nodes.iter().map(|n| n.id).max().unwrap_or(0) + 1;
    for n in g.nodes.iter().filter(|n| n.op == OpKind::Deconv) {
        let geom = DeconvGeometry::of(g, n)?;
        if only_unsupported && decompose_deconv(&geom).is_ok() {
            continue;
        }
        if geom.s[0] != geom.s[1] {
            return Err(GraphError::Shape(format!("deconv {} has unequal factors {:?}", n.id, geom.s)));
        }
        let x = g.tensor(&n.inputs[0])?;
        let up_name = format!("{}.upsampled", n.output);
        let xs = x.shape()?;
        let up = TensorRef {
            name: up_name.clone(),
            dims: vec![xs.h * geom.s[0], xs.w * geom.s[1], xs.c],
            dtype: x.dtype,
            quant: x.quant,
        };
        out.tensors.insert(up_name.clone(), up);
        let mut u = Node::new(next_id, OpKind::Upsample, &[&n.inputs[0]], &up_name);
        u.attrs = Attrs { factor: geom.s[0], ..Attrs::default() };
        next_id += 1;
        let c = out.nodes.iter_mut().find(|m| m.id == n.id).unwrap();
        c.op = OpKind::Conv;
        c.inputs[0] = up_name;
        c.attrs.stride = [1, 1];
        out.nodes.push(u);
    }
    out.validate()?;
    Ok(out)
}
