//! Per-node lowering into tiles of LOAD / CONV / MISC / SAVE stages.
//!
//! Local buffers are symbolic slices (`Loc::Slice`) sized here and placed by
//! the memory allocator later. Activation rows stream from DDR one row per
//! LOAD, and a row already resident from the previous tile is reused.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::deconv::{decompose_deconv, DeconvGeometry, PhaseTaps};
use super::fusion::{plan_fusion, Consumer, FusionPlan};
use super::split::{chain_ranges, h_split, w_split, w_split_chain, Layer, OpGeometry, Window};
use super::tree::{Region, StageCounts, TileLeaf, TileTree};
use super::weights::{pack_params, slab_plan, WeightSlab};
use super::TileStages;
use crate::error::LowerError;
use crate::graph::{window_geometry, FusedTail, Graph, Node, NodeId, OpKind};
use crate::hw::{ConvOp, EltOp, Instruction, Loc, MachineConfig, MoveOp, Op, PoolOp, Transfer};
use crate::quant::{add_shifts, align_bias};

/// Placement of an HWC tensor in DDR: element `(y, x, c)` lives at
/// `base + (y * w + x) * pitch + c`. `pitch` exceeds the channel count when
/// the tensor is a channel slice of a wider one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdrPlace {
    pub base: u64,
    pub pitch: u32,
}

impl DdrPlace {
    pub fn addr(&self, w: usize, y: usize, x: usize, c: usize) -> u64 {
        self.base + ((y * w + x) as u64) * self.pitch as u64 + c as u64
    }

    /// Transfer of columns `cols` and channels `ch` of row `y`.
    pub fn transfer(&self, w: usize, y: usize, cols: &Range<usize>, ch: &Range<usize>, local: Loc) -> Transfer {
        let ddr = self.addr(w, y, cols.start, ch.start);
        if ch.len() == self.pitch as usize {
            let chunk = (cols.len() * ch.len()) as u32;
            Transfer { ddr, chunk, count: 1, stride: chunk as u64, local }
        } else {
            Transfer { ddr, chunk: ch.len() as u32, count: cols.len() as u32, stride: self.pitch as u64, local }
        }
    }
}

/// Where a node operand lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Ddr(DdrPlace),
    /// Already resident in FM; only identity nodes accept it.
    Fm,
}

/// Which stage writes a slice; decides its FM memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Load,
    Conv,
    Misc,
    Param,
}

impl Role {
    pub const FM: [Role; 3] = [Role::Load, Role::Conv, Role::Misc];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceInfo {
    pub id: u32,
    pub role: Role,
    pub bytes: u32,
}

pub struct NodeCtx<'a> {
    pub graph: &'a Graph,
    pub cfg: &'a MachineConfig,
    /// One entry per node input.
    pub inputs: Vec<Operand>,
    pub output: Operand,
    /// DDR address of the node's parameter block.
    pub params_base: u64,
    /// First slice id this node may use.
    pub first_slice: u32,
}

impl NodeCtx<'_> {
    fn input(&self, i: usize) -> Result<DdrPlace, LowerError> {
        match self.inputs.get(i) {
            Some(Operand::Ddr(p)) => Ok(*p),
            Some(Operand::Fm) => Err(LowerError::Unsupported("FM-resident operand on a non-identity node".into())),
            None => Err(LowerError::Unsupported(format!("missing operand {i}"))),
        }
    }

    fn out(&self) -> Result<DdrPlace, LowerError> {
        match self.output {
            Operand::Ddr(p) => Ok(p),
            Operand::Fm => Err(LowerError::Unsupported("FM-resident result on a non-identity node".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoweredNode {
    pub node: NodeId,
    pub tiles: Vec<TileStages>,
    pub slices: Vec<SliceInfo>,
    /// Parameter block, to be placed at `NodeCtx::params_base`.
    pub params: Vec<u8>,
    pub tree: Option<TileTree>,
    pub fusion: Option<FusionPlan>,
    pub strips: usize,
    pub slabs: usize,
}

/// Size of the parameter block [`lower_node`] produces for `n`.
pub fn param_bytes(g: &Graph, n: &Node) -> usize {
    let Some(p) = &n.params else { return 0 };
    let subs = match n.op {
        OpKind::Deconv => DeconvGeometry::of(g, n).ok().and_then(|d| decompose_deconv(&d).ok()),
        _ => None,
    };
    match subs {
        Some(subs) => {
            let taps: usize = subs.iter().map(|s| s.kernel()[0] * s.kernel()[1]).sum();
            p.co * (taps * p.ci + 4)
        }
        None => p.co * (p.per_output_channel() + 4),
    }
}

/// Lower one node into tiles. Deconvolutions must be decomposable (see
/// [`decompose_deconv`]); others are rewritten before scheduling.
pub fn lower_node(n: &Node, ctx: &NodeCtx) -> Result<LoweredNode, LowerError> {
    let mut b = Builder::new(ctx);
    let mut fusion = None;
    let mut strips = 1;
    let mut slabs = 0;
    let params = match n.op {
        OpKind::Conv => {
            let r = lower_conv(n, ctx, &mut b)?;
            fusion = r.fusion;
            strips = r.strips;
            slabs = r.slabs;
            r.params
        }
        OpKind::Deconv => {
            let r = lower_deconv(n, ctx, &mut b)?;
            strips = r.strips;
            slabs = r.slabs;
            r.params
        }
        OpKind::MaxPool => {
            strips = lower_pool(n, ctx, &mut b)?;
            Vec::new()
        }
        OpKind::EltwiseAdd => {
            strips = lower_eltwise(n, ctx, &mut b)?;
            Vec::new()
        }
        OpKind::Identity => {
            if ctx.inputs.first() == Some(&Operand::Fm) && ctx.output == Operand::Fm {
                // Both sides resident: the result is the operand itself.
            } else {
                let i = ctx.input(0)?;
                strips = lower_copy(n, ctx, &mut b, &n.inputs[0], i, 0)?;
            }
            Vec::new()
        }
        OpKind::Concat => {
            let mut off = 0;
            for (i, t) in n.inputs.iter().enumerate() {
                let c = ctx.graph.tensor(t)?.shape()?.c;
                // An operand placed inside the output already is the concat.
                let skip = matches!((ctx.inputs[i], ctx.output), (Operand::Ddr(p), Operand::Ddr(o))
                    if p.base == o.base + off as u64 && p.pitch == o.pitch);
                if !skip {
                    lower_copy(n, ctx, &mut b, t, ctx.input(i)?, off)?;
                }
                off += c;
            }
            Vec::new()
        }
        OpKind::Upsample => {
            strips = lower_upsample(n, ctx, &mut b)?;
            Vec::new()
        }
        OpKind::Input | OpKind::Const | OpKind::Fix => {
            return Err(LowerError::Unsupported(format!("node {} ({:?}) is not a compute node", n.id, n.op)))
        }
    };
    let Builder { slices, tiles, leaves, .. } = b;
    Ok(LoweredNode { node: n.id, tiles, slices, params, tree: TileTree::from_leaves(leaves), fusion, strips, slabs })
}

struct Builder<'a> {
    cfg: &'a MachineConfig,
    params_base: u64,
    slices: Vec<SliceInfo>,
    next: u32,
    tiles: Vec<TileStages>,
    leaves: Vec<TileLeaf>,
}

impl<'a> Builder<'a> {
    fn new(ctx: &NodeCtx<'a>) -> Self {
        Builder {
            cfg: ctx.cfg,
            params_base: ctx.params_base,
            slices: Vec::new(),
            next: ctx.first_slice,
            tiles: Vec::new(),
            leaves: Vec::new(),
        }
    }

    fn slice(&mut self, role: Role, bytes: usize) -> u32 {
        let align = if role == Role::Param { self.cfg.pm_align() } else { self.cfg.fm_line_bytes() } as usize;
        let id = self.next;
        self.next += 1;
        self.slices.push(SliceInfo { id, role, bytes: (bytes.max(1).div_ceil(align) * align) as u32 });
        id
    }

    /// Slice of `rows` rows of `row_bytes` each; returns per-row locations.
    fn rows(&mut self, role: Role, rows: usize, row_bytes: usize) -> Vec<Loc> {
        let id = self.slice(role, rows * row_bytes);
        (0..rows).map(|i| Loc::Slice { id, off: (i * row_bytes) as u32 }).collect()
    }

    fn push(&mut self, st: TileStages, path: [usize; 3], out: Region, reads: Vec<Region>, pad: [usize; 4]) {
        let counts =
            StageCounts { loads: st.load.len(), convs: st.conv.len(), miscs: st.misc.len(), saves: st.save.len() };
        self.leaves.push(TileLeaf { unit: self.tiles.len(), path, out, reads, pad, counts });
        self.tiles.push(st);
    }

    /// Weight slab location, loading it when not resident. A single slab is
    /// loaded once for the whole node; otherwise each unit loads its own.
    fn weights(
        &mut self,
        slabs: &[WeightSlab],
        si: usize,
        resident: &mut Option<Loc>,
        loads: &mut Vec<Instruction>,
    ) -> (Loc, bool) {
        if slabs.len() == 1 {
            if let Some(l) = resident {
                return (*l, false);
            }
        }
        let s = &slabs[si];
        let loc = Loc::slice(self.slice(Role::Param, s.bytes));
        let ddr = self.params_base + s.block_offset as u64;
        loads.push(Instruction::new(Op::Load(Transfer {
            ddr,
            chunk: s.bytes as u32,
            count: 1,
            stride: s.bytes as u64,
            local: loc,
        })));
        if slabs.len() == 1 {
            *resident = Some(loc);
        }
        (loc, true)
    }
}

/// Rows of one operand's column strip, loaded on demand.
struct RowStream {
    place: DdrPlace,
    w: usize,
    cols: Range<usize>,
    ch: Range<usize>,
    rows: BTreeMap<usize, Loc>,
}

impl RowStream {
    fn new(place: DdrPlace, w: usize, cols: Range<usize>, ch: Range<usize>) -> Self {
        RowStream { place, w, cols, ch, rows: BTreeMap::new() }
    }

    fn row_bytes(&self) -> usize {
        self.cols.len() * self.ch.len()
    }

    fn fetch(&mut self, b: &mut Builder, want: Range<usize>, loads: &mut Vec<Instruction>) -> Vec<Loc> {
        let new: Vec<usize> = want.clone().filter(|y| !self.rows.contains_key(y)).collect();
        if !new.is_empty() {
            let locs = b.rows(Role::Load, new.len(), self.row_bytes());
            for (y, loc) in new.into_iter().zip(locs) {
                loads.push(Instruction::new(Op::Load(self.place.transfer(self.w, y, &self.cols, &self.ch, loc))));
                self.rows.insert(y, loc);
            }
        }
        want.map(|y| self.rows[&y]).collect()
    }
}

fn saves(
    place: DdrPlace,
    w: usize,
    rows: Range<usize>,
    locs: &[Loc],
    cols: &Range<usize>,
    ch: &Range<usize>,
    out: &mut Vec<Instruction>,
) {
    for (y, &loc) in rows.zip(locs) {
        out.push(Instruction::new(Op::Save(place.transfer(w, y, cols, ch, loc))));
    }
}

fn trailing_pad(win: Window, out: &Range<usize>, extent: usize) -> usize {
    if out.is_empty() {
        return 0;
    }
    ((out.end - 1) * win.s + win.k).saturating_sub(win.p + extent)
}

fn region(rows: Range<usize>, cols: Range<usize>, ch: Range<usize>) -> Region {
    Region { rows, cols, ch }
}

fn chunks(r: Range<usize>, n: usize) -> Vec<Range<usize>> {
    let n = n.max(1);
    r.clone().step_by(n).map(|a| a..(a + n).min(r.end)).collect()
}

struct WeightedResult {
    params: Vec<u8>,
    fusion: Option<FusionPlan>,
    strips: usize,
    slabs: usize,
}

enum Tail {
    None,
    Pool { rows: Window, cols: Window, plan: FusionPlan },
    Elt { relu: bool, plan: FusionPlan, z: DdrPlace, e_z: i32 },
}

/// Conv rows to produce and consumer instructions to run in one tile.
struct RowTile {
    convs: Vec<Range<usize>>,
    /// `(output rows, intermediate rows read)` per consumer instruction.
    cons: Vec<(Range<usize>, Range<usize>)>,
    out: Range<usize>,
}

fn lower_conv(n: &Node, ctx: &NodeCtx, b: &mut Builder) -> Result<WeightedResult, LowerError> {
    let g = ctx.graph;
    let cfg = ctx.cfg;
    let p =
        n.params.as_ref().ok_or_else(|| LowerError::Unsupported(format!("conv {} has unfolded parameters", n.id)))?;
    let xt = g.tensor(&n.inputs[0])?;
    let xs = xt.shape()?;
    let e_x = xt.exponent()?;
    let yt = g.tensor(&n.output)?;
    let ys = yt.shape()?;
    let e_y = yt.exponent()?;
    let geom = window_geometry(g, n)?;
    let (ms, e_mid) = match &n.fused {
        Some(t) => (t.mid().shape()?, t.mid().exponent()?),
        None => (ys, e_y),
    };
    let e_acc = e_x + p.weight_quant.exponent()?;
    let e_b = p.bias_quant.exponent()?;
    let bias: Vec<i32> = p.bias.iter().map(|&v| align_bias(v, e_b, e_acc)).collect();
    let slabs = slab_plan(p.co, &[p.per_output_channel()], cfg)?;
    let params = pack_params(&slabs, std::slice::from_ref(&p.weights), &bias);
    let x_place = ctx.input(0)?;
    let y_place = ctx.out()?;

    let tail = match &n.fused {
        None => Tail::None,
        Some(FusedTail::MaxPool { attrs, .. }) => {
            let rows = Window::new(attrs.kernel[0], attrs.stride[0], attrs.padding[0]);
            let cols = Window::new(attrs.kernel[1], attrs.stride[1], attrs.padding[1]);
            Tail::Pool { rows, cols, plan: plan_fusion(&geom, Consumer::Pool(rows), cfg) }
        }
        Some(FusedTail::EltwiseAdd { relu, .. }) => {
            let zt = g.tensor(&n.inputs[1])?;
            Tail::Elt {
                relu: *relu,
                plan: plan_fusion(&geom, Consumer::Eltwise, cfg),
                z: ctx.input(1)?,
                e_z: zt.exponent()?,
            }
        }
    };
    let fusion = match &tail {
        Tail::None => None,
        Tail::Pool { plan, .. } | Tail::Elt { plan, .. } => {
            if !plan.enabled {
                return Err(LowerError::Infeasible(format!("node {}: fused tail has no steady state", n.id)));
            }
            Some(*plan)
        }
    };

    let mut layers = vec![geom.layer()];
    if let Tail::Pool { cols, .. } = &tail {
        layers.push(Layer { win: *cols, in_w: ms.w, in_c: p.co, out_c: p.co });
    }
    let strips = w_split_chain(ys.w, &layers, cfg.gamma as usize)?;
    let mut resident = None;
    let mut first_conv = true;

    for (sti, strip) in strips.iter().enumerate() {
        let ranges = chain_ranges(&strip.out, &layers);
        let x_cols = ranges[0].clone();
        let mid_cols = ranges[1].clone();
        let out_cols = strip.out.clone();
        let tiles = match &tail {
            Tail::None => {
                let sg = OpGeometry { in_w: x_cols.len(), ..geom };
                h_split(&sg, cfg, cfg.h_c as usize)?
                    .into_iter()
                    .map(|band| RowTile { convs: vec![band.out.clone()], cons: vec![], out: band.out })
                    .collect::<Vec<_>>()
            }
            Tail::Pool { rows, plan, .. } => {
                let mut done = 0;
                chunks(0..ys.h, plan.k * plan.out_rows)
                    .into_iter()
                    .map(|out| {
                        let need = rows.input_range(&out, ms.h);
                        let new = need.start.max(done)..need.end.max(done);
                        done = new.end;
                        let cons = chunks(out.clone(), plan.out_rows)
                            .into_iter()
                            .map(|o| {
                                let r = rows.input_range(&o, ms.h);
                                (o, r)
                            })
                            .collect();
                        RowTile {
                            convs: chunks(new, plan.h_c).into_iter().filter(|r| !r.is_empty()).collect(),
                            cons,
                            out,
                        }
                    })
                    .collect()
            }
            Tail::Elt { plan, .. } => chunks(0..ys.h, plan.h_c)
                .into_iter()
                .map(|out| RowTile {
                    convs: vec![out.clone()],
                    cons: chunks(out.clone(), plan.out_rows).into_iter().map(|o| (o.clone(), o)).collect(),
                    out,
                })
                .collect(),
        };

        let mut x_stream = RowStream::new(x_place, xs.w, x_cols.clone(), 0..xs.c);
        let mut z_streams: Vec<Option<RowStream>> = slabs.iter().map(|_| None).collect();
        let mut conv_rows: Vec<BTreeMap<usize, Loc>> = vec![BTreeMap::new(); slabs.len()];

        for (ti, tile) in tiles.iter().enumerate() {
            let span = match (tile.convs.first(), tile.convs.last()) {
                (Some(a), Some(z)) => a.start..z.end,
                _ => 0..0,
            };
            let x_need = geom.rows.input_range(&span, xs.h);
            for (si, slab) in slabs.iter().enumerate() {
                let co_s = slab.co.len();
                let mut st = TileStages::default();
                x_stream.fetch(b, x_need.clone(), &mut st.load);
                let (w_loc, init) = b.weights(&slabs, si, &mut resident, &mut st.load);
                let mut reads = vec![region(x_need.clone(), x_cols.clone(), 0..xs.c)];

                let mid_row = mid_cols.len() * co_s;
                let n_new: usize = tile.convs.iter().map(|r| r.len()).sum();
                let mut c_locs = b.rows(Role::Conv, n_new, mid_row).into_iter();
                for (ci, rows) in tile.convs.iter().enumerate() {
                    let inr = geom.rows.input_range(rows, xs.h);
                    let input = x_stream.fetch(b, inr.clone(), &mut st.load);
                    let output: Vec<Loc> = rows.clone().map(|_| c_locs.next().unwrap()).collect();
                    for (y, &l) in rows.clone().zip(&output) {
                        conv_rows[si].insert(y, l);
                    }
                    st.conv.push(Instruction::new(Op::Conv(ConvOp {
                        input,
                        in_row0: inr.start as u32,
                        in_col0: x_cols.start as u32,
                        in_cols: x_cols.len() as u32,
                        in_ch: xs.c as u32,
                        in_h: xs.h as u32,
                        in_w: xs.w as u32,
                        output,
                        out_row0: rows.start as u32,
                        out_col0: mid_cols.start as u32,
                        out_cols: mid_cols.len() as u32,
                        out_ch: co_s as u32,
                        kernel: [p.kh as u32, p.kw as u32],
                        stride: [geom.rows.s as u32, geom.cols.s as u32],
                        pad: [geom.rows.p as i32, geom.cols.p as i32],
                        weights: w_loc.offset(slab.kernel_offsets[0] as u32),
                        bias: w_loc.offset(slab.bias_offset as u32),
                        shift: e_acc - e_mid,
                        relu: n.attrs.relu,
                        init: init && ci == 0 || first_conv,
                    })));
                    first_conv = false;
                }

                let final_locs: Vec<Loc> = match &tail {
                    Tail::None => tile.out.clone().map(|y| conv_rows[si][&y]).collect(),
                    Tail::Pool { rows, cols, .. } => {
                        let out_locs = b.rows(Role::Misc, tile.out.len(), out_cols.len() * co_s);
                        for (o, r) in &tile.cons {
                            let input = r.clone().map(|y| conv_rows[si][&y]).collect();
                            let output = out_locs[o.start - tile.out.start..o.end - tile.out.start].to_vec();
                            st.misc.push(Instruction::new(Op::Pool(PoolOp {
                                input,
                                in_row0: r.start as u32,
                                in_col0: mid_cols.start as u32,
                                in_cols: mid_cols.len() as u32,
                                ch: co_s as u32,
                                in_h: ms.h as u32,
                                in_w: ms.w as u32,
                                output,
                                out_row0: o.start as u32,
                                out_col0: out_cols.start as u32,
                                out_cols: out_cols.len() as u32,
                                kernel: [rows.k as u32, cols.k as u32],
                                stride: [rows.s as u32, cols.s as u32],
                                pad: [rows.p as u32, cols.p as u32],
                                shift: e_mid - e_y,
                            })));
                        }
                        out_locs
                    }
                    Tail::Elt { relu, z, e_z, .. } => {
                        let zs = z_streams[si]
                            .get_or_insert_with(|| RowStream::new(*z, ys.w, mid_cols.clone(), slab.co.clone()));
                        let z_locs = zs.fetch(b, tile.out.clone(), &mut st.load);
                        reads.push(region(tile.out.clone(), mid_cols.clone(), slab.co.clone()));
                        let out_locs = b.rows(Role::Misc, tile.out.len(), mid_row);
                        let (la, lb, shift) = add_shifts(e_mid, *e_z, e_y);
                        for (o, _) in &tile.cons {
                            let rel = o.start - tile.out.start..o.end - tile.out.start;
                            st.misc.push(Instruction::new(Op::Elt(EltOp {
                                a: o.clone().map(|y| conv_rows[si][&y]).collect(),
                                b: z_locs[rel.clone()].to_vec(),
                                output: out_locs[rel].to_vec(),
                                row_bytes: mid_row as u32,
                                la,
                                lb,
                                shift,
                                relu: *relu,
                            })));
                        }
                        out_locs
                    }
                };
                saves(y_place, ys.w, tile.out.clone(), &final_locs, &out_cols, &slab.co, &mut st.save);
                let pad = [
                    geom.rows.leading_pad(&span),
                    trailing_pad(geom.rows, &span, xs.h),
                    geom.cols.leading_pad(&mid_cols),
                    trailing_pad(geom.cols, &mid_cols, xs.w),
                ];
                b.push(st, [sti, ti, si], region(tile.out.clone(), out_cols.clone(), slab.co.clone()), reads, pad);
            }
        }
    }
    Ok(WeightedResult { params, fusion, strips: strips.len(), slabs: slabs.len() })
}

/// Input positions a phase reads for phase outputs `q`, clamped to the input.
fn phase_input(t: &PhaseTaps, q: &Range<usize>, extent: usize) -> Range<usize> {
    if q.is_empty() {
        return 0..0;
    }
    let clamp = |v: isize| v.clamp(0, extent as isize) as usize;
    let lo = clamp(q.start as isize + t.d);
    let hi = clamp(q.end as isize - 1 + t.d + t.taps.len() as isize);
    lo..hi.max(lo)
}

fn hull(a: Range<usize>, b: Range<usize>) -> Range<usize> {
    match (a.is_empty(), b.is_empty()) {
        (true, _) => b,
        (_, true) => a,
        _ => a.start.min(b.start)..a.end.max(b.end),
    }
}

fn lower_deconv(n: &Node, ctx: &NodeCtx, b: &mut Builder) -> Result<WeightedResult, LowerError> {
    let g = ctx.graph;
    let cfg = ctx.cfg;
    let p =
        n.params.as_ref().ok_or_else(|| LowerError::Unsupported(format!("deconv {} has unfolded parameters", n.id)))?;
    let geom = DeconvGeometry::of(g, n)?;
    let subs = decompose_deconv(&geom)?;
    let xt = g.tensor(&n.inputs[0])?;
    let xs = xt.shape()?;
    let e_x = xt.exponent()?;
    let yt = g.tensor(&n.output)?;
    let ys = yt.shape()?;
    let e_y = yt.exponent()?;
    let e_acc = e_x + p.weight_quant.exponent()?;
    let e_b = p.bias_quant.exponent()?;
    let bias: Vec<i32> = p.bias.iter().map(|&v| align_bias(v, e_b, e_acc)).collect();
    let per_co: Vec<usize> = subs.iter().map(|s| s.kernel()[0] * s.kernel()[1] * p.ci).collect();
    let slabs = slab_plan(p.co, &per_co, cfg)?;
    let kernels: Vec<Vec<i8>> = subs.iter().map(|s| s.weights(p)).collect();
    let params = pack_params(&slabs, &kernels, &bias);
    let x_place = ctx.input(0)?;
    let y_place = ctx.out()?;
    let [sh, sw] = geom.s;
    let gamma = cfg.gamma as usize;

    // Strips over phase columns.
    let qw = subs.iter().map(|s| s.cols.outputs).max().unwrap_or(0);
    let strip_of = |q: Range<usize>| {
        let input = subs
            .iter()
            .fold(0..0, |acc, s| hull(acc, phase_input(&s.cols, &(q.start..q.end.min(s.cols.outputs)), xs.w)));
        let out = sw * q.start..(sw * q.end).min(ys.w);
        (q, input, out)
    };
    let fits = |(q, input, out): &(Range<usize>, Range<usize>, Range<usize>)| {
        input.len() * xs.c <= gamma && q.len() * p.co <= gamma && out.len() * p.co <= gamma
    };
    let mut strips = None;
    for count in 1..=qw.max(1) {
        let cand: Vec<_> = chunks(0..qw, qw.div_ceil(count)).into_iter().map(strip_of).collect();
        if cand.iter().all(fits) {
            strips = Some(cand);
            break;
        }
    }
    let strips =
        strips.ok_or_else(|| LowerError::Infeasible(format!("deconv {}: one column exceeds gamma = {gamma}", n.id)))?;

    let qh = subs.iter().map(|s| s.rows.outputs).max().unwrap_or(0);
    let n_q = (cfg.h_c as usize / sh).max(1);
    let mut resident = None;
    let mut first_conv = true;
    for (sti, (qc, x_cols, out_cols)) in strips.iter().enumerate() {
        let mut x_stream = RowStream::new(x_place, xs.w, x_cols.clone(), 0..xs.c);
        for (bi, band) in chunks(0..qh, n_q).into_iter().enumerate() {
            let rows_of = |s: &super::deconv::SubKernel| band.start.min(s.rows.outputs)..band.end.min(s.rows.outputs);
            let cols_of = |s: &super::deconv::SubKernel| qc.start.min(s.cols.outputs)..qc.end.min(s.cols.outputs);
            let x_need = subs.iter().fold(0..0, |acc, s| hull(acc, phase_input(&s.rows, &rows_of(s), xs.h)));
            let out_rows = sh * band.start..(sh * band.end).min(ys.h);
            for (si, slab) in slabs.iter().enumerate() {
                let co_s = slab.co.len();
                let mut st = TileStages::default();
                x_stream.fetch(b, x_need.clone(), &mut st.load);
                let (w_loc, init) = b.weights(&slabs, si, &mut resident, &mut st.load);
                let mut phase_out: Vec<Vec<Loc>> = Vec::with_capacity(subs.len());
                for (ki, s) in subs.iter().enumerate() {
                    let (pr, pc) = (rows_of(s), cols_of(s));
                    if pr.is_empty() || pc.is_empty() {
                        phase_out.push(Vec::new());
                        continue;
                    }
                    let inr = phase_input(&s.rows, &pr, xs.h);
                    let input = x_stream.fetch(b, inr.clone(), &mut st.load);
                    let output = b.rows(Role::Conv, pr.len(), pc.len() * co_s);
                    st.conv.push(Instruction::new(Op::Conv(ConvOp {
                        input,
                        in_row0: inr.start as u32,
                        in_col0: x_cols.start as u32,
                        in_cols: x_cols.len() as u32,
                        in_ch: xs.c as u32,
                        in_h: xs.h as u32,
                        in_w: xs.w as u32,
                        output: output.clone(),
                        out_row0: pr.start as u32,
                        out_col0: pc.start as u32,
                        out_cols: pc.len() as u32,
                        out_ch: co_s as u32,
                        kernel: [s.kernel()[0] as u32, s.kernel()[1] as u32],
                        stride: [1, 1],
                        pad: [-s.rows.d as i32, -s.cols.d as i32],
                        weights: w_loc.offset(slab.kernel_offsets[ki] as u32),
                        bias: w_loc.offset(slab.bias_offset as u32),
                        shift: e_acc - e_y,
                        relu: n.attrs.relu,
                        init: init && st.conv.is_empty() || first_conv,
                    })));
                    first_conv = false;
                    phase_out.push(output);
                }
                let out_row = out_cols.len() * co_s;
                let out_locs = b.rows(Role::Misc, out_rows.len(), out_row);
                for q in band.clone() {
                    // Phases of one row share a column count except at the right edge.
                    let mut by_cols: BTreeMap<usize, Vec<(Loc, Loc)>> = BTreeMap::new();
                    for (s, locs) in subs.iter().zip(&phase_out) {
                        let (pr, pc) = (rows_of(s), cols_of(s));
                        if !pr.contains(&q) || pc.is_empty() {
                            continue;
                        }
                        let dst = out_locs[(q - band.start) * sh + s.phase[0]].offset((s.phase[1] * co_s) as u32);
                        by_cols.entry(pc.len()).or_default().push((locs[q - pr.start], dst));
                    }
                    for (cols, rows) in by_cols {
                        st.misc.push(Instruction::new(Op::Move(MoveOp {
                            zero: vec![],
                            zero_bytes: 0,
                            rows,
                            cols: cols as u32,
                            ch: co_s as u32,
                            pitch: (sw * co_s) as u32,
                            shift: 0,
                        })));
                    }
                }
                saves(y_place, ys.w, out_rows.clone(), &out_locs, out_cols, &slab.co, &mut st.save);
                let pad = [
                    subs.iter().map(|s| (-s.rows.d).max(0) as usize).max().unwrap_or(0),
                    subs.iter().map(|s| s.pad[2].max(0) as usize).max().unwrap_or(0),
                    subs.iter().map(|s| (-s.cols.d).max(0) as usize).max().unwrap_or(0),
                    subs.iter().map(|s| s.pad[3].max(0) as usize).max().unwrap_or(0),
                ];
                let reads = vec![region(x_need.clone(), x_cols.clone(), 0..xs.c)];
                b.push(st, [sti, bi, si], region(out_rows.clone(), out_cols.clone(), slab.co.clone()), reads, pad);
            }
        }
    }
    Ok(WeightedResult { params, fusion: None, strips: strips.len(), slabs: slabs.len() })
}

/// Identity-like copy of tensor `t` into the node output at channel offset
/// `ch_off`, requantizing when exponents differ.
fn lower_copy(
    n: &Node,
    ctx: &NodeCtx,
    b: &mut Builder,
    t: &str,
    place: DdrPlace,
    ch_off: usize,
) -> Result<usize, LowerError> {
    let g = ctx.graph;
    let cfg = ctx.cfg;
    let xt = g.tensor(t)?;
    let xs = xt.shape()?;
    let yt = g.tensor(&n.output)?;
    let ys = yt.shape()?;
    let shift = xt.exponent()? - yt.exponent()?;
    let y_place = ctx.out()?;
    let layer = Layer { win: Window::IDENTITY, in_w: xs.w, in_c: xs.c, out_c: xs.c };
    let strips = w_split_chain(xs.w, &[layer], cfg.gamma as usize)?;
    // Concat operands continue the strip numbering of earlier operands.
    let strip_base = b.leaves.last().map_or(0, |l| l.path[0] + 1);
    for (sti, strip) in strips.iter().enumerate() {
        let cols = strip.out.clone();
        let mut stream = RowStream::new(place, xs.w, cols.clone(), 0..xs.c);
        let rb = stream.row_bytes();
        for (bi, rows) in chunks(0..xs.h, cfg.h_e as usize).into_iter().enumerate() {
            let mut st = TileStages::default();
            let src = stream.fetch(b, rows.clone(), &mut st.load);
            let locs = if shift == 0 {
                src
            } else {
                let dst = b.rows(Role::Misc, rows.len(), rb);
                st.misc.push(Instruction::new(Op::Move(MoveOp {
                    zero: vec![],
                    zero_bytes: 0,
                    rows: src.into_iter().zip(dst.iter().copied()).collect(),
                    cols: cols.len() as u32,
                    ch: xs.c as u32,
                    pitch: xs.c as u32,
                    shift,
                })));
                dst
            };
            let ch = ch_off..ch_off + xs.c;
            saves(y_place, ys.w, rows.clone(), &locs, &cols, &ch, &mut st.save);
            let reads = vec![region(rows.clone(), cols.clone(), 0..xs.c)];
            b.push(st, [strip_base + sti, bi, 0], region(rows, cols.clone(), ch), reads, [0; 4]);
        }
    }
    Ok(strips.len())
}

fn lower_pool(n: &Node, ctx: &NodeCtx, b: &mut Builder) -> Result<usize, LowerError> {
    let g = ctx.graph;
    let cfg = ctx.cfg;
    let xt = g.tensor(&n.inputs[0])?;
    let xs = xt.shape()?;
    let yt = g.tensor(&n.output)?;
    let ys = yt.shape()?;
    let shift = xt.exponent()? - yt.exponent()?;
    let geom = window_geometry(g, n)?;
    let (x_place, y_place) = (ctx.input(0)?, ctx.out()?);
    let strips = w_split(&geom, cfg)?;
    let po = (cfg.h_p as usize / geom.rows.s.max(1)).max(1);
    for (sti, strip) in strips.iter().enumerate() {
        let sg = OpGeometry { in_w: strip.input.len(), ..geom };
        let mut stream = RowStream::new(x_place, xs.w, strip.input.clone(), 0..xs.c);
        for (bi, band) in h_split(&sg, cfg, po)?.into_iter().enumerate() {
            let mut st = TileStages::default();
            let input = stream.fetch(b, band.input.clone(), &mut st.load);
            let output = b.rows(Role::Misc, band.out.len(), strip.out.len() * xs.c);
            st.misc.push(Instruction::new(Op::Pool(PoolOp {
                input,
                in_row0: band.input.start as u32,
                in_col0: strip.input.start as u32,
                in_cols: strip.input.len() as u32,
                ch: xs.c as u32,
                in_h: xs.h as u32,
                in_w: xs.w as u32,
                output: output.clone(),
                out_row0: band.out.start as u32,
                out_col0: strip.out.start as u32,
                out_cols: strip.out.len() as u32,
                kernel: [geom.rows.k as u32, geom.cols.k as u32],
                stride: [geom.rows.s as u32, geom.cols.s as u32],
                pad: [geom.rows.p as u32, geom.cols.p as u32],
                shift,
            })));
            saves(y_place, ys.w, band.out.clone(), &output, &strip.out, &(0..xs.c), &mut st.save);
            let pad = [
                geom.rows.leading_pad(&band.out),
                trailing_pad(geom.rows, &band.out, xs.h),
                geom.cols.leading_pad(&strip.out),
                trailing_pad(geom.cols, &strip.out, xs.w),
            ];
            let reads = vec![region(band.input.clone(), strip.input.clone(), 0..xs.c)];
            b.push(st, [sti, bi, 0], region(band.out, strip.out.clone(), 0..xs.c), reads, pad);
        }
    }
    Ok(strips.len())
}

fn lower_eltwise(n: &Node, ctx: &NodeCtx, b: &mut Builder) -> Result<usize, LowerError> {
    let g = ctx.graph;
    let cfg = ctx.cfg;
    let at = g.tensor(&n.inputs[0])?;
    let bt = g.tensor(&n.inputs[1])?;
    let yt = g.tensor(&n.output)?;
    let ys = yt.shape()?;
    let (la, lb, shift) = add_shifts(at.exponent()?, bt.exponent()?, yt.exponent()?);
    let (a_place, b_place, y_place) = (ctx.input(0)?, ctx.input(1)?, ctx.out()?);
    let layer = Layer { win: Window::IDENTITY, in_w: ys.w, in_c: ys.c, out_c: ys.c };
    let strips = w_split_chain(ys.w, &[layer], cfg.gamma as usize)?;
    for (sti, strip) in strips.iter().enumerate() {
        let cols = strip.out.clone();
        let mut sa = RowStream::new(a_place, ys.w, cols.clone(), 0..ys.c);
        let mut sb = RowStream::new(b_place, ys.w, cols.clone(), 0..ys.c);
        let rb = sa.row_bytes();
        for (bi, rows) in chunks(0..ys.h, cfg.h_e as usize).into_iter().enumerate() {
            let mut st = TileStages::default();
            let a = sa.fetch(b, rows.clone(), &mut st.load);
            let bb = sb.fetch(b, rows.clone(), &mut st.load);
            let output = b.rows(Role::Misc, rows.len(), rb);
            st.misc.push(Instruction::new(Op::Elt(EltOp {
                a,
                b: bb,
                output: output.clone(),
                row_bytes: rb as u32,
                la,
                lb,
                shift,
                relu: n.attrs.relu,
            })));
            saves(y_place, ys.w, rows.clone(), &output, &cols, &(0..ys.c), &mut st.save);
            let r = region(rows, cols.clone(), 0..ys.c);
            b.push(st, [sti, bi, 0], r.clone(), vec![r.clone(), r], [0; 4]);
        }
    }
    Ok(strips.len())
}

fn lower_upsample(n: &Node, ctx: &NodeCtx, b: &mut Builder) -> Result<usize, LowerError> {
    let g = ctx.graph;
    let cfg = ctx.cfg;
    let xt = g.tensor(&n.inputs[0])?;
    let xs = xt.shape()?;
    let yt = g.tensor(&n.output)?;
    let ys = yt.shape()?;
    let shift = xt.exponent()? - yt.exponent()?;
    let f = n.attrs.factor;
    let (x_place, y_place) = (ctx.input(0)?, ctx.out()?);
    let gamma = cfg.gamma as usize;
    if xs.c * f > gamma {
        return Err(LowerError::Infeasible(format!("upsample {}: one column exceeds gamma = {gamma}", n.id)));
    }
    let per = (gamma / (xs.c * f)).max(1);
    let strips = chunks(0..xs.w, xs.w.div_ceil(xs.w.div_ceil(per)));
    let n_in = (cfg.h_e as usize / f).max(1);
    for (sti, cols) in strips.iter().enumerate() {
        let out_cols = cols.start * f..cols.end * f;
        let mut stream = RowStream::new(x_place, xs.w, cols.clone(), 0..xs.c);
        for (bi, rows) in chunks(0..xs.h, n_in).into_iter().enumerate() {
            let mut st = TileStages::default();
            let src = stream.fetch(b, rows.clone(), &mut st.load);
            let out_rows = rows.start * f..rows.end * f;
            let ob = out_cols.len() * xs.c;
            let dst = b.rows(Role::Misc, out_rows.len(), ob);
            st.misc.push(Instruction::new(Op::Move(MoveOp {
                zero: dst.clone(),
                zero_bytes: ob as u32,
                rows: src.into_iter().enumerate().map(|(i, s)| (s, dst[i * f])).collect(),
                cols: cols.len() as u32,
                ch: xs.c as u32,
                pitch: (f * xs.c) as u32,
                shift,
            })));
            saves(y_place, ys.w, out_rows.clone(), &dst, &out_cols, &(0..xs.c), &mut st.save);
            let reads = vec![region(rows, cols.clone(), 0..xs.c)];
            b.push(st, [sti, bi, 0], region(out_rows, out_cols.clone(), 0..xs.c), reads, [0; 4]);
        }
    }
    Ok(strips.len())
}
