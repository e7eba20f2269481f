//! The pass pipeline from graph document to an allocated, dependency-annotated
//! program, with the retry ladder and helpers to run the result.
//!
//! Order: parse, fold, deconvolution rewrite, then for each schedule and
//! ladder step: fuse, DDR layout, per-node lowering, pipelining, liveness,
//! FM/PM allocation and address resolution. Timing runs once on the result
//! to fill in the report.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Attempt, CompileError, GraphError, LowerError, MemError, SimError};
use crate::graph::{
    explore_schedules, fold_constants_and_quantizers, fuse_superlayers, parse_graph, topological_schedule, Graph,
    NodeId,
};
use crate::hw::{emit_assembly, Loc, MachineConfig, OpType, Program};
use crate::lowering::deconv::fallback_rewrite;
use crate::lowering::fusion::FusionPlan;
use crate::lowering::tree::TileTree;
use crate::lowering::{lower_node, NodeCtx, Operand, Role};
use crate::memory::{
    allocate_circular, compute_liveness, ddr_layout, port_conflicts, stage_accesses, AllocRequest, CircularAlloc,
    DdrLayout, FmAssignment, MemId, Policy, SliceAlloc,
};
use crate::pipeline::{schedule_node, PipelineOptions};
use crate::sim::{check_hazards, run_functional, run_timing, Hazard, HazardContext, MachineState, Trace};

/// How transpose convolutions are compiled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeconvMode {
    /// Sub-kernel convolution series where supported, upsample + conv otherwise.
    #[default]
    Series,
    /// Always upsample + conv.
    Upsample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOptions {
    pub pipelined: bool,
    pub deconv: DeconvMode,
    /// Schedules tried before giving up.
    pub schedules: usize,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { pipelined: true, deconv: DeconvMode::Series, schedules: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub id: NodeId,
    pub op: String,
    pub output: String,
    pub tiles: usize,
    pub strips: usize,
    pub slabs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionPlan>,
    pub pipelined: bool,
    pub groups: usize,
    /// Index of the node's first instruction in the program.
    pub first_instr: usize,
    pub instructions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileReport {
    pub schedule: Vec<NodeId>,
    pub h_c: u32,
    pub gamma: u32,
    pub fused: bool,
    pub pipelined: bool,
    /// Ladder steps that failed before this one succeeded.
    pub attempts: Vec<Attempt>,
    pub nodes: Vec<NodeReport>,
    pub instructions: usize,
    pub makespan: u64,
    pub busy: BTreeMap<OpType, u64>,
    pub utilization: BTreeMap<OpType, f64>,
}

/// Everything produced by [`compile`].
#[derive(Debug, Clone)]
pub struct Compiled {
    /// The graph that was lowered: folded, rewritten and possibly fused.
    pub graph: Graph,
    pub cfg: MachineConfig,
    pub program: Program,
    pub layout: DdrLayout,
    /// Contents of the parameters segment.
    pub params: Vec<u8>,
    pub slices: Vec<SliceAlloc>,
    pub trees: BTreeMap<NodeId, TileTree>,
    pub report: CompileReport,
}

/// Segment table and local allocations, as written by `--dump-mem`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryMap {
    pub layout: DdrLayout,
    pub slices: Vec<SliceAlloc>,
}

/// What `run` needs besides the program and parameter image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: MachineConfig,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub layout: DdrLayout,
}

impl Compiled {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.cfg.clone(),
            inputs: self.graph.inputs.clone(),
            outputs: self.graph.outputs.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn assembly(&self) -> String {
        emit_assembly(&self.program)
    }

    pub fn memory_map(&self) -> MemoryMap {
        MemoryMap { layout: self.layout.clone(), slices: self.slices.clone() }
    }

    pub fn trace(&self) -> Result<Trace, SimError> {
        run_timing(&self.program, &self.cfg)
    }

    pub fn run(&self, inputs: &BTreeMap<String, Vec<i8>>) -> Result<BTreeMap<String, Vec<i8>>, SimError> {
        execute(&self.program, &self.layout, &self.params, &self.graph.outputs, inputs, &self.cfg)
    }

    pub fn hazards(&self, trace: &Trace) -> Vec<Hazard> {
        let ctx = HazardContext { cfg: &self.cfg, layout: Some(&self.layout), slices: &self.slices };
        check_hazards(&self.program, trace, &ctx)
    }
}

/// Run `p` functionally with parameters and inputs placed per `layout`, and
/// read back `outputs`.
pub fn execute(
    p: &Program,
    layout: &DdrLayout,
    params: &[u8],
    outputs: &[String],
    inputs: &BTreeMap<String, Vec<i8>>,
    cfg: &MachineConfig,
) -> Result<BTreeMap<String, Vec<i8>>, SimError> {
    let mut st = MachineState::new(cfg, layout.total());
    let end = p.instrs.len();
    let oob = |msg: String| SimError::OutOfBounds { index: end, msg };
    st.ddr.write(layout.parameters.base, params).map_err(oob)?;
    for (name, data) in inputs {
        let t = layout.tensors.get(name).ok_or_else(|| SimError::Shape(format!("{name} is not a graph tensor")))?;
        if t.bytes != data.len() as u64 {
            return Err(SimError::Shape(format!("{name} needs {} bytes, got {}", t.bytes, data.len())));
        }
        let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
        st.ddr.write(t.base, &bytes).map_err(oob)?;
    }
    let st = run_functional(p, st)?;
    let mut out = BTreeMap::new();
    for name in outputs {
        let t = layout.tensors.get(name).ok_or_else(|| SimError::Shape(format!("output {name} has no place")))?;
        let bytes = st.ddr.read(t.base, t.bytes as usize).map_err(|(undef, msg)| {
            let msg = format!("output {name}: {msg}");
            if undef {
                SimError::UseBeforeDef { index: end, msg }
            } else {
                SimError::OutOfBounds { index: end, msg }
            }
        })?;
        out.insert(name.clone(), bytes.into_iter().map(|b| b as i8).collect());
    }
    Ok(out)
}

/// Uniform int8 data for every graph input, reproducible from `seed`.
pub fn random_inputs(g: &Graph, seed: u64) -> BTreeMap<String, Vec<i8>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    g.inputs
        .iter()
        .map(|t| {
            let n = g.tensors.get(t).map_or(0, |t| t.elements());
            (t.clone(), (0..n).map(|_| rng.gen::<i8>()).collect())
        })
        .collect()
}

/// Parse and compile a graph document.
pub fn compile_source(text: &str, cfg: &MachineConfig, opts: &CompileOptions) -> Result<Compiled, CompileError> {
    compile(&parse_graph(text)?, cfg, opts)
}

/// Folded graph with transpose convolutions rewritten per `mode`: the form
/// both the compiler and the reference executor agree on.
pub fn prepare(g: &Graph, mode: DeconvMode) -> Result<Graph, GraphError> {
    let folded = fold_constants_and_quantizers(g)?;
    fallback_rewrite(&folded, mode == DeconvMode::Series)
}

/// One step of the retry ladder.
#[derive(Debug, Clone, Copy)]
struct Step {
    h_c: u32,
    gamma: u32,
    fused: bool,
}

fn halvings(v: u32) -> impl Iterator<Item = u32> {
    std::iter::successors(Some(v), |&x| (x > 1).then_some(x / 2))
}

/// Smaller conv tiles first, then no fusion, then narrower width strips.
fn ladder(cfg: &MachineConfig) -> Vec<Step> {
    let mut steps: Vec<Step> = halvings(cfg.h_c).map(|h_c| Step { h_c, gamma: cfg.gamma, fused: true }).collect();
    steps.extend(halvings(cfg.h_c).map(|h_c| Step { h_c, gamma: cfg.gamma, fused: false }));
    steps.extend(halvings(cfg.gamma).skip(1).map(|gamma| Step { h_c: 1, gamma, fused: false }));
    steps
}

enum Failure {
    /// Resources ran out; a later step may succeed.
    Retry(String),
    Fatal(String),
}

impl From<LowerError> for Failure {
    fn from(e: LowerError) -> Self {
        match e {
            LowerError::Infeasible(_) => Failure::Retry(e.to_string()),
            e => Failure::Fatal(e.to_string()),
        }
    }
}

impl From<MemError> for Failure {
    fn from(e: MemError) -> Self {
        match e {
            MemError::OutOfMemory { .. } => Failure::Retry(e.to_string()),
            e => Failure::Fatal(e.to_string()),
        }
    }
}

/// Candidate orders of `g`: the id-ordered topological schedule first, then
/// explored ones by increasing peak-memory estimate.
fn schedules(g: &Graph, n: usize) -> Result<Vec<Vec<NodeId>>, GraphError> {
    let mut out = vec![topological_schedule(g)?.order];
    if n > 1 {
        for (s, _) in explore_schedules(g, n) {
            if !out.contains(&s.order) && out.len() < n {
                out.push(s.order);
            }
        }
    }
    Ok(out)
}

/// Compile a parsed graph document.
pub fn compile(g: &Graph, cfg: &MachineConfig, opts: &CompileOptions) -> Result<Compiled, CompileError> {
    cfg.validate()?;
    let base = prepare(g, opts.deconv)?;
    base.validate()?;
    let mut attempts = Vec::new();
    let steps = ladder(cfg);
    let mut graphs: Vec<(Step, Graph, Vec<Vec<NodeId>>)> = Vec::new();
    for &step in &steps {
        let scfg = MachineConfig { h_c: step.h_c, gamma: step.gamma, ..cfg.clone() };
        let graph = if step.fused { fuse_superlayers(&base, &scfg) } else { base.clone() };
        // Unfused steps that would repeat a fused step exactly are skipped.
        if !step.fused
            && graphs.iter().any(|(s, g2, _)| s.fused && s.h_c == step.h_c && s.gamma == step.gamma && *g2 == graph)
        {
            continue;
        }
        let orders = schedules(&graph, opts.schedules.max(1))?;
        graphs.push((step, graph, orders));
    }
    for si in 0..opts.schedules.max(1) {
        for (step, graph, orders) in &graphs {
            let Some(order) = orders.get(si) else { continue };
            let scfg = MachineConfig { h_c: step.h_c, gamma: step.gamma, ..cfg.clone() };
            let record =
                |error: String| Attempt { schedule: si, h_c: step.h_c, gamma: step.gamma, fused: step.fused, error };
            match build(graph, order, &scfg, cfg, opts) {
                Ok(mut c) => {
                    c.report.fused = step.fused;
                    c.report.attempts = attempts;
                    return Ok(c);
                }
                Err(Failure::Retry(e)) => attempts.push(record(e)),
                Err(Failure::Fatal(e)) => {
                    attempts.push(record(e));
                    return Err(CompileError::Failed(attempts));
                }
            }
        }
    }
    Err(CompileError::Failed(attempts))
}

/// Lower, pipeline and allocate `g` in `order`. `lcfg` drives tiling and
/// `cfg` everything else.
fn build(
    g: &Graph,
    order: &[NodeId],
    lcfg: &MachineConfig,
    cfg: &MachineConfig,
    opts: &CompileOptions,
) -> Result<Compiled, Failure> {
    let mut layout = ddr_layout(g, order, 0, cfg)?;
    let fm = FmAssignment::by_role(cfg);
    let mut instrs = Vec::new();
    let mut nodes = Vec::new();
    let mut trees = BTreeMap::new();
    let mut params = vec![0u8; layout.parameters.size as usize];
    let mut next_slice = 0u32;
    let mut group_base = 0usize;
    let mut requests: BTreeMap<MemId, Vec<AllocRequest>> = BTreeMap::new();
    let mut lives: BTreeMap<u32, (Role, [usize; 4])> = BTreeMap::new();
    for &id in order {
        let n = g.node(id).expect("scheduled node exists");
        if !n.op.is_compute() {
            continue;
        }
        let place = |t: &str| {
            layout.place(t).map(Operand::Ddr).ok_or_else(|| Failure::Fatal(format!("tensor {t} has no DDR place")))
        };
        let inputs = n.inputs.iter().map(|t| place(t)).collect::<Result<Vec<_>, _>>()?;
        let pblock = layout.params.get(&id).copied();
        let ctx = NodeCtx {
            graph: g,
            cfg: lcfg,
            inputs,
            output: place(&n.output)?,
            params_base: pblock.map_or(0, |s| s.base),
            first_slice: next_slice,
        };
        let low = lower_node(n, &ctx)?;
        next_slice += low.slices.len() as u32;
        if let Some(s) = pblock {
            if low.params.len() as u64 != s.size {
                return Err(Failure::Fatal(format!(
                    "node {id}: parameter block is {} bytes, expected {}",
                    low.params.len(),
                    s.size
                )));
            }
            let off = (s.base - layout.parameters.base) as usize;
            params[off..off + low.params.len()].copy_from_slice(&low.params);
        }

        let serialize = if opts.pipelined {
            port_conflicts(&stage_accesses(&low), &fm).into_iter().map(|(x, y, _)| (x, y)).collect()
        } else {
            Vec::new()
        };
        let popts = PipelineOptions { pipelined: opts.pipelined, serialize, after_barrier: !instrs.is_empty() };
        let stream = schedule_node(&low.tiles, &popts).map_err(|e| Failure::Fatal(e.to_string()))?;
        let local = stream.instructions();
        let first = instrs.len();
        let role: BTreeMap<u32, Role> = low.slices.iter().map(|s| (s.id, s.role)).collect();
        let bytes: BTreeMap<u32, u32> = low.slices.iter().map(|s| (s.id, s.bytes)).collect();
        for r in compute_liveness(&local)? {
            let (g0, g1) =
                (group_base + stream.slots[r.first_write].group, group_base + stream.slots[r.last_read].group);
            let ro = role[&r.slice];
            requests.entry(fm.mem(ro)).or_default().push(AllocRequest {
                id: r.slice,
                start: g0,
                end: g1,
                len: bytes[&r.slice],
            });
            lives.insert(r.slice, (ro, [first + r.first_write, first + r.last_read, g0, g1]));
        }
        group_base += stream.slots.iter().map(|s| s.group + 1).max().unwrap_or(0);
        nodes.push(NodeReport {
            id,
            op: format!("{:?}", n.op).to_lowercase(),
            output: n.output.clone(),
            tiles: low.tiles.len(),
            strips: low.strips,
            slabs: low.slabs,
            fusion: low.fusion,
            pipelined: stream.pipelined,
            groups: stream.groups,
            first_instr: first,
            instructions: local.len(),
        });
        if let Some(t) = low.tree {
            trees.insert(id, t);
        }
        instrs.extend(local);
    }

    let mut allocs: BTreeMap<u32, CircularAlloc> = BTreeMap::new();
    for (&mem, reqs) in &requests {
        let cap = match mem {
            MemId::Fm(_) => cfg.fm_capacity(),
            MemId::Pm => cfg.pm_bytes,
        };
        allocs.extend(allocate_circular(reqs, mem, cap, Policy::CircularBump)?);
    }
    let mut unresolved = None;
    for ins in &mut instrs {
        ins.for_each_loc_mut(|l| {
            if let Loc::Slice { id, off } = *l {
                match allocs.get(&id) {
                    Some(a) => {
                        *l = match a.mem {
                            MemId::Fm(mem) => Loc::Fm { mem, addr: (a.start + off) % cfg.fm_capacity() },
                            MemId::Pm => Loc::Pm { addr: (a.start + off) % cfg.pm_bytes },
                        }
                    }
                    None => unresolved = Some(id),
                }
            }
        });
    }
    if let Some(id) = unresolved {
        return Err(Failure::Fatal(format!("slice {id} is referenced but never written")));
    }
    let slices = lives
        .iter()
        .map(|(&id, &(role, [fi, li, fg, lg]))| SliceAlloc {
            id,
            role,
            alloc: allocs[&id],
            first_instr: fi,
            last_instr: li,
            first_group: fg,
            last_group: lg,
        })
        .collect();

    let program = Program { instrs };
    layout.set_instructions(emit_assembly(&program).len() as u64, cfg)?;
    let trace = run_timing(&program, cfg).map_err(|e| Failure::Fatal(e.to_string()))?;
    let report = CompileReport {
        schedule: order.to_vec(),
        h_c: lcfg.h_c,
        gamma: lcfg.gamma,
        fused: false,
        pipelined: opts.pipelined,
        attempts: Vec::new(),
        nodes,
        instructions: program.instrs.len(),
        makespan: trace.makespan,
        busy: trace.busy,
        utilization: trace.utilization,
    };
    Ok(Compiled { graph: g.clone(), cfg: cfg.clone(), program, layout, params, slices, trees, report })
}
