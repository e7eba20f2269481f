//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails; the process exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dpuc::compile::{compile, prepare, random_inputs, CompileOptions, Compiled, DeconvMode};
use dpuc::corpus;
use dpuc::graph::{Attrs, Graph, Node, OpKind, Shape, TensorRef, WeightSpec};
use dpuc::hw::{Loc, MachineConfig, Op, OpType, Program};
use dpuc::lowering::deconv::{decompose_deconv, upsample_conv_macs, DeconvGeometry};
use dpuc::lowering::fusion::{plan_fusion, Consumer};
use dpuc::lowering::split::{OpGeometry, Window};
use dpuc::lowering::{lower_node, LoweredNode, NodeCtx, Operand, Role};
use dpuc::memory::MemId;
use dpuc::pipeline::{schedule_node, Phase, PipelineOptions};
use dpuc::quant::QuantInfo;
use dpuc::sim::{reference_execute, ColorClass, HazardKind, Trace};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn build(g: &Graph, opts: &CompileOptions) -> Result<Compiled, String> {
    compile(g, &MachineConfig::default(), opts).map_err(|e| e.to_string())
}

fn trace(c: &Compiled) -> Result<Trace, String> {
    c.trace().map_err(|e| e.to_string())
}

/// Lower the first node of kind `op` of a compiled graph again, with the DDR
/// placement the compiler chose.
fn relower(c: &Compiled, op: OpKind) -> Result<LoweredNode, String> {
    let n = c.graph.nodes.iter().find(|n| n.op == op).ok_or("no such node")?;
    let place = |t: &str| c.layout.place(t).map(Operand::Ddr).ok_or(format!("{t} unplaced"));
    let ctx = NodeCtx {
        graph: &c.graph,
        cfg: &c.cfg,
        inputs: n.inputs.iter().map(|t| place(t)).collect::<Result<_, _>>()?,
        output: place(&n.output)?,
        params_base: c.layout.params.get(&n.id).map_or(0, |s| s.base),
        first_slice: 0,
    };
    lower_node(n, &ctx).map_err(|e| e.to_string())
}

fn oracle_equivalence() -> Outcome {
    const SEEDS: u64 = 100;
    let t0 = Instant::now();
    let graphs = corpus::all();
    let results: Vec<Result<(), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = graphs
            .iter()
            .map(|(name, g)| {
                s.spawn(move || {
                    let c = build(g, &CompileOptions::default())?;
                    let reference = prepare(g, DeconvMode::Series).map_err(|e| e.to_string())?;
                    for seed in 0..SEEDS {
                        let x = random_inputs(g, seed);
                        let got = c.run(&x).map_err(|e| format!("{name}: {e}"))?;
                        let want = reference_execute(&reference, &x).map_err(|e| e.to_string())?;
                        ensure(got == want, || format!("{name}: seed {seed} differs"))?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("worker panicked".into()))).collect()
    });
    results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let el = t0.elapsed();
    ensure(el < Duration::from_secs(60), || format!("took {el:?}"))?;
    Ok(format!("{} graphs x {SEEDS} seeds bit-exact in {:.1} s", graphs.len(), el.as_secs_f64()))
}

fn first_tile_structure() -> Outcome {
    let c = build(&corpus::conv_pool(), &CompileOptions::default())?;
    let low = relower(&c, OpKind::Conv)?;
    let f = low.fusion.ok_or("conv was not fused")?;
    ensure(f.enabled, || "fusion plan disabled".into())?;
    let t = &low.tiles[0];
    // Local addresses are still symbolic slices here; parameters go to PM slices.
    let pm: BTreeSet<u32> = low.slices.iter().filter(|s| s.role == Role::Param).map(|s| s.id).collect();
    let to_pm = |l: &Loc| l.is_pm() || matches!(l, Loc::Slice { id, .. } if pm.contains(id));
    let act_loads = t.load.iter().filter(|i| matches!(&i.op, Op::Load(x) if !to_pm(&x.local))).count();
    let conv_rows: Vec<usize> =
        t.conv.iter().filter_map(|i| if let Op::Conv(c) = &i.op { Some(c.output.len()) } else { None }).collect();
    let pool_rows: Vec<usize> =
        t.misc.iter().filter_map(|i| if let Op::Pool(p) = &i.op { Some(p.input.len()) } else { None }).collect();
    let saves = t.save.iter().filter(|i| !i.is_noop()).count();
    let got = (act_loads, conv_rows.clone(), pool_rows.clone(), saves);
    ensure(got == (12, vec![8], vec![2; 4], 4), || format!("got loads/conv rows/pool rows/saves {got:?}"))?;
    Ok(format!("T1: {act_loads} activation loads, 1 conv of 8 rows, 4 pools of 2 rows, {saves} saves"))
}

fn fusion_steady_state() -> Outcome {
    let cfg = MachineConfig::default();
    let vals = [1usize, 2, 3, 5, 7];
    let strides = [1usize, 2, 3];
    let (mut plans, mut enabled) = (0, 0);
    for &ck in &vals {
        for &cs in &strides {
            for &pk in &vals {
                for &ps in &strides {
                    let (in_h, in_w, in_c, out_c) = (64, 64, 8, 16);
                    let out = (in_h - ck) / cs + 1;
                    if out < pk {
                        continue;
                    }
                    let conv = OpGeometry {
                        in_h,
                        in_w,
                        in_c,
                        out_h: out,
                        out_w: out,
                        out_c,
                        rows: Window::new(ck, cs, 0),
                        cols: Window::new(ck, cs, 0),
                    };
                    let p = plan_fusion(&conv, Consumer::Pool(Window::new(pk, ps, 0)), &cfg);
                    plans += 1;
                    if p.enabled {
                        enabled += 1;
                        ensure(p.k * p.h_p == p.h_c, || format!("conv {ck}/{cs} pool {pk}/{ps}: {p:?}"))?;
                    }
                }
            }
        }
    }
    // Plans the compiler actually used on the corpus.
    let mut used = 0;
    for (name, g) in corpus::all() {
        let c = build(&g, &CompileOptions::default())?;
        for f in c.report.nodes.iter().filter_map(|n| n.fusion).filter(|f| f.enabled) {
            used += 1;
            ensure(f.k * f.h_p == f.h_c, || format!("{name}: {f:?}"))?;
        }
    }
    ensure(enabled > 0 && used > 0, || "no enabled plan to check".into())?;
    Ok(format!("k*h_p == h_c on {enabled}/{plans} enabled sweep plans and {used} corpus plans"))
}

fn pipelining_speedup() -> Outcome {
    let g = corpus::conv_pool();
    let c = build(&g, &CompileOptions::default())?;
    let seq = build(&g, &CompileOptions { pipelined: false, ..Default::default() })?;
    let (tp, ts) = (trace(&c)?, trace(&seq)?);
    let node = &c.report.nodes[0];
    ensure(c.report.nodes.len() == 1 && node.tiles >= 8, || {
        format!("expected one node of >= 8 tiles, got {:?}", c.report.nodes)
    })?;
    ensure(tp.makespan < ts.makespan, || format!("pipelined {} >= sequential {}", tp.makespan, ts.makespan))?;

    // Group of every instruction, from the same tiles the compiler scheduled.
    let low = relower(&c, OpKind::Conv)?;
    let stream = schedule_node(&low.tiles, &PipelineOptions { pipelined: true, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let aligned = stream.slots.len() == c.program.instrs.len()
        && stream.slots.iter().zip(&c.program.instrs).all(|(s, i)| s.instr.sub_op() == i.sub_op());
    ensure(aligned, || "stream does not line up with the compiled program".into())?;
    let mut span: BTreeMap<usize, (u64, u64, Phase)> = BTreeMap::new();
    let mut steady_busy: BTreeMap<OpType, u64> = BTreeMap::new();
    for (e, s) in tp.events.iter().zip(&stream.slots) {
        let g = span.entry(s.group).or_insert((u64::MAX, 0, s.phase));
        g.0 = g.0.min(e.start);
        g.1 = g.1.max(e.end());
        if s.phase == Phase::Steady {
            *steady_busy.entry(e.queue).or_default() += e.duration;
        }
    }
    let steady: Vec<(u64, u64)> = span.values().filter(|g| g.2 == Phase::Steady).map(|g| (g.0, g.1)).collect();
    ensure(!steady.is_empty(), || "no steady groups".into())?;
    // Head ends where the first steady group starts, tail starts where the last
    // one ends; busy is the largest per-queue total inside steady groups.
    let head = steady[0].0;
    let tail = tp.makespan - steady.last().unwrap().1;
    let period = steady.iter().map(|(a, b)| b - a).max().unwrap();
    let busy = steady_busy.values().copied().max().unwrap_or(0);
    let model = head + busy + tail;
    let gap = tp.makespan.abs_diff(model);
    ensure(gap <= period, || {
        format!(
            "makespan {} vs head {head} + busy {busy} + tail {tail} = {model}: gap {gap} > period {period}",
            tp.makespan
        )
    })?;
    Ok(format!(
        "{} tiles: pipelined {} < sequential {}; |makespan - (head+busy+tail)| = {gap} <= period {period}",
        node.tiles, tp.makespan, ts.makespan
    ))
}

fn deconv_graph(k: usize) -> Graph {
    let (xs, s, p, ci, co) = (Shape::new(8, 8, 4), 2, (k - 1) / 2, 4, 4);
    let o = |l: usize| l * s + 2 * p + 1 - k;
    let mut g = Graph::default();
    g.tensors.insert("x".into(), TensorRef::activation("x", xs, QuantInfo::int8(-4)));
    g.tensors.insert("y".into(), TensorRef::activation("y", Shape::new(o(xs.h), o(xs.w), co), QuantInfo::int8(-4)));
    let n = co * k * k * ci;
    let weights = (0..n).map(|i| ((i * 37 + k) % 49) as i8 - 24).collect();
    let bias = (0..co).map(|i| (i as i8) * 9 - 13).collect();
    let params = WeightSpec {
        co,
        kh: k,
        kw: k,
        ci,
        weights,
        bias,
        weight_quant: QuantInfo::int8(-6),
        bias_quant: QuantInfo::int8(-5),
    };
    g.nodes.push(Node::new(0, OpKind::Input, &[], "x"));
    g.nodes.push(Node::new(1, OpKind::Deconv, &["x"], "y").with_attrs(Attrs::window(k, s, p)).with_params(params));
    g.inputs = vec!["x".into()];
    g.outputs = vec!["y".into()];
    g
}

fn deconv_optimality() -> Outcome {
    let mut lines = Vec::new();
    for k in 2..=7 {
        let g = deconv_graph(k);
        g.validate().map_err(|e| e.to_string())?;
        let geo = DeconvGeometry::of(&g, &g.nodes[1]).map_err(|e| e.to_string())?;
        let subs = decompose_deconv(&geo).map_err(|e| e.to_string())?;
        ensure(subs.len() == 4, || format!("k={k}: {} sub-kernels", subs.len()))?;
        let mut taps = BTreeSet::new();
        for sk in &subs {
            for &ty in &sk.rows.taps {
                for &tx in &sk.cols.taps {
                    ensure(taps.insert((ty, tx)), || format!("k={k}: tap ({ty},{tx}) repeated"))?;
                }
            }
        }
        ensure(taps.len() == k * k, || format!("k={k}: taps cover {} of {}", taps.len(), k * k))?;
        let series_macs: u64 = subs.iter().map(|s| s.macs(4, 4)).sum();
        let up_macs = upsample_conv_macs(&geo, 4, 4);
        ensure(series_macs < up_macs, || format!("k={k}: {series_macs} >= {up_macs} MACs"))?;

        let series = build(&g, &CompileOptions::default())?;
        let upsample = build(&g, &CompileOptions { deconv: DeconvMode::Upsample, ..Default::default() })?;
        ensure(series.graph.nodes.iter().any(|n| n.op == OpKind::Deconv), || format!("k={k}: series path not taken"))?;
        for seed in 0..5 {
            let x = random_inputs(&g, seed);
            let (a, b) = (series.run(&x).map_err(|e| e.to_string())?, upsample.run(&x).map_err(|e| e.to_string())?);
            ensure(a == b, || format!("k={k} seed {seed}: outputs differ"))?;
        }
        let (ms, mu) = (trace(&series)?.makespan, trace(&upsample)?.makespan);
        ensure(ms < mu, || format!("k={k}: series makespan {ms} >= upsample {mu}"))?;
        lines.push(format!("k={k} {series_macs}/{up_macs} MACs {ms}/{mu} cycles"));
    }
    Ok(lines.join("; "))
}

fn hazard_freedom() -> Outcome {
    let mut checked = 0;
    for (name, g) in corpus::all() {
        for opts in [
            CompileOptions::default(),
            CompileOptions { pipelined: false, ..Default::default() },
            CompileOptions { deconv: DeconvMode::Upsample, ..Default::default() },
        ] {
            let c = build(&g, &opts)?;
            let h = c.hazards(&trace(&c)?);
            ensure(h.is_empty(), || format!("{name}: {} hazards, first {:?}", h.len(), h[0]))?;
            checked += 1;
        }
    }

    let mut c = build(&corpus::conv_pool(), &CompileOptions::default())?;
    // Dropped DPON: the first conv no longer waits for its loads.
    let mut dropped = c.program.clone();
    let at = dropped
        .instrs
        .iter()
        .position(|i| i.op_type() == OpType::Conv && !i.deps.dpon.is_empty())
        .ok_or("no dependent conv")?;
    dropped.instrs[at].deps.dpon = Default::default();
    let dropped_hazards = with_program(&mut c, dropped, |c| -> Result<usize, String> {
        let h = c.hazards(&trace(c)?);
        Ok(h.iter().filter(|h| h.kind == HazardKind::ReadBeforeWrite).count())
    })?;
    ensure(dropped_hazards > 0, || "dropped DPON not caught".into())?;

    // Overlapped allocation: move a slice onto another slice live at the same time.
    let s = &c.slices;
    let (a, b) = (0..s.len())
        .flat_map(|a| (0..s.len()).map(move |b| (a, b)))
        .find(|&(a, b)| {
            a != b
                && matches!(s[a].alloc.mem, MemId::Fm(_))
                && s[a].alloc.mem == s[b].alloc.mem
                && s[a].first_instr < s[b].first_instr
                && s[b].first_instr < s[a].last_instr
        })
        .ok_or("no concurrently live slices")?;
    c.slices[b].alloc.start = c.slices[a].alloc.start;
    let overlaps = c.hazards(&trace(&c)?).iter().filter(|h| h.kind == HazardKind::AllocationOverlap).count();
    ensure(overlaps > 0, || "overlapping allocation not caught".into())?;
    Ok(format!(
        "{checked} corpus programs clean; dropped DPON gives {dropped_hazards} RAW, overlap gives {overlaps} reports"
    ))
}

fn with_program<T>(c: &mut Compiled, p: Program, f: impl FnOnce(&Compiled) -> T) -> T {
    let saved = std::mem::replace(&mut c.program, p);
    let out = f(c);
    c.program = saved;
    out
}

fn weight_tiling() -> Outcome {
    let cfg = MachineConfig::default();
    let g = corpus::weight_tiled();
    let w = g.nodes.iter().find_map(|n| n.params.as_ref()).ok_or("no weights")?.weights.len();
    ensure(w as u64 > cfg.pm_bytes as u64, || format!("{w} B of weights fit PM"))?;
    let c = build(&g, &CompileOptions::default())?;
    let slabs = c.report.nodes[0].slabs;
    ensure(slabs >= 2, || format!("{slabs} slabs"))?;
    let t = trace(&c)?;
    let is_conv = |e: &&dpuc::sim::TraceEvent| matches!(e.color, ColorClass::Conv | ColorClass::ConvInit);
    let convs: Vec<_> = t.events.iter().filter(is_conv).collect();
    let overlapping = t
        .events
        .iter()
        .filter(|e| e.color == ColorClass::LoadWeight)
        .filter(|l| convs.iter().any(|c| l.start < c.end() && c.start < l.end()))
        .count();
    ensure(overlapping > 0, || "no weight load overlaps a conv".into())?;
    Ok(format!("{w} B of weights in {slabs} slabs; {overlapping} weight loads overlap a conv"))
}

fn artifacts(c: &Compiled) -> Result<Vec<String>, String> {
    let j = |v: serde_json::Result<String>| v.map_err(|e| e.to_string());
    Ok(vec![
        c.assembly(),
        format!("{:?}", c.params),
        j(serde_json::to_string(&c.manifest()))?,
        j(serde_json::to_string(&c.memory_map()))?,
        j(serde_json::to_string(&c.report))?,
        j(serde_json::to_string(&c.trees))?,
        j(serde_json::to_string(&trace(c)?))?,
    ])
}

fn determinism() -> Outcome {
    let run = || -> Result<Vec<String>, String> {
        let mut all = Vec::new();
        for (_, g) in corpus::all() {
            let c = build(&g, &CompileOptions::default())?;
            all.extend(artifacts(&c)?);
            let out = c.run(&random_inputs(&g, 0)).map_err(|e| e.to_string())?;
            all.push(format!("{out:?}"));
        }
        Ok(all)
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, || "artifacts differ between runs".into())?;
    Ok(format!("{} artifacts identical across two runs", a.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("T1 structure", first_tile_structure),
        ("fusion steady state", fusion_steady_state),
        ("pipelining speedup", pipelining_speedup),
        ("deconv optimality", deconv_optimality),
        ("hazard freedom", hazard_freedom),
        ("weight tiling", weight_tiling),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match r {
            Ok(d) => println!("criterion {} ({name}): PASS - {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL - {d}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
