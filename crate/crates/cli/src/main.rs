//! `dpuc`: compile graph documents, run compiled programs, verify them
//! against the reference executor and draw timing traces.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpuc::compile::{compile, execute, prepare, random_inputs, CompileOptions, DeconvMode, Manifest, MemoryMap};
use dpuc::graph::parse_graph;
use dpuc::hw::{parse_assembly, MachineConfig, Program};
use dpuc::memory::SliceAlloc;
use dpuc::sim::{check_hazards, emit_timeline, reference_execute, run_timing, HazardContext, TimelineFormat, Trace};

#[derive(Parser)]
#[command(name = "dpuc", version, about = "Compiler and simulator for an abstract int8 CNN accelerator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a graph document into an artifact directory.
    Compile(CompileArgs),
    /// Execute compiled artifacts functionally and/or in time.
    Run(RunArgs),
    /// Compile (or load) and compare against the reference executor on random inputs.
    Verify(VerifyArgs),
    /// Render a trace as an SVG or JSON timeline.
    Viz(VizArgs),
    /// Write the built-in example graphs as JSON documents.
    Corpus {
        /// Destination directory.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct CompileFlags {
    /// Machine configuration file; defaults apply to missing fields.
    #[arg(long, env = "DPUC_CONFIG")]
    config: Option<PathBuf>,
    /// Emit the sequential stream instead of the software-pipelined one.
    #[arg(long)]
    no_pipeline: bool,
    /// How transpose convolutions are compiled.
    #[arg(long, value_enum, default_value_t = Deconv::Series)]
    deconv: Deconv,
    /// Schedules tried before giving up.
    #[arg(long, default_value_t = 4)]
    schedules: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Deconv {
    Series,
    Upsample,
}

#[derive(Args)]
struct CompileArgs {
    graph: PathBuf,
    #[command(flatten)]
    flags: CompileFlags,
    /// Artifact directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    /// Also write memmap.json: segment table and per-slice allocations.
    #[arg(long)]
    dump_mem: bool,
    /// Also write tiles.json: the tile tree of every node.
    #[arg(long)]
    dump_tiles: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Functional,
    Timing,
    Both,
}

#[derive(Args)]
struct RunArgs {
    /// Artifact directory written by `compile`.
    artifacts: PathBuf,
    /// Input tensor as `name=path`, or just `path` for a single-input graph.
    #[arg(short, long)]
    input: Vec<String>,
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    mode: Mode,
    /// Directory for output tensors and trace.json.
    #[arg(short, long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    graph: PathBuf,
    #[command(flatten)]
    flags: CompileFlags,
    /// Random input seeds.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Check these artifacts instead of compiling afresh.
    #[arg(long)]
    artifacts: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    trace: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Svg)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Svg,
    Json,
}

/// Exit codes of `verify`; other commands use 0 and 1.
const MISMATCH: u8 = 1;
const HAZARD: u8 = 2;
const COMPILE_FAILURE: u8 = 3;

struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8) -> impl Fn(String) -> Failure {
    move |msg| Failure { code, msg }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure { code: 1, msg: format!("{}: {e}", path.display()) })
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure { code: 1, msg: format!("{}: {e}", path.display()) })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure { code: 1, msg: format!("{}: {e}", dir.display()) })?;
    }
    fs::write(path, bytes).map_err(|e| Failure { code: 1, msg: format!("{}: {e}", path.display()) })
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure { code: 1, msg: format!("{}: {e}", path.display()) })
}

impl CompileFlags {
    fn config(&self) -> Result<MachineConfig, Failure> {
        match &self.config {
            Some(p) => MachineConfig::from_json(&read_text(p)?).map_err(|e| fail(1)(format!("{}: {e}", p.display()))),
            None => Ok(MachineConfig::default()),
        }
    }

    fn options(&self) -> CompileOptions {
        let deconv = match self.deconv {
            Deconv::Series => DeconvMode::Series,
            Deconv::Upsample => DeconvMode::Upsample,
        };
        CompileOptions { pipelined: !self.no_pipeline, deconv, schedules: self.schedules }
    }
}

fn cmd_compile(a: &CompileArgs) -> Result<(), Failure> {
    let cfg = a.flags.config()?;
    let g = parse_graph(&read_text(&a.graph)?).map_err(|e| fail(COMPILE_FAILURE)(e.to_string()))?;
    let c = compile(&g, &cfg, &a.flags.options()).map_err(|e| fail(COMPILE_FAILURE)(e.to_string()))?;
    write(&a.out.join("program.asm"), c.assembly())?;
    write(&a.out.join("params.bin"), &c.params)?;
    write(&a.out.join("manifest.json"), json(&c.manifest()))?;
    write(&a.out.join("report.json"), json(&c.report))?;
    if a.dump_mem {
        write(&a.out.join("memmap.json"), json(&c.memory_map()))?;
    }
    if a.dump_tiles {
        write(&a.out.join("tiles.json"), json(&c.trees))?;
    }
    eprintln!(
        "{}: {} instructions, estimated makespan {} cycles",
        a.graph.display(),
        c.report.instructions,
        c.report.makespan
    );
    Ok(())
}

/// Program, parameter image, manifest and (if dumped) slice allocations.
struct Loaded {
    program: Program,
    params: Vec<u8>,
    manifest: Manifest,
    slices: Vec<SliceAlloc>,
}

fn load(dir: &Path) -> Result<Loaded, Failure> {
    let asm = dir.join("program.asm");
    let program = parse_assembly(&read_text(&asm)?).map_err(|e| fail(1)(format!("{}: {e}", asm.display())))?;
    let mm = dir.join("memmap.json");
    let slices = if mm.exists() { parse_json::<MemoryMap>(&mm)?.slices } else { Vec::new() };
    Ok(Loaded {
        program,
        params: read(&dir.join("params.bin"))?,
        manifest: parse_json(&dir.join("manifest.json"))?,
        slices,
    })
}

fn cmd_run(a: &RunArgs) -> Result<(), Failure> {
    let l = load(&a.artifacts)?;
    let cfg = &l.manifest.config;
    if a.mode != Mode::Timing {
        let mut inputs = BTreeMap::new();
        for spec in &a.input {
            let (name, path) = match spec.split_once('=') {
                Some((n, p)) => (n.to_string(), p),
                None if l.manifest.inputs.len() == 1 => (l.manifest.inputs[0].clone(), spec.as_str()),
                None => return Err(fail(1)(format!("input {spec} needs a name= prefix"))),
            };
            let data = read(Path::new(path))?.into_iter().map(|b| b as i8).collect();
            inputs.insert(name, data);
        }
        let out = execute(&l.program, &l.manifest.layout, &l.params, &l.manifest.outputs, &inputs, cfg)
            .map_err(|e| fail(1)(e.to_string()))?;
        for (name, data) in out {
            let bytes: Vec<u8> = data.into_iter().map(|v| v as u8).collect();
            write(&a.out.join(format!("{name}.bin")), bytes)?;
        }
    }
    if a.mode != Mode::Functional {
        let t = run_timing(&l.program, cfg).map_err(|e| fail(1)(e.to_string()))?;
        write(&a.out.join("trace.json"), json(&t))?;
        eprintln!("makespan {} cycles", t.makespan);
    }
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<(), Failure> {
    let opts = a.flags.options();
    let g = parse_graph(&read_text(&a.graph)?).map_err(|e| fail(COMPILE_FAILURE)(e.to_string()))?;
    let reference = prepare(&g, opts.deconv).map_err(|e| fail(COMPILE_FAILURE)(e.to_string()))?;
    let l = match &a.artifacts {
        Some(dir) => load(dir)?,
        None => {
            let c = compile(&g, &a.flags.config()?, &opts).map_err(|e| fail(COMPILE_FAILURE)(e.to_string()))?;
            Loaded { manifest: c.manifest(), params: c.params, slices: c.slices, program: c.program }
        }
    };
    let cfg = &l.manifest.config;
    let mismatches: Vec<String> = std::thread::scope(|s| {
        let jobs: Vec<_> = (0..a.seeds)
            .map(|seed| {
                let (l, reference, g) = (&l, &reference, &g);
                s.spawn(move || {
                    let x = random_inputs(g, seed);
                    let want = reference_execute(reference, &x).map_err(|e| format!("seed {seed}: reference: {e}"))?;
                    let got = execute(&l.program, &l.manifest.layout, &l.params, &l.manifest.outputs, &x, cfg)
                        .map_err(|e| format!("seed {seed}: {e}"))?;
                    match want.iter().find(|(k, v)| got.get(*k) != Some(v)) {
                        Some((k, _)) => Err(format!("seed {seed}: output {k} differs from the reference")),
                        None => Ok(()),
                    }
                })
            })
            .collect();
        jobs.into_iter().filter_map(|j| j.join().expect("worker").err()).collect()
    });
    if let Some(first) = mismatches.first() {
        return Err(fail(MISMATCH)(format!("{} of {} seeds failed; {first}", mismatches.len(), a.seeds)));
    }
    let trace = run_timing(&l.program, cfg).map_err(|e| fail(HAZARD)(e.to_string()))?;
    let ctx = HazardContext { cfg, layout: Some(&l.manifest.layout), slices: &l.slices };
    let hazards = check_hazards(&l.program, &trace, &ctx);
    if let Some(h) = hazards.first() {
        return Err(fail(HAZARD)(format!(
            "{} hazards; first: {:?} at instruction {}: {}",
            hazards.len(),
            h.kind,
            h.instr,
            h.detail
        )));
    }
    eprintln!("{}: {} seeds match, no hazards, makespan {} cycles", a.graph.display(), a.seeds, trace.makespan);
    Ok(())
}

fn cmd_viz(a: &VizArgs) -> Result<(), Failure> {
    let t: Trace = parse_json(&a.trace)?;
    let format = match a.format {
        Format::Svg => TimelineFormat::Svg,
        Format::Json => TimelineFormat::Json,
    };
    write(&a.out, emit_timeline(&t, format))
}

fn cmd_corpus(dir: &Path) -> Result<(), Failure> {
    for (name, g) in dpuc::corpus::all() {
        write(&dir.join(format!("{name}.json")), g.to_json() + "\n")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Compile(a) => cmd_compile(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Viz(a) => cmd_viz(a),
        Cmd::Corpus { dir } => cmd_corpus(dir),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
