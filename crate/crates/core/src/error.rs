use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("quantization error: {0}")]
    Quant(String),
    #[error("cannot fold quantizer: {0}")]
    Fold(String),
    #[error("graph has a cycle through {0}")]
    Cycle(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {msg}")]
pub struct AsmError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowerError {
    #[error("infeasible tiling: {0}")]
    Infeasible(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemError {
    #[error("out of memory in {space}: {need} units requested, capacity {capacity}")]
    OutOfMemory { space: String, need: u64, capacity: u64 },
    #[error("slice {slice} read at instruction {at} before any write")]
    UseBeforeDef { slice: u32, at: usize },
    #[error("port conflict on FM{mem}: {detail}")]
    PortConflict { mem: u8, detail: String },
    #[error("DDR capacity exceeded: {need} bytes > {cap}")]
    Capacity { need: u64, cap: u64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("dependency not expressible by type: {0}")]
    Encoding(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("instruction {index}: out of bounds: {msg}")]
    OutOfBounds { index: usize, msg: String },
    #[error("instruction {index}: read of undefined data: {msg}")]
    UseBeforeDef { index: usize, msg: String },
    #[error("deadlock at cycle {cycle}: {pending} instructions never started")]
    Deadlock { cycle: u64, pending: usize },
    #[error("shape error: {0}")]
    Shape(String),
}

impl From<GraphError> for SimError {
    fn from(e: GraphError) -> Self {
        SimError::Shape(e.to_string())
    }
}

/// One failed try of the compile retry ladder.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Attempt {
    pub schedule: usize,
    pub h_c: u32,
    pub gamma: u32,
    pub fused: bool,
    pub error: String,
}

impl std::fmt::Display for Attempt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "schedule {} h_c={} gamma={} {}: {}",
            self.schedule,
            self.h_c,
            self.gamma,
            if self.fused { "fused" } else { "unfused" },
            self.error
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("compilation failed after {} attempts:{}", .0.len(), .0.iter().map(|a| format!("\n  {a}")).collect::<String>())]
    Failed(Vec<Attempt>),
}
