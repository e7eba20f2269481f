//! The four-type instruction set and its typed dependency fields.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpType {
    Load,
    Save,
    Conv,
    Misc,
}

impl OpType {
    pub const ALL: [OpType; 4] = [OpType::Load, OpType::Save, OpType::Conv, OpType::Misc];

    /// Mask bit; the textual mask lists LOAD, SAVE, CONV, MISC from MSB to LSB.
    pub fn bit(self) -> u8 {
        match self {
            OpType::Load => 0b1000,
            OpType::Save => 0b0100,
            OpType::Conv => 0b0010,
            OpType::Misc => 0b0001,
        }
    }

    pub fn index(self) -> usize {
        match self {
            OpType::Load => 0,
            OpType::Save => 1,
            OpType::Conv => 2,
            OpType::Misc => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpType::Load => "LOAD",
            OpType::Save => "SAVE",
            OpType::Conv => "CONV",
            OpType::Misc => "MISC",
        }
    }

    pub fn from_name(s: &str) -> Option<OpType> {
        OpType::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Subset of the four op types, stored as a 4-bit mask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TypeSet(u8);

impl TypeSet {
    pub const EMPTY: TypeSet = TypeSet(0);

    pub fn of(types: &[OpType]) -> Self {
        types.iter().fold(TypeSet::EMPTY, |s, &t| s.with(t))
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits < 16).then_some(TypeSet(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, t: OpType) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn with(self, t: OpType) -> Self {
        TypeSet(self.0 | t.bit())
    }

    pub fn without(self, t: OpType) -> Self {
        TypeSet(self.0 & !t.bit())
    }

    pub fn insert(&mut self, t: OpType) {
        *self = self.with(t);
    }

    pub fn union(self, other: TypeSet) -> Self {
        TypeSet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = OpType> {
        OpType::ALL.into_iter().filter(move |&t| self.contains(t))
    }

    pub fn mask(self) -> String {
        format!("0b{:04b}", self.0)
    }
}

impl fmt::Debug for TypeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DepSets {
    pub dpon: TypeSet,
    pub dpby: TypeSet,
}

/// Local memory address. `Slice` is symbolic until allocation resolves it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Loc {
    Slice { id: u32, off: u32 },
    Fm { mem: u8, addr: u32 },
    Pm { addr: u32 },
}

impl Loc {
    pub fn slice(id: u32) -> Self {
        Loc::Slice { id, off: 0 }
    }

    /// Same memory, `bytes` further along (wrap is applied by the consumer).
    pub fn offset(self, bytes: u32) -> Self {
        match self {
            Loc::Slice { id, off } => Loc::Slice { id, off: off + bytes },
            Loc::Fm { mem, addr } => Loc::Fm { mem, addr: addr + bytes },
            Loc::Pm { addr } => Loc::Pm { addr: addr + bytes },
        }
    }

    pub fn is_pm(self) -> bool {
        matches!(self, Loc::Pm { .. })
    }
}

/// DDR access of `count` chunks of `chunk` bytes, `stride` apart, against a
/// contiguous local buffer of `chunk * count` bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub ddr: u64,
    pub chunk: u32,
    pub count: u32,
    pub stride: u64,
    pub local: Loc,
}

impl Transfer {
    pub fn bytes(&self) -> u64 {
        self.chunk as u64 * self.count as u64
    }

    pub fn ddr_chunks(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        (0..self.count as u64).map(|i| (self.ddr + i * self.stride, self.chunk))
    }
}

/// Convolution over a row window. Input rows `in_row0..` hold columns
/// `in_col0..in_col0+in_cols`; positions outside `[0,in_h) x [0,in_w)` read
/// as zero. `pad` may be negative (the window then starts inside the input).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvOp {
    pub input: Vec<Loc>,
    pub in_row0: u32,
    pub in_col0: u32,
    pub in_cols: u32,
    pub in_ch: u32,
    pub in_h: u32,
    pub in_w: u32,
    pub output: Vec<Loc>,
    pub out_row0: u32,
    pub out_col0: u32,
    pub out_cols: u32,
    pub out_ch: u32,
    pub kernel: [u32; 2],
    pub stride: [u32; 2],
    pub pad: [i32; 2],
    /// Weights `(out_ch, kh, kw, in_ch)` followed by nothing; bias is separate.
    pub weights: Loc,
    /// `out_ch` little-endian int32 values at the accumulator exponent.
    pub bias: Loc,
    pub shift: i32,
    pub relu: bool,
    /// First convolution after a weight slab was loaded.
    pub init: bool,
}

impl ConvOp {
    pub fn macs(&self) -> u64 {
        self.output.len() as u64
            * self.out_cols as u64
            * self.out_ch as u64
            * self.kernel[0] as u64
            * self.kernel[1] as u64
            * self.in_ch as u64
    }

    pub fn weight_bytes(&self) -> u32 {
        self.out_ch * self.kernel[0] * self.kernel[1] * self.in_ch
    }
}

/// Max pooling with the same row-window addressing as [`ConvOp`]; padded
/// positions are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolOp {
    pub input: Vec<Loc>,
    pub in_row0: u32,
    pub in_col0: u32,
    pub in_cols: u32,
    pub ch: u32,
    pub in_h: u32,
    pub in_w: u32,
    pub output: Vec<Loc>,
    pub out_row0: u32,
    pub out_col0: u32,
    pub out_cols: u32,
    pub kernel: [u32; 2],
    pub stride: [u32; 2],
    pub pad: [u32; 2],
    pub shift: i32,
}

/// Row-wise `a * 2^la + b * 2^lb`, requantized by `shift`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EltOp {
    pub a: Vec<Loc>,
    pub b: Vec<Loc>,
    pub output: Vec<Loc>,
    pub row_bytes: u32,
    pub la: u32,
    pub lb: u32,
    pub shift: i32,
    pub relu: bool,
}

/// Data movement: zero-fill `zero` rows, then copy each source row of
/// `cols * ch` bytes to its destination with columns `pitch` bytes apart,
/// requantizing by `shift`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveOp {
    pub zero: Vec<Loc>,
    pub zero_bytes: u32,
    pub rows: Vec<(Loc, Loc)>,
    pub cols: u32,
    pub ch: u32,
    pub pitch: u32,
    pub shift: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Load(Transfer),
    Save(Transfer),
    Conv(ConvOp),
    Pool(PoolOp),
    Elt(EltOp),
    Move(MoveOp),
    Nop(OpType),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub deps: DepSets,
    pub op: Op,
}

/// A memory range touched by an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Local { loc: Loc, len: u32 },
    Ddr { addr: u64, len: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub region: Region,
    pub write: bool,
}

impl Instruction {
    pub fn new(op: Op) -> Self {
        Instruction { deps: DepSets::default(), op }
    }

    pub fn nop(t: OpType) -> Self {
        Instruction::new(Op::Nop(t))
    }

    pub fn op_type(&self) -> OpType {
        match &self.op {
            Op::Load(_) => OpType::Load,
            Op::Save(_) => OpType::Save,
            Op::Conv(_) => OpType::Conv,
            Op::Pool(_) | Op::Elt(_) | Op::Move(_) => OpType::Misc,
            Op::Nop(t) => *t,
        }
    }

    pub fn is_noop(&self) -> bool {
        matches!(self.op, Op::Nop(_))
    }

    pub fn sub_op(&self) -> &'static str {
        match &self.op {
            Op::Load(_) => "load",
            Op::Save(_) => "save",
            Op::Conv(c) if c.init => "conv-init",
            Op::Conv(_) => "conv",
            Op::Pool(_) => "maxpool",
            Op::Elt(_) => "eltwise",
            Op::Move(_) => "move",
            Op::Nop(_) => "noop",
        }
    }

    pub fn for_each_loc_mut(&mut self, mut f: impl FnMut(&mut Loc)) {
        match &mut self.op {
            Op::Load(t) | Op::Save(t) => f(&mut t.local),
            Op::Conv(c) => {
                c.input.iter_mut().chain(c.output.iter_mut()).for_each(&mut f);
                f(&mut c.weights);
                f(&mut c.bias);
            }
            Op::Pool(p) => p.input.iter_mut().chain(p.output.iter_mut()).for_each(f),
            Op::Elt(e) => e.a.iter_mut().chain(e.b.iter_mut()).chain(e.output.iter_mut()).for_each(f),
            Op::Move(m) => {
                m.zero.iter_mut().for_each(&mut f);
                for (s, d) in m.rows.iter_mut() {
                    f(s);
                    f(d);
                }
            }
            Op::Nop(_) => {}
        }
    }

    pub fn locs(&self) -> Vec<Loc> {
        let mut out = Vec::new();
        self.clone().for_each_loc_mut(|l| out.push(*l));
        out
    }

    /// Every memory range read or written, at the granularity the data is used.
    pub fn accesses(&self) -> Vec<Access> {
        let local = |loc: Loc, len: u32, write: bool| Access { region: Region::Local { loc, len }, write };
        let mut out = Vec::new();
        match &self.op {
            Op::Load(t) | Op::Save(t) => {
                let load = matches!(self.op, Op::Load(_));
                for (addr, len) in t.ddr_chunks() {
                    out.push(Access { region: Region::Ddr { addr, len }, write: !load });
                }
                out.push(local(t.local, t.chunk * t.count, load));
            }
            Op::Conv(c) => {
                out.extend(c.input.iter().map(|&l| local(l, c.in_cols * c.in_ch, false)));
                out.push(local(c.weights, c.weight_bytes(), false));
                out.push(local(c.bias, 4 * c.out_ch, false));
                out.extend(c.output.iter().map(|&l| local(l, c.out_cols * c.out_ch, true)));
            }
            Op::Pool(p) => {
                out.extend(p.input.iter().map(|&l| local(l, p.in_cols * p.ch, false)));
                out.extend(p.output.iter().map(|&l| local(l, p.out_cols * p.ch, true)));
            }
            Op::Elt(e) => {
                out.extend(e.a.iter().chain(e.b.iter()).map(|&l| local(l, e.row_bytes, false)));
                out.extend(e.output.iter().map(|&l| local(l, e.row_bytes, true)));
            }
            Op::Move(m) => {
                out.extend(m.zero.iter().map(|&l| local(l, m.zero_bytes, true)));
                for &(s, d) in &m.rows {
                    out.push(local(s, m.cols * m.ch, false));
                    if m.pitch == m.ch {
                        out.push(local(d, m.cols * m.ch, true));
                    } else {
                        out.extend((0..m.cols).map(|j| local(d.offset(j * m.pitch), m.ch, true)));
                    }
                }
            }
            Op::Nop(_) => {}
        }
        out
    }
}

/// Issue-ordered instruction stream.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Program {
    pub instrs: Vec<Instruction>,
}
