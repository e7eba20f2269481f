//! Bit-exact execution of a resolved program against a byte-level machine
//! image. Instructions run in issue order; every read must hit bytes that
//! were written before.

use crate::error::SimError;
use crate::hw::{Instruction, Loc, MachineConfig, Op, Program, Transfer};
use crate::quant::{add_apply, saturate_i8, scale_round};

/// One byte array with a defined-bit per byte. `circular` memories wrap.
#[derive(Debug, Clone)]
pub struct Memory {
    pub name: String,
    pub data: Vec<u8>,
    pub defined: Vec<bool>,
    pub circular: bool,
}

impl Memory {
    pub fn new(name: &str, size: usize, circular: bool) -> Self {
        Memory { name: name.to_string(), data: vec![0; size], defined: vec![false; size], circular }
    }

    /// Byte ranges of an access; a wrapping access on a circular memory gives two.
    #[allow(clippy::single_range_in_vec_init)]
    fn index(&self, addr: u64, len: usize) -> Result<Vec<std::ops::Range<usize>>, String> {
        let cap = self.data.len();
        if self.circular {
            if len > cap || cap == 0 {
                return Err(format!("{len} bytes exceed {} capacity {cap}", self.name));
            }
            let a = (addr % cap as u64) as usize;
            if a + len <= cap {
                Ok(vec![a..a + len])
            } else {
                Ok(vec![a..cap, 0..a + len - cap])
            }
        } else if addr as usize + len > cap {
            Err(format!("{} access [{addr}, {}) beyond size {cap}", self.name, addr as usize + len))
        } else {
            Ok(vec![addr as usize..addr as usize + len])
        }
    }

    pub fn read(&self, addr: u64, len: usize) -> Result<Vec<u8>, (bool, String)> {
        let parts = self.index(addr, len).map_err(|m| (false, m))?;
        let mut out = Vec::with_capacity(len);
        for r in parts {
            if let Some(i) = self.defined[r.clone()].iter().position(|d| !d) {
                return Err((true, format!("{} byte {} never written", self.name, r.start + i)));
            }
            out.extend_from_slice(&self.data[r]);
        }
        Ok(out)
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), String> {
        let mut src = 0;
        for r in self.index(addr, bytes.len())? {
            let n = r.len();
            self.data[r.clone()].copy_from_slice(&bytes[src..src + n]);
            self.defined[r].iter_mut().for_each(|d| *d = true);
            src += n;
        }
        Ok(())
    }
}

/// DDR, the FM memories and PM.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub ddr: Memory,
    pub fm: Vec<Memory>,
    pub pm: Memory,
}

impl MachineState {
    pub fn new(cfg: &MachineConfig, ddr_bytes: u64) -> Self {
        MachineState {
            ddr: Memory::new("DDR", ddr_bytes as usize, false),
            fm: (0..cfg.fm_memories)
                .map(|m| Memory::new(&format!("FM{m}"), cfg.fm_capacity() as usize, true))
                .collect(),
            pm: Memory::new("PM", cfg.pm_bytes as usize, true),
        }
    }

    fn local(&mut self, loc: Loc) -> Result<(&mut Memory, u64), String> {
        match loc {
            Loc::Fm { mem, addr } => {
                let m = self.fm.get_mut(mem as usize).ok_or(format!("FM{mem} does not exist"))?;
                Ok((m, addr as u64))
            }
            Loc::Pm { addr } => Ok((&mut self.pm, addr as u64)),
            Loc::Slice { id, .. } => Err(format!("slice {id} was never allocated")),
        }
    }
}

struct Exec<'a> {
    st: &'a mut MachineState,
    index: usize,
}

impl Exec<'_> {
    fn oob(&self, msg: String) -> SimError {
        SimError::OutOfBounds { index: self.index, msg }
    }

    fn map_read(&self, e: (bool, String)) -> SimError {
        if e.0 {
            SimError::UseBeforeDef { index: self.index, msg: e.1 }
        } else {
            SimError::OutOfBounds { index: self.index, msg: e.1 }
        }
    }

    fn read(&mut self, loc: Loc, len: usize) -> Result<Vec<u8>, SimError> {
        let (m, a) = self.st.local(loc).map_err(|m| SimError::OutOfBounds { index: self.index, msg: m })?;
        let r = m.read(a, len);
        r.map_err(|e| self.map_read(e))
    }

    fn write(&mut self, loc: Loc, bytes: &[u8]) -> Result<(), SimError> {
        let index = self.index;
        let (m, a) = self.st.local(loc).map_err(|msg| SimError::OutOfBounds { index, msg })?;
        m.write(a, bytes).map_err(|msg| SimError::OutOfBounds { index, msg })
    }

    fn read_rows(&mut self, rows: &[Loc], len: usize) -> Result<Vec<Vec<i8>>, SimError> {
        rows.iter().map(|&l| Ok(self.read(l, len)?.into_iter().map(|b| b as i8).collect())).collect()
    }

    fn transfer(&mut self, t: &Transfer, load: bool) -> Result<(), SimError> {
        for (i, (addr, len)) in t.ddr_chunks().enumerate() {
            let local = t.local.offset(i as u32 * t.chunk);
            if load {
                let bytes = self.st.ddr.read(addr, len as usize).map_err(|e| self.map_read(e))?;
                self.write(local, &bytes)?;
            } else {
                let bytes = self.read(local, len as usize)?;
                self.st.ddr.write(addr, &bytes).map_err(|m| self.oob(m))?;
            }
        }
        Ok(())
    }

    fn step(&mut self, ins: &Instruction) -> Result<(), SimError> {
        match &ins.op {
            Op::Load(t) => self.transfer(t, true),
            Op::Save(t) => self.transfer(t, false),
            Op::Nop(_) => Ok(()),
            Op::Conv(c) => {
                let input = self.read_rows(&c.input, (c.in_cols * c.in_ch) as usize)?;
                let w: Vec<i8> =
                    self.read(c.weights, c.weight_bytes() as usize)?.into_iter().map(|b| b as i8).collect();
                let bias: Vec<i64> = self
                    .read(c.bias, 4 * c.out_ch as usize)?
                    .chunks(4)
                    .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as i64)
                    .collect();
                let (kh, kw, ci, co) = (c.kernel[0] as i64, c.kernel[1] as i64, c.in_ch as usize, c.out_ch as usize);
                let mut acc = vec![0i64; co];
                for (r, &out_loc) in c.output.iter().enumerate() {
                    let y = (c.out_row0 as usize + r) as i64;
                    let mut row = Vec::with_capacity((c.out_cols as usize) * co);
                    for xo in 0..c.out_cols as i64 {
                        let x = c.out_col0 as i64 + xo;
                        acc.copy_from_slice(&bias);
                        for ky in 0..kh {
                            let iy = y * c.stride[0] as i64 - c.pad[0] as i64 + ky;
                            if iy < 0 || iy >= c.in_h as i64 {
                                continue;
                            }
                            let ri = iy - c.in_row0 as i64;
                            if ri < 0 || ri as usize >= input.len() {
                                return Err(self.oob(format!("conv needs input row {iy}, not provided")));
                            }
                            let irow = &input[ri as usize];
                            for kx in 0..kw {
                                let ix = x * c.stride[1] as i64 - c.pad[1] as i64 + kx;
                                if ix < 0 || ix >= c.in_w as i64 {
                                    continue;
                                }
                                let cx = ix - c.in_col0 as i64;
                                if cx < 0 || cx >= c.in_cols as i64 {
                                    return Err(self.oob(format!("conv needs input column {ix}, not provided")));
                                }
                                let px = &irow[cx as usize * ci..(cx as usize + 1) * ci];
                                let tap = ((ky * kw + kx) as usize) * ci;
                                for (o, a) in acc.iter_mut().enumerate() {
                                    let wk = &w[o * (kh * kw) as usize * ci + tap..][..ci];
                                    *a += px.iter().zip(wk).map(|(&p, &q)| p as i64 * q as i64).sum::<i64>();
                                }
                            }
                        }
                        for &a in &acc {
                            let v = saturate_i8(scale_round(a, c.shift));
                            row.push(if c.relu { v.max(0) } else { v } as u8);
                        }
                    }
                    self.write(out_loc, &row)?;
                }
                Ok(())
            }
            Op::Pool(p) => {
                let input = self.read_rows(&p.input, (p.in_cols * p.ch) as usize)?;
                let ch = p.ch as usize;
                for (r, &out_loc) in p.output.iter().enumerate() {
                    let y = (p.out_row0 as usize + r) as i64;
                    let mut row = Vec::with_capacity(p.out_cols as usize * ch);
                    for xo in 0..p.out_cols as i64 {
                        let x = p.out_col0 as i64 + xo;
                        let mut best = vec![i64::MIN; ch];
                        for ky in 0..p.kernel[0] as i64 {
                            let iy = y * p.stride[0] as i64 - p.pad[0] as i64 + ky;
                            if iy < 0 || iy >= p.in_h as i64 {
                                continue;
                            }
                            let ri = iy - p.in_row0 as i64;
                            if ri < 0 || ri as usize >= input.len() {
                                return Err(self.oob(format!("pool needs input row {iy}, not provided")));
                            }
                            for kx in 0..p.kernel[1] as i64 {
                                let ix = x * p.stride[1] as i64 - p.pad[1] as i64 + kx;
                                if ix < 0 || ix >= p.in_w as i64 {
                                    continue;
                                }
                                let cx = ix - p.in_col0 as i64;
                                if cx < 0 || cx >= p.in_cols as i64 {
                                    return Err(self.oob(format!("pool needs input column {ix}, not provided")));
                                }
                                let px = &input[ri as usize][cx as usize * ch..(cx as usize + 1) * ch];
                                for (b, &v) in best.iter_mut().zip(px) {
                                    *b = (*b).max(v as i64);
                                }
                            }
                        }
                        row.extend(best.iter().map(|&b| saturate_i8(scale_round(b, p.shift)) as u8));
                    }
                    self.write(out_loc, &row)?;
                }
                Ok(())
            }
            Op::Elt(e) => {
                let n = e.row_bytes as usize;
                let a = self.read_rows(&e.a, n)?;
                let b = self.read_rows(&e.b, n)?;
                for ((ra, rb), &o) in a.iter().zip(&b).zip(&e.output) {
                    let row: Vec<u8> =
                        ra.iter().zip(rb).map(|(&x, &y)| add_apply(x, y, e.la, e.lb, e.shift, e.relu) as u8).collect();
                    self.write(o, &row)?;
                }
                Ok(())
            }
            Op::Move(m) => {
                let zeros = vec![0u8; m.zero_bytes as usize];
                for &z in &m.zero {
                    self.write(z, &zeros)?;
                }
                let (cols, ch) = (m.cols as usize, m.ch as usize);
                for &(src, dst) in &m.rows {
                    let data = self.read(src, cols * ch)?;
                    let conv: Vec<u8> =
                        data.iter().map(|&b| saturate_i8(scale_round(b as i8 as i64, m.shift)) as u8).collect();
                    if m.pitch == m.ch {
                        self.write(dst, &conv)?;
                    } else {
                        for j in 0..cols {
                            self.write(dst.offset(j as u32 * m.pitch), &conv[j * ch..(j + 1) * ch])?;
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

/// Execute `p` in issue order.
pub fn run_functional(p: &Program, mut state: MachineState) -> Result<MachineState, SimError> {
    let mut ex = Exec { st: &mut state, index: 0 };
    for (i, ins) in p.instrs.iter().enumerate() {
        ex.index = i;
        ex.step(ins)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::ConvOp;

    fn cfg() -> MachineConfig {
        MachineConfig::default()
    }

    #[test]
    fn save_of_unwritten_fm_is_use_before_def() {
        let t = Transfer { ddr: 0, chunk: 8, count: 1, stride: 8, local: Loc::Fm { mem: 1, addr: 0 } };
        let p = Program { instrs: vec![Instruction::new(Op::Save(t))] };
        let e = run_functional(&p, MachineState::new(&cfg(), 64)).unwrap_err();
        assert!(matches!(e, SimError::UseBeforeDef { index: 0, .. }));
    }

    #[test]
    fn load_past_ddr_is_out_of_bounds() {
        let t = Transfer { ddr: 60, chunk: 8, count: 1, stride: 8, local: Loc::Fm { mem: 0, addr: 0 } };
        let p = Program { instrs: vec![Instruction::new(Op::Load(t))] };
        let e = run_functional(&p, MachineState::new(&cfg(), 64)).unwrap_err();
        assert!(matches!(e, SimError::OutOfBounds { index: 0, .. }));
    }

    #[test]
    fn fm_accesses_wrap() {
        let mut m = Memory::new("FM0", 16, true);
        m.write(14, &[1, 2, 3, 4]).unwrap();
        assert_eq!(m.read(14, 4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(m.data[..2], [3, 4]);
    }

    #[test]
    fn single_mac_conv() {
        let mut st = MachineState::new(&cfg(), 64);
        st.ddr.write(0, &[3]).unwrap();
        st.ddr.write(8, &[2, 1, 0, 0, 0]).unwrap();
        let fm0 = Loc::Fm { mem: 0, addr: 0 };
        let pm = Loc::Pm { addr: 0 };
        let fm1 = Loc::Fm { mem: 1, addr: 0 };
        let load = |ddr, chunk, local| {
            Instruction::new(Op::Load(Transfer { ddr, chunk, count: 1, stride: chunk as u64, local }))
        };
        let conv = ConvOp {
            input: vec![fm0],
            in_row0: 0,
            in_col0: 0,
            in_cols: 1,
            in_ch: 1,
            in_h: 1,
            in_w: 1,
            output: vec![fm1],
            out_row0: 0,
            out_col0: 0,
            out_cols: 1,
            out_ch: 1,
            kernel: [1, 1],
            stride: [1, 1],
            pad: [0, 0],
            weights: pm,
            bias: pm.offset(1),
            shift: 0,
            relu: false,
            init: true,
        };
        let save = Instruction::new(Op::Save(Transfer { ddr: 32, chunk: 1, count: 1, stride: 1, local: fm1 }));
        let p = Program { instrs: vec![load(0, 1, fm0), load(8, 5, pm), Instruction::new(Op::Conv(conv)), save] };
        let st = run_functional(&p, st).unwrap();
        assert_eq!(st.ddr.data[32], 7);
    }
}
