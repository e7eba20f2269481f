//! Human-readable assembly: one instruction per line,
//! `OPTYPE <dpon> <dpby> <sub_op> key=value ...`.
//!
//! Masks are `0bLSCM` (LOAD, SAVE, CONV, MISC from MSB to LSB). Locations are
//! written `s<id>+<off>` (symbolic slice), `fm<mem>+<addr>` or `pm+<addr>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::isa::*;
use crate::error::AsmError;

pub fn emit_assembly(p: &Program) -> String {
    let mut out = String::new();
    for i in &p.instrs {
        out.push_str(&emit_instruction(i));
        out.push('\n');
    }
    out
}

pub fn emit_instruction(i: &Instruction) -> String {
    let mut s = format!("{} {} {} {}", i.op_type(), i.deps.dpon.mask(), i.deps.dpby.mask(), i.sub_op());
    let mut kv = |k: &str, v: String| {
        let _ = write!(s, " {k}={v}");
    };
    match &i.op {
        Op::Load(t) | Op::Save(t) => {
            kv("ddr", t.ddr.to_string());
            kv("chunk", t.chunk.to_string());
            kv("count", t.count.to_string());
            kv("stride", t.stride.to_string());
            kv("local", loc_str(t.local));
        }
        Op::Conv(c) => {
            kv("in", locs_str(&c.input));
            kv("in_row0", c.in_row0.to_string());
            kv("in_col0", c.in_col0.to_string());
            kv("in_cols", c.in_cols.to_string());
            kv("in_ch", c.in_ch.to_string());
            kv("in_h", c.in_h.to_string());
            kv("in_w", c.in_w.to_string());
            kv("out", locs_str(&c.output));
            kv("out_row0", c.out_row0.to_string());
            kv("out_col0", c.out_col0.to_string());
            kv("out_cols", c.out_cols.to_string());
            kv("out_ch", c.out_ch.to_string());
            kv("kernel", pair_str(c.kernel));
            kv("stride", pair_str(c.stride));
            kv("pad", pair_str(c.pad));
            kv("w", loc_str(c.weights));
            kv("b", loc_str(c.bias));
            kv("shift", c.shift.to_string());
            kv("relu", (c.relu as u8).to_string());
        }
        Op::Pool(p) => {
            kv("in", locs_str(&p.input));
            kv("in_row0", p.in_row0.to_string());
            kv("in_col0", p.in_col0.to_string());
            kv("in_cols", p.in_cols.to_string());
            kv("ch", p.ch.to_string());
            kv("in_h", p.in_h.to_string());
            kv("in_w", p.in_w.to_string());
            kv("out", locs_str(&p.output));
            kv("out_row0", p.out_row0.to_string());
            kv("out_col0", p.out_col0.to_string());
            kv("out_cols", p.out_cols.to_string());
            kv("kernel", pair_str(p.kernel));
            kv("stride", pair_str(p.stride));
            kv("pad", pair_str(p.pad));
            kv("shift", p.shift.to_string());
        }
        Op::Elt(e) => {
            kv("a", locs_str(&e.a));
            kv("b", locs_str(&e.b));
            kv("out", locs_str(&e.output));
            kv("row_bytes", e.row_bytes.to_string());
            kv("la", e.la.to_string());
            kv("lb", e.lb.to_string());
            kv("shift", e.shift.to_string());
            kv("relu", (e.relu as u8).to_string());
        }
        Op::Move(m) => {
            kv("zero", locs_str(&m.zero));
            kv("zero_bytes", m.zero_bytes.to_string());
            let rows: Vec<String> = m.rows.iter().map(|&(a, b)| format!("{}>{}", loc_str(a), loc_str(b))).collect();
            kv("rows", format!("[{}]", rows.join(",")));
            kv("cols", m.cols.to_string());
            kv("ch", m.ch.to_string());
            kv("pitch", m.pitch.to_string());
            kv("shift", m.shift.to_string());
        }
        Op::Nop(_) => {}
    }
    s
}

fn loc_str(l: Loc) -> String {
    match l {
        Loc::Slice { id, off } => format!("s{id}+{off}"),
        Loc::Fm { mem, addr } => format!("fm{mem}+{addr}"),
        Loc::Pm { addr } => format!("pm+{addr}"),
    }
}

fn locs_str(ls: &[Loc]) -> String {
    let parts: Vec<String> = ls.iter().map(|&l| loc_str(l)).collect();
    format!("[{}]", parts.join(","))
}

fn pair_str<T: std::fmt::Display>(p: [T; 2]) -> String {
    format!("{}x{}", p[0], p[1])
}

pub fn parse_assembly(text: &str) -> Result<Program, AsmError> {
    let mut instrs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        instrs.push(parse_instruction(line).map_err(|msg| AsmError { line: n + 1, msg })?);
    }
    Ok(Program { instrs })
}

pub fn parse_instruction(line: &str) -> Result<Instruction, String> {
    let mut tokens = line.split_whitespace();
    let mut next = |what: &str| tokens.next().ok_or_else(|| format!("missing {what}"));
    let ty_s = next("op type")?;
    let ty = OpType::from_name(ty_s).ok_or_else(|| format!("unknown op type {ty_s}"))?;
    let dpon = parse_mask(next("DPON mask")?)?;
    let dpby = parse_mask(next("DPBY mask")?)?;
    let sub = next("sub-op")?.to_string();
    let mut f = Fields::new(tokens)?;
    let op = match (ty, sub.as_str()) {
        (_, "noop") => Op::Nop(ty),
        (OpType::Load, "load") | (OpType::Save, "save") => {
            let t = Transfer {
                ddr: f.num("ddr")?,
                chunk: f.num("chunk")?,
                count: f.num("count")?,
                stride: f.num("stride")?,
                local: f.loc("local")?,
            };
            if ty == OpType::Load {
                Op::Load(t)
            } else {
                Op::Save(t)
            }
        }
        (OpType::Conv, "conv" | "conv-init") => Op::Conv(ConvOp {
            input: f.locs("in")?,
            in_row0: f.num("in_row0")?,
            in_col0: f.num("in_col0")?,
            in_cols: f.num("in_cols")?,
            in_ch: f.num("in_ch")?,
            in_h: f.num("in_h")?,
            in_w: f.num("in_w")?,
            output: f.locs("out")?,
            out_row0: f.num("out_row0")?,
            out_col0: f.num("out_col0")?,
            out_cols: f.num("out_cols")?,
            out_ch: f.num("out_ch")?,
            kernel: f.pair("kernel")?,
            stride: f.pair("stride")?,
            pad: f.pair("pad")?,
            weights: f.loc("w")?,
            bias: f.loc("b")?,
            shift: f.num("shift")?,
            relu: f.flag("relu")?,
            init: sub == "conv-init",
        }),
        (OpType::Misc, "maxpool") => Op::Pool(PoolOp {
            input: f.locs("in")?,
            in_row0: f.num("in_row0")?,
            in_col0: f.num("in_col0")?,
            in_cols: f.num("in_cols")?,
            ch: f.num("ch")?,
            in_h: f.num("in_h")?,
            in_w: f.num("in_w")?,
            output: f.locs("out")?,
            out_row0: f.num("out_row0")?,
            out_col0: f.num("out_col0")?,
            out_cols: f.num("out_cols")?,
            kernel: f.pair("kernel")?,
            stride: f.pair("stride")?,
            pad: f.pair("pad")?,
            shift: f.num("shift")?,
        }),
        (OpType::Misc, "eltwise") => Op::Elt(EltOp {
            a: f.locs("a")?,
            b: f.locs("b")?,
            output: f.locs("out")?,
            row_bytes: f.num("row_bytes")?,
            la: f.num("la")?,
            lb: f.num("lb")?,
            shift: f.num("shift")?,
            relu: f.flag("relu")?,
        }),
        (OpType::Misc, "move") => Op::Move(MoveOp {
            zero: f.locs("zero")?,
            zero_bytes: f.num("zero_bytes")?,
            rows: f.loc_pairs("rows")?,
            cols: f.num("cols")?,
            ch: f.num("ch")?,
            pitch: f.num("pitch")?,
            shift: f.num("shift")?,
        }),
        _ => return Err(format!("sub-op {sub} is not valid for {ty}")),
    };
    f.finish()?;
    Ok(Instruction { deps: DepSets { dpon, dpby }, op })
}

fn parse_mask(s: &str) -> Result<TypeSet, String> {
    let bits = s.strip_prefix("0b").filter(|b| b.len() == 4).ok_or_else(|| format!("mask {s} is not 0bXXXX"))?;
    let v = u8::from_str_radix(bits, 2).map_err(|_| format!("mask {s} is not binary"))?;
    Ok(TypeSet::from_bits(v).expect("four bits"))
}

fn parse_loc(s: &str) -> Result<Loc, String> {
    let (head, off) = s.split_once('+').ok_or_else(|| format!("location {s} lacks +offset"))?;
    let off: u32 = off.parse().map_err(|_| format!("bad offset in {s}"))?;
    if head == "pm" {
        Ok(Loc::Pm { addr: off })
    } else if let Some(mem) = head.strip_prefix("fm") {
        Ok(Loc::Fm { mem: mem.parse().map_err(|_| format!("bad memory in {s}"))?, addr: off })
    } else if let Some(id) = head.strip_prefix('s') {
        Ok(Loc::Slice { id: id.parse().map_err(|_| format!("bad slice in {s}"))?, off })
    } else {
        Err(format!("unknown location {s}"))
    }
}

fn list_items(s: &str) -> Result<Vec<&str>, String> {
    let inner = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(|| format!("{s} is not a [list]"))?;
    Ok(if inner.is_empty() { vec![] } else { inner.split(',').collect() })
}

struct Fields<'a> {
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn new(tokens: impl Iterator<Item = &'a str>) -> Result<Self, String> {
        let mut map = BTreeMap::new();
        for t in tokens {
            let (k, v) = t.split_once('=').ok_or_else(|| format!("field {t} is not key=value"))?;
            if map.insert(k, v).is_some() {
                return Err(format!("duplicate field {k}"));
            }
        }
        Ok(Fields { map })
    }

    fn take(&mut self, key: &str) -> Result<&'a str, String> {
        self.map.remove(key).ok_or_else(|| format!("missing field {key}"))
    }

    fn num<T: FromStr>(&mut self, key: &str) -> Result<T, String> {
        let v = self.take(key)?;
        v.parse().map_err(|_| format!("field {key}={v} is not a number"))
    }

    fn flag(&mut self, key: &str) -> Result<bool, String> {
        match self.take(key)? {
            "0" => Ok(false),
            "1" => Ok(true),
            v => Err(format!("field {key}={v} is not 0 or 1")),
        }
    }

    fn pair<T: FromStr>(&mut self, key: &str) -> Result<[T; 2], String> {
        let v = self.take(key)?;
        let (a, b) = v.split_once('x').ok_or_else(|| format!("field {key}={v} is not AxB"))?;
        let bad = || format!("field {key}={v} is not AxB");
        Ok([a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?])
    }

    fn loc(&mut self, key: &str) -> Result<Loc, String> {
        parse_loc(self.take(key)?)
    }

    fn locs(&mut self, key: &str) -> Result<Vec<Loc>, String> {
        list_items(self.take(key)?)?.into_iter().map(parse_loc).collect()
    }

    fn loc_pairs(&mut self, key: &str) -> Result<Vec<(Loc, Loc)>, String> {
        list_items(self.take(key)?)?
            .into_iter()
            .map(|p| {
                let (a, b) = p.split_once('>').ok_or_else(|| format!("row pair {p} lacks '>'"))?;
                Ok((parse_loc(a)?, parse_loc(b)?))
            })
            .collect()
    }

    fn finish(self) -> Result<(), String> {
        match self.map.keys().next() {
            Some(k) => Err(format!("unknown field {k}")),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conv_with(dpon: &[OpType], dpby: &[OpType]) -> Instruction {
        Instruction {
            deps: DepSets { dpon: TypeSet::of(dpon), dpby: TypeSet::of(dpby) },
            op: Op::Conv(ConvOp {
                input: vec![Loc::Fm { mem: 0, addr: 0 }, Loc::Fm { mem: 0, addr: 128 }],
                in_row0: 0,
                in_col0: 0,
                in_cols: 16,
                in_ch: 8,
                in_h: 2,
                in_w: 16,
                output: vec![Loc::Fm { mem: 1, addr: 512 }],
                out_row0: 0,
                out_col0: 0,
                out_cols: 16,
                out_ch: 8,
                kernel: [3, 3],
                stride: [1, 1],
                pad: [1, -1],
                weights: Loc::Pm { addr: 0 },
                bias: Loc::Pm { addr: 576 },
                shift: -9,
                relu: true,
                init: true,
            }),
        }
    }

    #[test]
    fn empty_program_is_empty_text() {
        assert_eq!(emit_assembly(&Program::default()), "");
        assert_eq!(parse_assembly("").unwrap(), Program::default());
    }

    #[test]
    fn conv_masks_follow_bit_order() {
        let text = emit_instruction(&conv_with(&[OpType::Load], &[OpType::Save]));
        assert!(text.starts_with("CONV 0b1000 0b0100 conv-init "), "{text}");
        let back = parse_instruction(&text).unwrap();
        assert_eq!(back, conv_with(&[OpType::Load], &[OpType::Save]));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = parse_assembly("LOAD 0b0000 0b0000 noop\nCONV 0b1000 0b0100 conv in=[]\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(parse_assembly("MISC 0b0000 0b0000 load").is_err());
        assert!(parse_assembly("SAVE 0b10000 0b0000 noop").is_err());
        assert!(parse_assembly("SAVE 0b0000 0b0000 noop extra=1").is_err());
    }

    fn arb_loc() -> impl Strategy<Value = Loc> {
        prop_oneof![
            (0u32..1000, 0u32..4096).prop_map(|(id, off)| Loc::Slice { id, off }),
            (0u8..3, 0u32..1 << 18).prop_map(|(mem, addr)| Loc::Fm { mem, addr }),
            (0u32..65536).prop_map(|addr| Loc::Pm { addr }),
        ]
    }

    fn arb_set() -> impl Strategy<Value = TypeSet> {
        (0u8..16).prop_map(|b| TypeSet::from_bits(b).unwrap())
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        let locs = || proptest::collection::vec(arb_loc(), 0..5);
        prop_oneof![
            (any::<u32>(), 1u32..100, 1u32..10, any::<u32>(), arb_loc()).prop_map(|(d, chunk, count, s, local)| {
                Op::Load(Transfer { ddr: d as u64, chunk, count, stride: s as u64, local })
            }),
            (any::<u32>(), 1u32..100, arb_loc()).prop_map(|(d, chunk, local)| Op::Save(Transfer {
                ddr: d as u64,
                chunk,
                count: 1,
                stride: 0,
                local
            })),
            (locs(), locs(), arb_loc(), -20i32..20, any::<bool>(), any::<bool>(), -3i32..3).prop_map(
                |(input, output, w, shift, relu, init, pad)| Op::Conv(ConvOp {
                    input,
                    in_row0: 3,
                    in_col0: 1,
                    in_cols: 7,
                    in_ch: 5,
                    in_h: 9,
                    in_w: 11,
                    output,
                    out_row0: 2,
                    out_col0: 4,
                    out_cols: 6,
                    out_ch: 3,
                    kernel: [3, 2],
                    stride: [2, 1],
                    pad: [pad, -pad],
                    weights: w,
                    bias: w.offset(64),
                    shift,
                    relu,
                    init,
                })
            ),
            (locs(), locs(), -4i32..4).prop_map(|(input, output, shift)| Op::Pool(PoolOp {
                input,
                in_row0: 0,
                in_col0: 2,
                in_cols: 8,
                ch: 4,
                in_h: 8,
                in_w: 10,
                output,
                out_row0: 0,
                out_col0: 1,
                out_cols: 4,
                kernel: [2, 2],
                stride: [2, 2],
                pad: [0, 1],
                shift,
            })),
            (locs(), locs(), locs(), 0u32..5, any::<bool>()).prop_map(|(a, b, output, la, relu)| Op::Elt(EltOp {
                a,
                b,
                output,
                row_bytes: 64,
                la,
                lb: 0,
                shift: -1,
                relu,
            })),
            (locs(), proptest::collection::vec((arb_loc(), arb_loc()), 0..4), 1u32..9).prop_map(
                |(zero, rows, pitch)| Op::Move(MoveOp { zero, zero_bytes: 32, rows, cols: 4, ch: 1, pitch, shift: 0 })
            ),
            prop_oneof![Just(OpType::Load), Just(OpType::Save), Just(OpType::Conv), Just(OpType::Misc)]
                .prop_map(Op::Nop),
        ]
    }

    proptest! {
        #[test]
        fn parse_inverts_emit(ops in proptest::collection::vec((arb_op(), arb_set(), arb_set()), 0..8)) {
            let p = Program {
                instrs: ops.into_iter().map(|(op, dpon, dpby)| Instruction { deps: DepSets { dpon, dpby }, op }).collect(),
            };
            let text = emit_assembly(&p);
            let back = parse_assembly(&text).unwrap();
            prop_assert_eq!(&back, &p);
            prop_assert_eq!(emit_assembly(&back), text);
        }
    }
}
