//! Direct graph interpreter: nested-loop evaluation of every node with int32
//! accumulation and the requantization rule from [`crate::quant`].

use std::collections::BTreeMap;

use crate::error::SimError;
use crate::graph::{DType, FusedTail, Graph, Node, OpKind, Shape};
use crate::quant::{add_apply, add_shifts, align_bias, requantize};

/// Tensor values with their scale exponent. Accumulators keep full precision.
#[derive(Debug, Clone)]
struct Value {
    data: Vec<i64>,
    exp: i32,
}

fn to_i8(v: &Value) -> Vec<i8> {
    v.data.iter().map(|&x| x.clamp(-128, 127) as i8).collect()
}

/// Evaluate `g` on int8 `inputs` (keyed by graph input tensor name, laid out
/// `(h, w, c)`), returning every graph output.
pub fn reference_execute(g: &Graph, inputs: &BTreeMap<String, Vec<i8>>) -> Result<BTreeMap<String, Vec<i8>>, SimError> {
    let order = crate::graph::topological_schedule(g)?;
    let mut env: BTreeMap<String, Value> = BTreeMap::new();
    for id in order.order {
        let n = g.node(id).expect("scheduled node");
        let v = eval(g, n, &env, inputs)?;
        env.insert(n.output.clone(), v);
    }
    g.outputs.iter().map(|o| Ok((o.clone(), to_i8(&env[o])))).collect()
}

fn eval(
    g: &Graph,
    n: &Node,
    env: &BTreeMap<String, Value>,
    inputs: &BTreeMap<String, Vec<i8>>,
) -> Result<Value, SimError> {
    let arg = |i: usize| &env[&n.inputs[i]];
    let shape = |t: &str| -> Result<Shape, SimError> { Ok(g.tensor(t)?.shape()?) };
    let out_t = g.tensor(&n.output)?;
    let out_exp = || out_t.exponent().map_err(SimError::from);
    let requant_all =
        |v: &Value, e_out: i32| -> Vec<i64> { v.data.iter().map(|&x| requantize(x, v.exp, e_out) as i64).collect() };
    Ok(match n.op {
        OpKind::Input => {
            let data =
                inputs.get(&n.output).ok_or_else(|| SimError::Shape(format!("no data for input {}", n.output)))?;
            if data.len() != out_t.elements() {
                return Err(SimError::Shape(format!(
                    "input {} has {} values, expected {}",
                    n.output,
                    data.len(),
                    out_t.elements()
                )));
            }
            Value { data: data.iter().map(|&x| x as i64).collect(), exp: out_exp()? }
        }
        OpKind::Const => Value {
            data: n.data.as_ref().expect("validated const").iter().map(|&x| x as i64).collect(),
            exp: out_exp()?,
        },
        OpKind::Fix => {
            let e = out_exp()?;
            Value { data: requant_all(arg(0), e), exp: e }
        }
        OpKind::Identity => {
            let e = out_exp()?;
            Value { data: requant_all(arg(0), e), exp: e }
        }
        OpKind::Conv | OpKind::Deconv => {
            let x = arg(0);
            let xs = shape(&n.inputs[0])?;
            let (w, e_w, bias): (Vec<i8>, i32, Vec<i64>) = match &n.params {
                Some(p) => {
                    let e_w = p.weight_quant.exponent()?;
                    let e_b = p.bias_quant.exponent()?;
                    let e_acc = x.exp + e_w;
                    (p.weights.clone(), e_w, p.bias.iter().map(|&b| align_bias(b, e_b, e_acc) as i64).collect())
                }
                None => {
                    let w = arg(1);
                    let b = arg(2);
                    let e_acc = x.exp + w.exp;
                    let bias = b.data.iter().map(|&v| align_bias(v as i8, b.exp, e_acc) as i64).collect();
                    (w.data.iter().map(|&v| v as i8).collect(), w.exp, bias)
                }
            };
            let e_acc = x.exp + e_w;
            let (co, kh, kw) = (bias.len(), n.attrs.kernel[0], n.attrs.kernel[1]);
            let a = n.attrs;
            let mut acc = if n.op == OpKind::Conv {
                conv_acc(&x.data, xs, &w, &bias, co, [kh, kw], a.stride, a.padding)
            } else {
                let (up, us) = upsample(&x.data, xs, a.stride);
                conv_acc(&up, us, &w, &bias, co, [kh, kw], [1, 1], a.padding)
            };
            if a.relu {
                acc.iter_mut().for_each(|v| *v = (*v).max(0));
            }
            let acc = Value { data: acc, exp: e_acc };
            match &n.fused {
                None if out_t.dtype == DType::Int32 => acc,
                None => {
                    let e = out_exp()?;
                    Value { data: requant_all(&acc, e), exp: e }
                }
                Some(tail) => {
                    let mid_exp = tail.mid().exponent()?;
                    let mid = Value { data: requant_all(&acc, mid_exp), exp: mid_exp };
                    let ms = tail.mid().shape()?;
                    match tail {
                        FusedTail::MaxPool { attrs, .. } => {
                            let pooled = maxpool(&mid.data, ms, attrs.kernel, attrs.stride, attrs.padding);
                            let e = out_exp()?;
                            Value { data: requant_all(&Value { data: pooled, exp: mid_exp }, e), exp: e }
                        }
                        FusedTail::EltwiseAdd { relu, .. } => add(&mid, arg(1), out_exp()?, *relu),
                    }
                }
            }
        }
        OpKind::MaxPool => {
            let x = arg(0);
            let a = n.attrs;
            let pooled = maxpool(&x.data, shape(&n.inputs[0])?, a.kernel, a.stride, a.padding);
            let e = out_exp()?;
            Value { data: requant_all(&Value { data: pooled, exp: x.exp }, e), exp: e }
        }
        OpKind::EltwiseAdd => add(arg(0), arg(1), out_exp()?, n.attrs.relu),
        OpKind::Upsample => {
            let x = arg(0);
            let (up, _) = upsample(&x.data, shape(&n.inputs[0])?, [n.attrs.factor, n.attrs.factor]);
            let e = out_exp()?;
            Value { data: requant_all(&Value { data: up, exp: x.exp }, e), exp: e }
        }
        OpKind::Concat => {
            let e = out_exp()?;
            let ys = shape(&n.output)?;
            let mut out = vec![0i64; ys.bytes()];
            let mut off = 0;
            for (i, t) in n.inputs.iter().enumerate() {
                let xs = shape(t)?;
                let v = requant_all(arg(i), e);
                for p in 0..xs.h * xs.w {
                    out[p * ys.c + off..p * ys.c + off + xs.c].copy_from_slice(&v[p * xs.c..(p + 1) * xs.c]);
                }
                off += xs.c;
            }
            Value { data: out, exp: e }
        }
    })
}

fn add(a: &Value, b: &Value, e_out: i32, relu: bool) -> Value {
    let (la, lb, shift) = add_shifts(a.exp, b.exp, e_out);
    let data =
        a.data.iter().zip(&b.data).map(|(&x, &y)| add_apply(x as i8, y as i8, la, lb, shift, relu) as i64).collect();
    Value { data, exp: e_out }
}

/// Zero insertion: `x[i, j]` lands at `(i * s_h, j * s_w)` of an `(h*s_h, w*s_w)` grid.
fn upsample(x: &[i64], xs: Shape, s: [usize; 2]) -> (Vec<i64>, Shape) {
    let us = Shape::new(xs.h * s[0], xs.w * s[1], xs.c);
    let mut up = vec![0i64; us.bytes()];
    for i in 0..xs.h {
        for j in 0..xs.w {
            let src = xs.index(i, j, 0);
            let dst = us.index(i * s[0], j * s[1], 0);
            up[dst..dst + xs.c].copy_from_slice(&x[src..src + xs.c]);
        }
    }
    (up, us)
}

/// `y[i,j,k] = sum_{l,m,n} x[i*s-p+l, j*s-p+m, n] * w[k,l,m,n] + b[k]`, zero outside `x`.
#[allow(clippy::too_many_arguments)]
fn conv_acc(
    x: &[i64],
    xs: Shape,
    w: &[i8],
    bias: &[i64],
    co: usize,
    k: [usize; 2],
    s: [usize; 2],
    p: [usize; 2],
) -> Vec<i64> {
    let oh = (xs.h + 2 * p[0] - k[0]) / s[0] + 1;
    let ow = (xs.w + 2 * p[1] - k[1]) / s[1] + 1;
    let ci = xs.c;
    let mut out = vec![0i64; oh * ow * co];
    let mut patch = vec![0i64; k[0] * k[1] * ci];
    for i in 0..oh {
        for j in 0..ow {
            for l in 0..k[0] {
                for m in 0..k[1] {
                    let dst = (l * k[1] + m) * ci;
                    let y = (i * s[0] + l) as isize - p[0] as isize;
                    let xx = (j * s[1] + m) as isize - p[1] as isize;
                    if y < 0 || xx < 0 || y as usize >= xs.h || xx as usize >= xs.w {
                        patch[dst..dst + ci].fill(0);
                    } else {
                        let src = xs.index(y as usize, xx as usize, 0);
                        patch[dst..dst + ci].copy_from_slice(&x[src..src + ci]);
                    }
                }
            }
            let o = (i * ow + j) * co;
            for kk in 0..co {
                let wk = &w[kk * patch.len()..(kk + 1) * patch.len()];
                let dot: i64 = patch.iter().zip(wk).map(|(&a, &b)| a * b as i64).sum();
                out[o + kk] = dot + bias[kk];
            }
        }
    }
    out
}

/// Max over the in-bounds part of each window; padding never wins.
fn maxpool(x: &[i64], xs: Shape, k: [usize; 2], s: [usize; 2], p: [usize; 2]) -> Vec<i64> {
    let oh = (xs.h + 2 * p[0] - k[0]) / s[0] + 1;
    let ow = (xs.w + 2 * p[1] - k[1]) / s[1] + 1;
    let mut out = vec![i64::MIN; oh * ow * xs.c];
    for i in 0..oh {
        for j in 0..ow {
            for l in 0..k[0] {
                for m in 0..k[1] {
                    let y = (i * s[0] + l) as isize - p[0] as isize;
                    let xx = (j * s[1] + m) as isize - p[1] as isize;
                    if y < 0 || xx < 0 || y as usize >= xs.h || xx as usize >= xs.w {
                        continue;
                    }
                    let src = xs.index(y as usize, xx as usize, 0);
                    let dst = (i * ow + j) * xs.c;
                    for c in 0..xs.c {
                        out[dst + c] = out[dst + c].max(x[src + c]);
                    }
                }
            }
        }
    }
    out
}
