//! Folding of quantizer (`fix`) nodes and constant parameters into the
//! compute nodes that use them.
//!
//! A `fix` requantizes its input to its output's quantization. It folds in
//! three ways:
//! * after a `const`, the constant data is requantized at compile time;
//! * after an int32 accumulator whose every consumer is a `fix` with the same
//!   target, the producer writes the int8 target directly;
//! * on an int8 tensor whose quantization it does not change, it is an
//!   annotation and is dropped.
//!
//! Anything else (an accumulator feeding differing quantizers, or a second
//! rounding of an int8 activation) cannot be absorbed bit-exactly and is
//! reported as [`GraphError::Fold`].

use super::*;
use crate::quant::requantize;

pub fn fold_constants_and_quantizers(g: &Graph) -> Result<Graph, GraphError> {
    let mut g = g.clone();
    while let Some(fix) = g.nodes.iter().filter(|n| n.op == OpKind::Fix).map(|n| n.id).min() {
        fold_fix(&mut g, fix)?;
    }
    fold_params(&mut g)?;
    for n in &g.nodes {
        if g.tensor(&n.output)?.dtype == DType::Int32 {
            return Err(GraphError::Fold(format!("accumulator {} has no quantizer", n.output)));
        }
    }
    let used: BTreeSet<String> =
        g.nodes.iter().flat_map(|n| n.inputs.iter().chain(std::iter::once(&n.output)).cloned()).collect();
    g.tensors.retain(|name, _| used.contains(name));
    g.validate()?;
    Ok(g)
}

fn rename_uses(g: &mut Graph, from: &str, to: &str) {
    for n in g.nodes.iter_mut() {
        for i in n.inputs.iter_mut() {
            if i == from {
                *i = to.to_string();
            }
        }
    }
    for o in g.outputs.iter_mut() {
        if o == from {
            *o = to.to_string();
        }
    }
    let mut seen = BTreeSet::new();
    g.outputs.retain(|o| seen.insert(o.clone()));
}

fn quant_of(g: &Graph, t: &str) -> Result<QuantInfo, GraphError> {
    g.tensor(t)?.quant.ok_or_else(|| GraphError::Quant(format!("tensor {t} has no quantization")))
}

fn fold_fix(g: &mut Graph, id: NodeId) -> Result<(), GraphError> {
    let fix = g.node(id).expect("fix exists").clone();
    let t_in = fix.inputs[0].clone();
    let t_out = fix.output.clone();
    let q_out = quant_of(g, &t_out)?;
    if g.tensor(&t_out)?.dtype != DType::Int8 {
        return Err(GraphError::Fold(format!("quantizer {id} must produce int8")));
    }
    let producer = g.producer(&t_in).expect("validated graph").clone();
    let consumers: Vec<Node> = g.consumers(&t_in).into_iter().cloned().collect();
    let remove = |g: &mut Graph, ids: &[NodeId]| g.nodes.retain(|n| !ids.contains(&n.id));

    if producer.op == OpKind::Const {
        let src = g.tensor(&t_in)?.clone();
        let e_in = src.exponent()?;
        let e_out = q_out.exponent()?;
        let data: Vec<i8> = producer
            .data
            .as_ref()
            .expect("validated const")
            .iter()
            .map(|&v| requantize(v as i64, e_in, e_out))
            .collect();
        remove(g, &[id]);
        if consumers.len() == 1 {
            let p = g.nodes.iter_mut().find(|n| n.id == producer.id).unwrap();
            p.output = t_out;
            p.data = Some(data);
        } else {
            let fresh = g.nodes.iter().map(|n| n.id).max().unwrap_or(0) + 1;
            let mut c = Node::new(fresh, OpKind::Const, &[], &t_out);
            c.data = Some(data);
            g.nodes.push(c);
        }
        return Ok(());
    }

    let src = g.tensor(&t_in)?.clone();
    if src.dtype == DType::Int32 {
        let all_same_fix = consumers.iter().all(|c| c.op == OpKind::Fix && g.tensors[&c.output].quant == Some(q_out));
        if !all_same_fix || g.outputs.contains(&t_in) {
            return Err(GraphError::Fold(format!(
                "accumulator {t_in} feeds consumers with different quantization requirements"
            )));
        }
        let ids: Vec<NodeId> = consumers.iter().map(|c| c.id).collect();
        remove(g, &ids);
        for c in consumers.iter().filter(|c| c.id != id) {
            rename_uses(g, &c.output, &t_out);
        }
        g.nodes.iter_mut().find(|n| n.id == producer.id).unwrap().output = t_out;
        return Ok(());
    }

    if src.quant == Some(q_out) {
        remove(g, &[id]);
        rename_uses(g, &t_out, &t_in);
        return Ok(());
    }

    Err(GraphError::Fold(format!(
        "quantizer {id} changes the quantization of int8 tensor {t_in}; only accumulators and constants can be requantized"
    )))
}

fn fold_params(g: &mut Graph) -> Result<(), GraphError> {
    let snapshot = g.clone();
    for n in g.nodes.iter_mut().filter(|n| n.op.has_weights() && n.inputs.len() == 3) {
        if n.params.is_some() {
            return Err(GraphError::Fold(format!("node {} has both inline and operand weights", n.id)));
        }
        let (co, kh, kw, ci) = snapshot.conv_params_dims(n)?;
        let fetch = |t: &str| -> Result<(Vec<i8>, QuantInfo), GraphError> {
            let p = snapshot.producer(t).expect("validated graph");
            if p.op != OpKind::Const {
                return Err(GraphError::Fold(format!("node {} parameter {t} is not constant", n.id)));
            }
            Ok((p.data.clone().expect("validated const"), quant_of(&snapshot, t)?))
        };
        let (weights, weight_quant) = fetch(&n.inputs[1])?;
        let (bias, bias_quant) = fetch(&n.inputs[2])?;
        n.params = Some(WeightSpec { co, kh, kw, ci, weights, bias, weight_quant, bias_quant });
        n.inputs.truncate(1);
    }
    let used: BTreeSet<String> = g.nodes.iter().flat_map(|n| n.inputs.iter().cloned()).collect();
    for n in &g.nodes {
        if n.op == OpKind::Const && (used.contains(&n.output) || g.outputs.contains(&n.output)) {
            return Err(GraphError::Fold(format!("constant {} is used as an activation", n.output)));
        }
    }
    g.nodes.retain(|n| n.op != OpKind::Const);
    Ok(())
}
