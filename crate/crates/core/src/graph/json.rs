//! JSON graph document: `{tensors, nodes, inputs, outputs}` with base64 int8
//! parameter blobs.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::*;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    tensors: Vec<TensorDoc>,
    nodes: Vec<NodeDoc>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    name: String,
    shape: Vec<usize>,
    #[serde(default)]
    dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: NodeId,
    op: OpKind,
    #[serde(default)]
    inputs: Vec<String>,
    output: String,
    #[serde(default)]
    attrs: Attrs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<ParamsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fused: Option<FusedTail>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_quant: Option<QuantInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_quant: Option<QuantInfo>,
    /// Payload of a `const` node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<String>,
}

fn decode(field: &str, id: NodeId, s: &str) -> Result<Vec<i8>, GraphError> {
    let bytes = B64.decode(s).map_err(|e| GraphError::Parse(format!("node {id} {field}: bad base64: {e}")))?;
    Ok(bytes.into_iter().map(|b| b as i8).collect())
}

fn encode(v: &[i8]) -> String {
    let bytes: Vec<u8> = v.iter().map(|&b| b as u8).collect();
    B64.encode(bytes)
}

/// Parse and validate a graph document.
pub fn parse_graph(text: &str) -> Result<Graph, GraphError> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
    let mut g = Graph { inputs: doc.inputs, outputs: doc.outputs, ..Graph::default() };
    for t in doc.tensors {
        let tr = TensorRef { name: t.name.clone(), dims: t.shape, dtype: t.dtype, quant: t.quant };
        if g.tensors.insert(t.name.clone(), tr).is_some() {
            return Err(GraphError::Parse(format!("duplicate tensor {}", t.name)));
        }
    }
    for n in doc.nodes {
        let mut node = Node {
            id: n.id,
            op: n.op,
            inputs: n.inputs,
            output: n.output,
            attrs: n.attrs,
            params: None,
            data: None,
            fused: n.fused,
        };
        if let Some(p) = n.params {
            if let Some(d) = &p.data {
                if node.op != OpKind::Const {
                    return Err(GraphError::Parse(format!("node {} carries const data but is not const", node.id)));
                }
                node.data = Some(decode("data", node.id, d)?);
            }
            if let Some(w) = &p.weights {
                node.params = Some(weight_spec(&g, &node, &p, w)?);
            }
        }
        g.nodes.push(node);
    }
    g.validate()?;
    Ok(g)
}

fn weight_spec(g: &Graph, n: &Node, p: &ParamsDoc, w: &str) -> Result<WeightSpec, GraphError> {
    if !n.op.has_weights() {
        return Err(GraphError::Parse(format!("node {} carries weights but is not conv/deconv", n.id)));
    }
    let missing = |f: &str| GraphError::Parse(format!("node {} params lack {f}", n.id));
    let x = g.tensor(n.inputs.first().ok_or_else(|| missing("an input"))?)?.shape()?;
    let co = match &n.fused {
        Some(t) => t.mid().shape()?.c,
        None => g.tensor(&n.output)?.shape()?.c,
    };
    let spec = WeightSpec {
        co,
        kh: n.attrs.kernel[0],
        kw: n.attrs.kernel[1],
        ci: x.c,
        weights: decode("weights", n.id, w)?,
        bias: decode("bias", n.id, p.bias.as_deref().ok_or_else(|| missing("bias"))?)?,
        weight_quant: p.weight_quant.ok_or_else(|| missing("weight_quant"))?,
        bias_quant: p.bias_quant.ok_or_else(|| missing("bias_quant"))?,
    };
    if spec.weights.len() != spec.co * spec.kh * spec.kw * spec.ci || spec.bias.len() != spec.co {
        return Err(GraphError::Shape(format!(
            "node {}: {} weights / {} biases for shape ({},{},{},{})",
            n.id,
            spec.weights.len(),
            spec.bias.len(),
            spec.co,
            spec.kh,
            spec.kw,
            spec.ci
        )));
    }
    spec.weight_quant.validate(true)?;
    spec.bias_quant.validate(true)?;
    Ok(spec)
}

impl Graph {
    /// Serialize to the document format accepted by [`parse_graph`].
    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            tensors: self
                .tensors
                .values()
                .map(|t| TensorDoc { name: t.name.clone(), shape: t.dims.clone(), dtype: t.dtype, quant: t.quant })
                .collect(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    id: n.id,
                    op: n.op,
                    inputs: n.inputs.clone(),
                    output: n.output.clone(),
                    attrs: n.attrs,
                    params: match (&n.params, &n.data) {
                        (Some(p), _) => Some(ParamsDoc {
                            weights: Some(encode(&p.weights)),
                            bias: Some(encode(&p.bias)),
                            weight_quant: Some(p.weight_quant),
                            bias_quant: Some(p.bias_quant),
                            data: None,
                        }),
                        (None, Some(d)) => Some(ParamsDoc { data: Some(encode(d)), ..ParamsDoc::default() }),
                        (None, None) => None,
                    },
                    fused: n.fused.clone(),
                })
                .collect(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serializes")
    }
}
