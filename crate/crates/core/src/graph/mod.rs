//! Computation DAG: tensors, nodes, and the passes that normalize it before
//! lowering (quantizer/parameter folding, super-layer fusion, scheduling).

mod fold;
mod fuse;
mod json;
mod schedule;

pub use fold::fold_constants_and_quantizers;
pub use fuse::fuse_superlayers;
pub(crate) use fuse::window_geometry;
pub use json::parse_graph;
pub use schedule::{explore_schedules, peak_memory, topological_schedule, Schedule};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::quant::QuantInfo;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    Int8,
    Int32,
}

/// Activation shape, channel innermost then width then height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Shape { h, w, c }
    }

    pub fn bytes(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn row_bytes(&self) -> usize {
        self.w * self.c
    }

    pub fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRef {
    pub name: String,
    /// `[h, w, c]` for activations; parameter tensors may use other ranks.
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub quant: Option<QuantInfo>,
}

impl TensorRef {
    pub fn activation(name: &str, shape: Shape, quant: QuantInfo) -> Self {
        TensorRef {
            name: name.to_string(),
            dims: vec![shape.h, shape.w, shape.c],
            dtype: DType::Int8,
            quant: Some(quant),
        }
    }

    pub fn shape(&self) -> Result<Shape, GraphError> {
        match self.dims[..] {
            [h, w, c] => Ok(Shape { h, w, c }),
            _ => {
                Err(GraphError::Shape(format!("tensor {} has rank {}, expected [h, w, c]", self.name, self.dims.len())))
            }
        }
    }

    pub fn elements(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn exponent(&self) -> Result<i32, GraphError> {
        self.quant
            .as_ref()
            .ok_or_else(|| GraphError::Quant(format!("tensor {} has no quantization", self.name)))?
            .exponent()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "input")]
    Input,
    #[serde(rename = "const")]
    Const,
    #[serde(rename = "fix")]
    Fix,
    #[serde(rename = "conv")]
    Conv,
    #[serde(rename = "maxpool")]
    MaxPool,
    #[serde(rename = "eltwise-add")]
    EltwiseAdd,
    #[serde(rename = "upsample")]
    Upsample,
    #[serde(rename = "deconv")]
    Deconv,
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "concat")]
    Concat,
}

impl OpKind {
    /// Nodes that survive folding: everything except parameters and quantizers.
    pub fn is_compute(self) -> bool {
        !matches!(self, OpKind::Input | OpKind::Const | OpKind::Fix)
    }

    pub fn has_weights(self) -> bool {
        matches!(self, OpKind::Conv | OpKind::Deconv)
    }
}

fn default_pair() -> [usize; 2] {
    [1, 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attrs {
    #[serde(default = "default_pair")]
    pub kernel: [usize; 2],
    #[serde(default = "default_pair")]
    pub stride: [usize; 2],
    #[serde(default)]
    pub padding: [usize; 2],
    /// Upsample factor.
    #[serde(default = "one")]
    pub factor: usize,
    #[serde(default)]
    pub relu: bool,
}

fn one() -> usize {
    1
}

impl Default for Attrs {
    fn default() -> Self {
        Attrs { kernel: [1, 1], stride: [1, 1], padding: [0, 0], factor: 1, relu: false }
    }
}

impl Attrs {
    pub fn window(kernel: usize, stride: usize, padding: usize) -> Self {
        Attrs { kernel: [kernel, kernel], stride: [stride, stride], padding: [padding, padding], ..Attrs::default() }
    }

    pub fn with_relu(mut self, relu: bool) -> Self {
        self.relu = relu;
        self
    }
}

/// Folded convolution parameters. Weights are `(c_o, k_h, k_w, c_i)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub ci: usize,
    pub weights: Vec<i8>,
    pub bias: Vec<i8>,
    pub weight_quant: QuantInfo,
    pub bias_quant: QuantInfo,
}

impl WeightSpec {
    pub fn weight(&self, co: usize, y: usize, x: usize, ci: usize) -> i8 {
        self.weights[((co * self.kh + y) * self.kw + x) * self.ci + ci]
    }

    pub fn per_output_channel(&self) -> usize {
        self.kh * self.kw * self.ci
    }
}

/// Consumer merged into a convolution by [`fuse_superlayers`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FusedTail {
    /// `MaxPool(conv(x))`; `mid` describes the elided convolution output.
    #[serde(rename = "maxpool")]
    MaxPool { attrs: Attrs, mid: TensorRef },
    /// `conv(x) + z` where `z` is the node's second input.
    #[serde(rename = "eltwise-add")]
    EltwiseAdd { relu: bool, mid: TensorRef },
}

impl FusedTail {
    pub fn mid(&self) -> &TensorRef {
        match self {
            FusedTail::MaxPool { mid, .. } | FusedTail::EltwiseAdd { mid, .. } => mid,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: OpKind,
    pub inputs: Vec<String>,
    pub output: String,
    pub attrs: Attrs,
    pub params: Option<WeightSpec>,
    /// Raw int8 payload of a `const` node.
    pub data: Option<Vec<i8>>,
    pub fused: Option<FusedTail>,
}

impl Node {
    pub fn new(id: NodeId, op: OpKind, inputs: &[&str], output: &str) -> Self {
        Node {
            id,
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.to_string(),
            attrs: Attrs::default(),
            params: None,
            data: None,
            fused: None,
        }
    }

    pub fn with_attrs(mut self, attrs: Attrs) -> Self {
        self.attrs = attrs;
        self
    }

    pub fn with_params(mut self, params: WeightSpec) -> Self {
        self.params = Some(params);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub tensors: BTreeMap<String, TensorRef>,
    pub nodes: Vec<Node>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Graph {
    pub fn tensor(&self, name: &str) -> Result<&TensorRef, GraphError> {
        self.tensors.get(name).ok_or_else(|| GraphError::Parse(format!("unknown tensor {name}")))
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn producer(&self, tensor: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.output == tensor)
    }

    pub fn consumers(&self, tensor: &str) -> Vec<&Node> {
        self.nodes.iter().filter(|n| n.inputs.iter().any(|i| i == tensor)).collect()
    }

    /// Producer → consumer pairs in node-id order.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let producers: BTreeMap<&str, NodeId> = self.nodes.iter().map(|n| (n.output.as_str(), n.id)).collect();
        let mut edges = BTreeSet::new();
        for n in &self.nodes {
            for i in &n.inputs {
                if let Some(&p) = producers.get(i.as_str()) {
                    edges.insert((p, n.id));
                }
            }
        }
        edges.into_iter().collect()
    }

    pub fn predecessors(&self) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
        let mut preds: BTreeMap<NodeId, BTreeSet<NodeId>> =
            self.nodes.iter().map(|n| (n.id, BTreeSet::new())).collect();
        for (p, c) in self.edges() {
            preds.get_mut(&c).unwrap().insert(p);
        }
        preds
    }

    /// All nodes reachable from `id` along edges (excluding `id`).
    pub fn descendants(&self, id: NodeId) -> BTreeSet<NodeId> {
        let edges = self.edges();
        let mut seen = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            for &(p, c) in &edges {
                if p == n && seen.insert(c) {
                    stack.push(c);
                }
            }
        }
        seen
    }

    pub fn ancestors(&self, id: NodeId) -> BTreeSet<NodeId> {
        let edges = self.edges();
        let mut seen = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            for &(p, c) in &edges {
                if c == n && seen.insert(p) {
                    stack.push(p);
                }
            }
        }
        seen
    }

    pub fn compute_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_compute()).count()
    }

    /// Checks every structural, shape and quantization invariant.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        let mut written = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return Err(GraphError::Parse(format!("duplicate node id {}", n.id)));
            }
            if !written.insert(n.output.as_str()) {
                return Err(GraphError::Parse(format!("tensor {} written twice", n.output)));
            }
            self.tensor(&n.output)?;
            for i in &n.inputs {
                self.tensor(i)?;
                if self.producer(i).is_none() {
                    return Err(GraphError::Parse(format!("tensor {i} has no producer")));
                }
            }
        }
        for t in self.inputs.iter() {
            match self.producer(t) {
                Some(n) if n.op == OpKind::Input => {}
                _ => return Err(GraphError::Parse(format!("graph input {t} is not produced by an input node"))),
            }
        }
        for n in &self.nodes {
            if n.op == OpKind::Input && !self.inputs.contains(&n.output) {
                return Err(GraphError::Parse(format!("input node {} not listed in inputs", n.id)));
            }
        }
        for t in &self.outputs {
            if self.producer(t).is_none() {
                return Err(GraphError::Parse(format!("graph output {t} has no producer")));
            }
        }
        if self.outputs.is_empty() && !self.nodes.is_empty() {
            return Err(GraphError::Parse("graph has no outputs".into()));
        }
        topological_schedule(self).map_err(|e| match e {
            GraphError::Cycle(m) => GraphError::Parse(format!("graph has a cycle through {m}")),
            other => other,
        })?;
        self.check_connectivity()?;
        for t in self.tensors.values() {
            if t.dims.is_empty() || t.dims.contains(&0) {
                return Err(GraphError::Shape(format!("tensor {} has a zero or empty dimension", t.name)));
            }
            match (t.dtype, &t.quant) {
                (DType::Int8, Some(q)) => q.validate(true)?,
                (DType::Int8, None) => {
                    return Err(GraphError::Quant(format!("int8 tensor {} has no quantization", t.name)))
                }
                (DType::Int32, _) => {}
            }
        }
        for n in &self.nodes {
            self.check_node(n)?;
        }
        Ok(())
    }

    fn is_parameter(&self, n: &Node) -> bool {
        match n.op {
            OpKind::Const => true,
            OpKind::Fix => n.inputs.iter().all(|i| self.producer(i).is_some_and(|p| self.is_parameter(p))),
            _ => false,
        }
    }

    fn check_connectivity(&self) -> Result<(), GraphError> {
        let outputs: BTreeSet<NodeId> = self.outputs.iter().filter_map(|t| self.producer(t).map(|n| n.id)).collect();
        let inputs: BTreeSet<NodeId> = self.nodes.iter().filter(|n| n.op == OpKind::Input).map(|n| n.id).collect();
        for n in &self.nodes {
            let desc = self.descendants(n.id);
            if !outputs.contains(&n.id) && desc.is_disjoint(&outputs) {
                return Err(GraphError::Parse(format!("node {} does not reach an output", n.id)));
            }
            if !self.is_parameter(n) && n.op != OpKind::Input && self.ancestors(n.id).is_disjoint(&inputs) {
                return Err(GraphError::Parse(format!("node {} is not reachable from an input", n.id)));
            }
        }
        Ok(())
    }

    fn check_node(&self, n: &Node) -> Result<(), GraphError> {
        let out = self.tensor(&n.output)?;
        let expected = self.infer_output_dims(n)?;
        if expected != out.dims {
            return Err(GraphError::Shape(format!(
                "node {} produces {:?} but tensor {} is declared {:?}",
                n.id, expected, out.name, out.dims
            )));
        }
        if n.op.is_compute() && out.dtype == DType::Int32 && !n.op.has_weights() {
            return Err(GraphError::Shape(format!("node {} cannot produce an accumulator", n.id)));
        }
        Ok(())
    }

    /// Output dims implied by the node's inputs and attributes.
    pub fn infer_output_dims(&self, n: &Node) -> Result<Vec<usize>, GraphError> {
        let arity = |k: usize| -> Result<(), GraphError> {
            if n.inputs.len() != k {
                Err(GraphError::Shape(format!("node {} expects {k} inputs, got {}", n.id, n.inputs.len())))
            } else {
                Ok(())
            }
        };
        let act = |i: usize| -> Result<Shape, GraphError> { self.tensor(&n.inputs[i])?.shape() };
        let a = n.attrs;
        let dims = match n.op {
            OpKind::Input => {
                arity(0)?;
                self.tensor(&n.output)?.shape()?;
                return Ok(self.tensor(&n.output)?.dims.clone());
            }
            OpKind::Const => {
                arity(0)?;
                let t = self.tensor(&n.output)?;
                let len = n.data.as_ref().map(|d| d.len()).unwrap_or(0);
                if len != t.elements() {
                    return Err(GraphError::Shape(format!(
                        "const node {} carries {len} values for tensor of {} elements",
                        n.id,
                        t.elements()
                    )));
                }
                return Ok(t.dims.clone());
            }
            OpKind::Fix => {
                arity(1)?;
                return Ok(self.tensor(&n.inputs[0])?.dims.clone());
            }
            OpKind::Conv | OpKind::Deconv => {
                let x = act(0)?;
                let (co, kh, kw, ci) = self.conv_params_dims(n)?;
                if ci != x.c || [kh, kw] != a.kernel {
                    return Err(GraphError::Shape(format!(
                        "node {} weights ({co},{kh},{kw},{ci}) do not match input channels {} / kernel {:?}",
                        n.id, x.c, a.kernel
                    )));
                }
                let conv_out = if n.op == OpKind::Conv {
                    Shape::new(
                        window_out(x.h, kh, a.stride[0], a.padding[0], n.id)?,
                        window_out(x.w, kw, a.stride[1], a.padding[1], n.id)?,
                        co,
                    )
                } else {
                    Shape::new(
                        deconv_out(x.h, kh, a.stride[0], a.padding[0], n.id)?,
                        deconv_out(x.w, kw, a.stride[1], a.padding[1], n.id)?,
                        co,
                    )
                };
                match &n.fused {
                    None => conv_out,
                    Some(FusedTail::MaxPool { attrs, mid }) => {
                        if mid.dims != [conv_out.h, conv_out.w, conv_out.c] {
                            return Err(GraphError::Shape(format!("node {} fused intermediate mismatch", n.id)));
                        }
                        pool_out(conv_out, attrs, n.id)?
                    }
                    Some(FusedTail::EltwiseAdd { mid, .. }) => {
                        if mid.dims != [conv_out.h, conv_out.w, conv_out.c] {
                            return Err(GraphError::Shape(format!("node {} fused intermediate mismatch", n.id)));
                        }
                        if act(1)? != conv_out {
                            return Err(GraphError::Shape(format!("node {} residual shape mismatch", n.id)));
                        }
                        conv_out
                    }
                }
            }
            OpKind::MaxPool => {
                arity(1)?;
                pool_out(act(0)?, &a, n.id)?
            }
            OpKind::EltwiseAdd => {
                arity(2)?;
                let (l, r) = (act(0)?, act(1)?);
                if l != r {
                    return Err(GraphError::Shape(format!("node {} adds {:?} and {:?}", n.id, l, r)));
                }
                l
            }
            OpKind::Upsample => {
                arity(1)?;
                let x = act(0)?;
                if a.factor == 0 {
                    return Err(GraphError::Shape(format!("node {} has upsample factor 0", n.id)));
                }
                Shape::new(x.h * a.factor, x.w * a.factor, x.c)
            }
            OpKind::Identity => {
                arity(1)?;
                act(0)?
            }
            OpKind::Concat => {
                if n.inputs.is_empty() {
                    return Err(GraphError::Shape(format!("concat {} has no inputs", n.id)));
                }
                let first = act(0)?;
                let mut c = 0;
                for i in 0..n.inputs.len() {
                    let s = act(i)?;
                    if s.h != first.h || s.w != first.w {
                        return Err(GraphError::Shape(format!("concat {} input {i} is {:?}", n.id, s)));
                    }
                    c += s.c;
                }
                Shape::new(first.h, first.w, c)
            }
        };
        Ok(vec![dims.h, dims.w, dims.c])
    }

    /// `(c_o, k_h, k_w, c_i)` from folded params or from the weight operand.
    pub fn conv_params_dims(&self, n: &Node) -> Result<(usize, usize, usize, usize), GraphError> {
        if let Some(p) = &n.params {
            if p.weights.len() != p.co * p.kh * p.kw * p.ci || p.bias.len() != p.co {
                return Err(GraphError::Shape(format!("node {} parameter sizes are inconsistent", n.id)));
            }
            let expected_inputs = if matches!(n.fused, Some(FusedTail::EltwiseAdd { .. })) { 2 } else { 1 };
            if n.inputs.len() != expected_inputs {
                return Err(GraphError::Shape(format!("node {} has {} inputs", n.id, n.inputs.len())));
            }
            return Ok((p.co, p.kh, p.kw, p.ci));
        }
        if n.inputs.len() != 3 {
            return Err(GraphError::Shape(format!("node {} needs params or [x, weights, bias] inputs", n.id)));
        }
        let w = self.tensor(&n.inputs[1])?;
        let b = self.tensor(&n.inputs[2])?;
        match (&w.dims[..], &b.dims[..]) {
            (&[co, kh, kw, ci], &[bco]) if bco == co => Ok((co, kh, kw, ci)),
            _ => Err(GraphError::Shape(format!(
                "node {} weight {:?} / bias {:?} are not (c_o,k_h,k_w,c_i) / (c_o)",
                n.id, w.dims, b.dims
            ))),
        }
    }
}

pub(crate) fn window_out(len: usize, k: usize, s: usize, p: usize, id: NodeId) -> Result<usize, GraphError> {
    if s == 0 || k == 0 || len + 2 * p < k {
        return Err(GraphError::Shape(format!(
            "node {id}: window {k} stride {s} padding {p} does not fit extent {len}"
        )));
    }
    Ok((len + 2 * p - k) / s + 1)
}

pub(crate) fn deconv_out(len: usize, k: usize, s: usize, p: usize, id: NodeId) -> Result<usize, GraphError> {
    if s == 0 || k == 0 || len * s + 2 * p < k {
        return Err(GraphError::Shape(format!(
            "node {id}: deconv kernel {k} factor {s} padding {p} does not fit extent {len}"
        )));
    }
    Ok(len * s + 2 * p - k + 1)
}

fn pool_out(x: Shape, a: &Attrs, id: NodeId) -> Result<Shape, GraphError> {
    if a.padding[0] >= a.kernel[0] || a.padding[1] >= a.kernel[1] {
        return Err(GraphError::Shape(format!("node {id}: pool padding must be smaller than the window")));
    }
    Ok(Shape::new(
        window_out(x.h, a.kernel[0], a.stride[0], a.padding[0], id)?,
        window_out(x.w, a.kernel[1], a.stride[1], a.padding[1], id)?,
        x.c,
    ))
}
