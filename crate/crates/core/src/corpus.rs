//! Built-in example graphs, one per code path: plain conv, conv + pool,
//! residual cell, concat cell, transpose convolution, a conv whose weights
//! exceed PM, and a three-layer VGG prefix written with explicit quantizer
//! and constant nodes. The JSON files under `corpus/` are generated from here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Attrs, DType, Graph, Node, NodeId, OpKind, Shape, TensorRef, WeightSpec};
use crate::quant::QuantInfo;

/// Exponents shared by the generated graphs.
const E_ACT: i32 = -4;
const E_W: i32 = -6;
const E_B: i32 = -5;

struct Builder {
    g: Graph,
    rng: ChaCha8Rng,
    next: NodeId,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder { g: Graph::default(), rng: ChaCha8Rng::seed_from_u64(seed), next: 0 }
    }

    fn id(&mut self) -> NodeId {
        self.next += 1;
        self.next - 1
    }

    fn tensor(&mut self, name: &str, s: Shape, e: i32) {
        self.g.tensors.insert(name.into(), TensorRef::activation(name, s, QuantInfo::int8(e)));
    }

    fn shape(&self, t: &str) -> Shape {
        self.g.tensors[t].shape().expect("activation")
    }

    fn input(&mut self, name: &str, s: Shape) {
        self.tensor(name, s, E_ACT);
        let id = self.id();
        self.g.nodes.push(Node::new(id, OpKind::Input, &[], name));
        self.g.inputs.push(name.into());
    }

    fn params(&mut self, co: usize, k: usize, ci: usize) -> WeightSpec {
        let weights = (0..co * k * k * ci).map(|_| self.rng.gen_range(-24..=24)).collect();
        let bias = (0..co).map(|_| self.rng.gen_range(-40..=40)).collect();
        WeightSpec {
            co,
            kh: k,
            kw: k,
            ci,
            weights,
            bias,
            weight_quant: QuantInfo::int8(E_W),
            bias_quant: QuantInfo::int8(E_B),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, x: &str, y: &str, co: usize, k: usize, s: usize, p: usize, relu: bool) {
        let xs = self.shape(x);
        let o = |l: usize| (l + 2 * p - k) / s + 1;
        self.tensor(y, Shape::new(o(xs.h), o(xs.w), co), E_ACT);
        let params = self.params(co, k, xs.c);
        let id = self.id();
        self.g.nodes.push(
            Node::new(id, OpKind::Conv, &[x], y).with_attrs(Attrs::window(k, s, p).with_relu(relu)).with_params(params),
        );
    }

    fn deconv(&mut self, x: &str, y: &str, co: usize, k: usize, s: usize, p: usize) {
        let xs = self.shape(x);
        let o = |l: usize| l * s + 2 * p + 1 - k;
        self.tensor(y, Shape::new(o(xs.h), o(xs.w), co), E_ACT);
        let params = self.params(co, k, xs.c);
        let id = self.id();
        self.g
            .nodes
            .push(Node::new(id, OpKind::Deconv, &[x], y).with_attrs(Attrs::window(k, s, p)).with_params(params));
    }

    fn pool(&mut self, x: &str, y: &str, k: usize, s: usize) {
        let xs = self.shape(x);
        let o = |l: usize| (l - k) / s + 1;
        self.tensor(y, Shape::new(o(xs.h), o(xs.w), xs.c), E_ACT);
        let id = self.id();
        self.g.nodes.push(Node::new(id, OpKind::MaxPool, &[x], y).with_attrs(Attrs::window(k, s, 0)));
    }

    fn add(&mut self, a: &str, b: &str, y: &str, relu: bool) {
        let s = self.shape(a);
        self.tensor(y, s, E_ACT);
        let id = self.id();
        self.g.nodes.push(Node::new(id, OpKind::EltwiseAdd, &[a, b], y).with_attrs(Attrs::default().with_relu(relu)));
    }

    fn concat(&mut self, xs: &[&str], y: &str) {
        let s = self.shape(xs[0]);
        let c = xs.iter().map(|x| self.shape(x).c).sum();
        self.tensor(y, Shape::new(s.h, s.w, c), E_ACT);
        let id = self.id();
        self.g.nodes.push(Node::new(id, OpKind::Concat, xs, y));
    }

    fn finish(mut self, outputs: &[&str]) -> Graph {
        self.g.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self.g.validate().expect("corpus graph is valid");
        self.g
    }
}

pub fn toy_conv() -> Graph {
    let mut b = Builder::new(1);
    b.input("x", Shape::new(16, 16, 8));
    b.conv("x", "y", 16, 3, 1, 1, true);
    b.finish(&["y"])
}

/// 5x5 conv into a 2x2/2 max pool; the conv output spans eight conv tiles.
pub fn conv_pool() -> Graph {
    let mut b = Builder::new(2);
    b.input("x", Shape::new(64, 64, 8));
    b.conv("x", "c", 16, 5, 1, 0, true);
    b.pool("c", "y", 2, 2);
    b.finish(&["y"])
}

/// Two 3x3 convs with an identity shortcut.
pub fn resnet_cell() -> Graph {
    let mut b = Builder::new(3);
    b.input("x", Shape::new(16, 16, 16));
    b.conv("x", "a", 16, 3, 1, 1, true);
    b.conv("a", "r", 16, 3, 1, 1, false);
    b.add("r", "x", "y", true);
    b.finish(&["y"])
}

/// Parallel 1x1, 3x3 and 5x5 branches concatenated with the input.
pub fn inception_cell() -> Graph {
    let mut b = Builder::new(4);
    b.input("x", Shape::new(16, 16, 8));
    b.conv("x", "b1", 8, 1, 1, 0, true);
    b.conv("x", "b3", 8, 3, 1, 1, true);
    b.conv("x", "b5", 4, 5, 1, 2, true);
    b.pool("b5", "b5p", 1, 1);
    b.concat(&["b1", "b3", "b5p", "x"], "y");
    b.finish(&["y"])
}

/// A 2x transpose conv, which has a sub-kernel series, followed by a 3x one,
/// which always takes the upsample path.
pub fn deconv() -> Graph {
    let mut b = Builder::new(5);
    b.input("x", Shape::new(8, 8, 8));
    b.deconv("x", "u", 8, 3, 2, 1);
    b.deconv("u", "y", 4, 3, 3, 1);
    b.finish(&["y"])
}

/// A 5x5x64 -> 64 conv: 100 KiB of weights.
pub fn weight_tiled() -> Graph {
    let mut b = Builder::new(6);
    b.input("x", Shape::new(20, 20, 64));
    b.conv("x", "y", 64, 5, 1, 0, true);
    b.finish(&["y"])
}

/// conv3x3 -> conv3x3 -> maxpool with every parameter a `const` behind a
/// `fix` quantizer: 15 nodes.
pub fn vgg_prefix() -> Graph {
    let mut b = Builder::new(7);
    b.input("x", Shape::new(32, 32, 3));
    let fix = |b: &mut Builder, x: &str, y: &str| {
        let id = b.id();
        b.g.nodes.push(Node::new(id, OpKind::Fix, &[x], y));
    };
    let constant = |b: &mut Builder, name: &str, dims: Vec<usize>, e: i32, range: i32| {
        let n: usize = dims.iter().product();
        let data: Vec<i8> = (0..n).map(|_| b.rng.gen_range(-range..=range) as i8).collect();
        b.g.tensors.insert(
            name.into(),
            TensorRef { name: name.into(), dims, dtype: DType::Int8, quant: Some(QuantInfo::int8(e)) },
        );
        let id = b.id();
        let mut c = Node::new(id, OpKind::Const, &[], name);
        c.data = Some(data);
        b.g.nodes.push(c);
    };
    b.tensor("xq", Shape::new(32, 32, 3), E_ACT);
    fix(&mut b, "x", "xq");
    let mut x = "xq".to_string();
    for (l, (ci, co)) in [(3usize, 16usize), (16, 16)].into_iter().enumerate() {
        let (w, wq, bias, bq) = (format!("w{l}"), format!("w{l}q"), format!("b{l}"), format!("b{l}q"));
        // Float-trained parameters arrive at a finer step and are requantized.
        constant(&mut b, &w, vec![co, 3, 3, ci], E_W - 1, 60);
        b.g.tensors.insert(
            wq.clone(),
            TensorRef {
                name: wq.clone(),
                dims: vec![co, 3, 3, ci],
                dtype: DType::Int8,
                quant: Some(QuantInfo::int8(E_W)),
            },
        );
        fix(&mut b, &w, &wq);
        constant(&mut b, &bias, vec![co], E_B - 1, 80);
        b.g.tensors.insert(
            bq.clone(),
            TensorRef { name: bq.clone(), dims: vec![co], dtype: DType::Int8, quant: Some(QuantInfo::int8(E_B)) },
        );
        fix(&mut b, &bias, &bq);
        let (acc, y) = (format!("acc{l}"), format!("y{l}"));
        b.g.tensors.insert(
            acc.clone(),
            TensorRef { name: acc.clone(), dims: vec![32, 32, co], dtype: DType::Int32, quant: None },
        );
        let id = b.id();
        b.g.nodes.push(
            Node::new(id, OpKind::Conv, &[&x, &wq, &bq], &acc).with_attrs(Attrs::window(3, 1, 1).with_relu(true)),
        );
        b.tensor(&y, Shape::new(32, 32, co), E_ACT);
        fix(&mut b, &acc, &y);
        x = y;
    }
    b.pool(&x, "y", 2, 2);
    b.finish(&["y"])
}

/// Every corpus graph by file stem.
pub fn all() -> Vec<(&'static str, Graph)> {
    vec![
        ("toy_conv", toy_conv()),
        ("conv_pool", conv_pool()),
        ("resnet_cell", resnet_cell()),
        ("inception_cell", inception_cell()),
        ("deconv", deconv()),
        ("weight_tiled", weight_tiled()),
        ("vgg_prefix", vgg_prefix()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg_prefix_has_fifteen_nodes() {
        assert_eq!(vgg_prefix().nodes.len(), 15);
    }

    #[test]
    fn graphs_fit_the_desk_scale_bound() {
        for (name, g) in all() {
            for t in g.tensors.values().filter(|t| t.dims.len() == 3) {
                assert!(t.dims.iter().all(|&d| d <= 64), "{name}: {} is {:?}", t.name, t.dims);
            }
        }
    }
}
