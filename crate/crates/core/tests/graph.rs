//! Parsing, folding, fusion and scheduling of graph documents.

use std::collections::{BTreeMap, BTreeSet};

use dpuc::compile::random_inputs;
use dpuc::corpus;
use dpuc::error::GraphError;
use dpuc::graph::{
    explore_schedules, fold_constants_and_quantizers, fuse_superlayers, parse_graph, topological_schedule, Attrs,
    Graph, Node, NodeId, OpKind, Shape, TensorRef,
};
use dpuc::hw::MachineConfig;
use dpuc::quant::QuantInfo;
use dpuc::sim::reference_execute;
use proptest::prelude::*;

const SINGLE_CONV: &str = r#"{
  "tensors": [
    {"name": "x", "shape": [4, 4, 2], "quant": {"lo": -8, "hi": 8, "step": 0.0625}},
    {"name": "y", "shape": [4, 4, 1], "quant": {"lo": -16, "hi": 16, "step": 0.125}}
  ],
  "nodes": [
    {"id": 0, "op": "input", "output": "x"},
    {"id": 1, "op": "conv", "inputs": ["x"], "output": "y",
     "attrs": {"kernel": [1, 1]},
     "params": {"weights": "AQI=", "bias": "Aw==",
                "weight_quant": {"lo": -2, "hi": 2, "step": 0.015625},
                "bias_quant": {"lo": -8, "hi": 8, "step": 0.0625}}}
  ],
  "inputs": ["x"],
  "outputs": ["y"]
}"#;

#[test]
fn single_conv_document() {
    let g = parse_graph(SINGLE_CONV).unwrap();
    assert_eq!(g.nodes.len(), 2);
    assert_eq!((g.inputs.len(), g.outputs.len()), (1, 1));
    let p = g.nodes[1].params.as_ref().unwrap();
    assert_eq!((p.weights.clone(), p.bias.clone()), (vec![1, 2], vec![3]));
    assert_eq!(parse_graph(&g.to_json()).unwrap(), g);
}

#[test]
fn cycles_are_parse_errors() {
    let doc = r#"{
      "tensors": [
        {"name": "x", "shape": [2, 2, 1], "quant": {"lo": -8, "hi": 8, "step": 0.0625}},
        {"name": "a", "shape": [2, 2, 1], "quant": {"lo": -8, "hi": 8, "step": 0.0625}},
        {"name": "b", "shape": [2, 2, 1], "quant": {"lo": -8, "hi": 8, "step": 0.0625}}
      ],
      "nodes": [
        {"id": 0, "op": "input", "output": "x"},
        {"id": 1, "op": "eltwise-add", "inputs": ["x", "b"], "output": "a"},
        {"id": 2, "op": "identity", "inputs": ["a"], "output": "b"}
      ],
      "inputs": ["x"], "outputs": ["b"]
    }"#;
    assert!(matches!(parse_graph(doc), Err(GraphError::Parse(_))));
}

#[test]
fn shape_mismatch_is_reported() {
    let bad = SINGLE_CONV.replace(r#""shape": [4, 4, 1]"#, r#""shape": [3, 4, 1]"#);
    assert!(matches!(parse_graph(&bad), Err(GraphError::Shape(_))));
}

#[test]
fn vgg_prefix_folds_to_four_nodes_and_fuses_to_three() {
    let g = parse_graph(&corpus::vgg_prefix().to_json()).unwrap();
    assert_eq!(g.nodes.len(), 15);
    let f = fold_constants_and_quantizers(&g).unwrap();
    let ops: Vec<OpKind> = f.nodes.iter().map(|n| n.op).collect();
    assert_eq!(ops.len(), 4);
    assert_eq!(ops.iter().filter(|&&o| o == OpKind::Conv).count(), 2);
    assert!(ops.contains(&OpKind::Input) && ops.contains(&OpKind::MaxPool));
    // Both quantized operands travel with the conv.
    for n in f.nodes.iter().filter(|n| n.op == OpKind::Conv) {
        let p = n.params.as_ref().unwrap();
        assert_eq!((p.weight_quant.exponent().unwrap(), p.bias_quant.exponent().unwrap()), (-6, -5));
    }
    let fused = fuse_superlayers(&f, &MachineConfig::default());
    assert_eq!(fused.nodes.len(), 3);
    assert_eq!(fused.compute_node_count(), 2);
}

#[test]
fn folding_and_fusion_preserve_reference_outputs() {
    for (name, g) in corpus::all() {
        let f = fold_constants_and_quantizers(&g).unwrap();
        let fused = fuse_superlayers(&f, &MachineConfig::default());
        assert_eq!(f.nodes.len(), g.nodes.iter().filter(|n| n.op.is_compute() || n.op == OpKind::Input).count());
        for seed in 0..4 {
            let x = random_inputs(&g, seed);
            let want = reference_execute(&g, &x).unwrap();
            assert_eq!(reference_execute(&f, &x).unwrap(), want, "{name} folded");
            assert_eq!(reference_execute(&fused, &x).unwrap(), want, "{name} fused");
        }
    }
}

#[test]
fn folding_a_folded_graph_changes_nothing() {
    let g = corpus::toy_conv();
    assert_eq!(fold_constants_and_quantizers(&g).unwrap(), g);
}

#[test]
fn accumulator_with_two_targets_cannot_fold() {
    let mut g = fold_constants_and_quantizers(&corpus::vgg_prefix()).unwrap();
    // Rebuild conv 1 as an accumulator feeding two different quantizers.
    let conv = g.nodes.iter().find(|n| n.op == OpKind::Conv).unwrap().clone();
    let out = conv.output.clone();
    let dims = g.tensors[&out].dims.clone();
    g.tensors.insert(
        "acc".into(),
        TensorRef { name: "acc".into(), dims: dims.clone(), dtype: dpuc::graph::DType::Int32, quant: None },
    );
    g.nodes.iter_mut().find(|n| n.id == conv.id).unwrap().output = "acc".into();
    g.nodes.push(Node::new(100, OpKind::Fix, &["acc"], &out));
    g.tensors.insert(
        "other".into(),
        TensorRef::activation("other", Shape::new(dims[0], dims[1], dims[2]), QuantInfo::int8(-2)),
    );
    g.nodes.push(Node::new(101, OpKind::Fix, &["acc"], "other"));
    g.outputs.push("other".into());
    g.validate().unwrap();
    assert!(matches!(fold_constants_and_quantizers(&g), Err(GraphError::Fold(_))));
}

#[test]
fn conv_with_two_consumers_is_not_fused() {
    let mut g = corpus::conv_pool();
    let c = g.tensors["c"].clone();
    g.tensors.insert("c2".into(), TensorRef { name: "c2".into(), ..c });
    g.nodes.push(Node::new(50, OpKind::Identity, &["c"], "c2"));
    g.outputs.push("c2".into());
    let fused = fuse_superlayers(&g, &MachineConfig::default());
    assert!(fused.nodes.iter().all(|n| n.fused.is_none()));
    let plain = fuse_superlayers(&corpus::conv_pool(), &MachineConfig::default());
    assert!(plain.nodes.iter().any(|n| n.fused.is_some()));
}

#[test]
fn residual_add_fuses_into_the_conv() {
    let f = fuse_superlayers(&corpus::resnet_cell(), &MachineConfig::default());
    let fused: Vec<&Node> = f.nodes.iter().filter(|n| n.fused.is_some()).collect();
    assert_eq!(fused.len(), 1);
    assert_eq!(fused[0].inputs.len(), 2);
}

// Scheduling.

fn act(g: &mut Graph, name: &str, c: usize) {
    g.tensors.insert(name.into(), TensorRef::activation(name, Shape::new(1, 1, c), QuantInfo::int8(0)));
}

/// Graph with node `i` producing tensor `t{i}` from the tensors of `preds[i]`
/// (concat, or identity for one operand; node 0 is the input).
fn dag(preds: &[Vec<usize>], channels: &[usize]) -> Graph {
    let mut g = Graph::default();
    for (i, p) in preds.iter().enumerate() {
        let c = if p.is_empty() { channels[i] } else { p.iter().map(|&j| g.tensors[&format!("t{j}")].dims[2]).sum() };
        act(&mut g, &format!("t{i}"), c);
        let ins: Vec<String> = p.iter().map(|j| format!("t{j}")).collect();
        let ins: Vec<&str> = ins.iter().map(String::as_str).collect();
        let op = match p.len() {
            0 => OpKind::Input,
            1 => OpKind::Identity,
            _ => OpKind::Concat,
        };
        g.nodes.push(Node::new(i as NodeId, op, &ins, &format!("t{i}")));
    }
    g.inputs = vec!["t0".into()];
    let used: BTreeSet<String> = g.nodes.iter().flat_map(|n| n.inputs.clone()).collect();
    g.outputs = g.nodes.iter().map(|n| n.output.clone()).filter(|t| !used.contains(t)).collect();
    g
}

/// Every topological order, by brute force over permutations.
fn all_orders(g: &Graph) -> Vec<Vec<NodeId>> {
    fn perms(rest: &mut Vec<NodeId>, cur: &mut Vec<NodeId>, out: &mut Vec<Vec<NodeId>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let n = rest.remove(i);
            cur.push(n);
            perms(rest, cur, out);
            cur.pop();
            rest.insert(i, n);
        }
    }
    let mut out = Vec::new();
    perms(&mut g.nodes.iter().map(|n| n.id).collect(), &mut Vec::new(), &mut out);
    let edges = g.edges();
    out.retain(|o| {
        let pos: BTreeMap<NodeId, usize> = o.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        edges.iter().all(|(p, c)| pos[p] < pos[c])
    });
    out
}

/// Peak of live bytes when running `order`: a tensor is live from its
/// producer's step through its last consumer's step, outputs to the end.
fn peak_oracle(g: &Graph, order: &[NodeId]) -> u64 {
    let step = |id: NodeId| order.iter().position(|&n| n == id).unwrap();
    (0..order.len())
        .map(|s| {
            g.nodes
                .iter()
                .filter(|n| {
                    let def = step(n.id);
                    let last = if g.outputs.contains(&n.output) {
                        order.len()
                    } else {
                        g.nodes.iter().filter(|c| c.inputs.contains(&n.output)).map(|c| step(c.id)).max().unwrap_or(def)
                    };
                    def <= s && s <= last
                })
                .map(|n| g.tensors[&n.output].elements() as u64)
                .sum()
        })
        .max()
        .unwrap_or(0)
}

#[test]
fn chain_has_one_order() {
    let g = dag(&[vec![], vec![0], vec![1]], &[4]);
    assert_eq!(topological_schedule(&g).unwrap().order, vec![0, 1, 2]);
    assert_eq!(explore_schedules(&g, 10).len(), 1);
    assert!(explore_schedules(&g, 0).is_empty());
}

#[test]
fn diamond_breaks_ties_by_id() {
    let g = dag(&[vec![], vec![0], vec![0], vec![1, 2]], &[4]);
    assert_eq!(topological_schedule(&g).unwrap().order, vec![0, 1, 2, 3]);
}

#[test]
fn large_branch_is_finished_before_the_small_one_starts() {
    // t0 -> t1 (10 B); t0 -> t2 (1000 B) -> t3 (1 B); t4 = concat(t1, t3).
    let mut g = dag(&[vec![], vec![0], vec![0], vec![2], vec![1, 3]], &[4]);
    // Identity keeps channel counts; resize the branches by hand.
    for (t, c) in [("t1", 10), ("t2", 1000), ("t3", 1), ("t4", 11)] {
        act(&mut g, t, c);
    }
    let ranked = explore_schedules(&g, 10);
    assert_eq!(ranked.len(), all_orders(&g).len());
    assert_eq!(ranked[0].0.order, vec![0, 2, 3, 1, 4]);
    for (s, peak) in &ranked {
        assert_eq!(*peak, peak_oracle(&g, &s.order), "{:?}", s.order);
    }
}

#[test]
fn inception_style_orders_match_the_oracle() {
    let g = dag(&[vec![], vec![0], vec![0], vec![2], vec![0], vec![4], vec![0], vec![1, 3, 5, 6]], &[8]);
    let mut want = all_orders(&g);
    want.sort();
    let mut got: Vec<Vec<NodeId>> = explore_schedules(&g, 10_000).into_iter().map(|(s, _)| s.order).collect();
    got.sort();
    assert_eq!(got, want);
    assert!(got.iter().all(|o| *o.last().unwrap() == 7));
    assert!(want.contains(&topological_schedule(&g).unwrap().order));
}

fn arb_dag() -> impl Strategy<Value = Vec<Vec<usize>>> {
    (2usize..8).prop_flat_map(|n| {
        let picks: Vec<_> = (1..n).map(|i| proptest::collection::btree_set(0..i, 1..=i.min(3))).collect();
        picks.prop_map(|ps| {
            let mut v = vec![vec![]];
            v.extend(ps.into_iter().map(|s| s.into_iter().collect::<Vec<_>>()));
            v
        })
    })
}

proptest! {
    #[test]
    fn every_returned_schedule_is_topological(preds in arb_dag(), budget in 0usize..20) {
        let g = dag(&preds, &[3]);
        prop_assert!(topological_schedule(&g).unwrap().is_valid(&g));
        let ranked = explore_schedules(&g, budget);
        prop_assert!(ranked.len() <= budget);
        prop_assert!(ranked.windows(2).all(|w| w[0].1 <= w[1].1));
        for (s, _) in &ranked {
            prop_assert!(s.is_valid(&g));
        }
    }
}

#[test]
fn window_attrs_roundtrip_through_json() {
    let g = corpus::conv_pool();
    let back = parse_graph(&g.to_json()).unwrap();
    assert_eq!(back.nodes[1].attrs, Attrs::window(5, 1, 0).with_relu(true));
}
