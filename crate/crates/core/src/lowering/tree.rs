//! Hierarchical record of how a node's output was split into leaves.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub ch: Range<usize>,
}

impl Region {
    fn hull(&self, o: &Region) -> Region {
        let u = |a: &Range<usize>, b: &Range<usize>| a.start.min(b.start)..a.end.max(b.end);
        Region { rows: u(&self.rows, &o.rows), cols: u(&self.cols, &o.cols), ch: u(&self.ch, &o.ch) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitAxis {
    Width,
    Height,
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageCounts {
    pub loads: usize,
    pub convs: usize,
    pub miscs: usize,
    pub saves: usize,
}

/// One pipeline unit: a strip, a row band and a weight slab.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLeaf {
    /// Index of the unit in the node's tile list.
    pub unit: usize,
    /// `[strip, band, slab]`.
    pub path: [usize; 3],
    pub out: Region,
    /// Input region read from each operand.
    pub reads: Vec<Region>,
    /// Zero padding the leaf sees: `[top, bottom, left, right]`.
    pub pad: [usize; 4],
    pub counts: StageCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TileTree {
    Split { axis: SplitAxis, out: Region, children: Vec<TileTree> },
    Leaf(TileLeaf),
}

impl TileTree {
    /// Nest leaves by strip, then band, then slab. Levels with a single child
    /// are dropped, so an unsplit node is one leaf.
    pub fn from_leaves(leaves: Vec<TileLeaf>) -> Option<TileTree> {
        build(leaves, 0)
    }

    pub fn out(&self) -> &Region {
        match self {
            TileTree::Split { out, .. } => out,
            TileTree::Leaf(l) => &l.out,
        }
    }

    pub fn leaves(&self) -> Vec<&TileLeaf> {
        match self {
            TileTree::Leaf(l) => vec![l],
            TileTree::Split { children, .. } => children.iter().flat_map(|c| c.leaves()).collect(),
        }
    }
}

fn build(leaves: Vec<TileLeaf>, level: usize) -> Option<TileTree> {
    if leaves.len() <= 1 || level == 3 {
        return match leaves.len() {
            0 => None,
            1 => leaves.into_iter().next().map(TileTree::Leaf),
            _ => unreachable!("leaves share a full path"),
        };
    }
    let mut groups: Vec<(usize, Vec<TileLeaf>)> = Vec::new();
    for l in leaves {
        match groups.last_mut() {
            Some((k, g)) if *k == l.path[level] => g.push(l),
            _ => groups.push((l.path[level], vec![l])),
        }
    }
    if groups.len() == 1 {
        return build(groups.pop().unwrap().1, level + 1);
    }
    let children: Vec<TileTree> = groups.into_iter().filter_map(|(_, g)| build(g, level + 1)).collect();
    let out = children.iter().skip(1).fold(children[0].out().clone(), |acc, c| acc.hull(c.out()));
    let axis = [SplitAxis::Width, SplitAxis::Height, SplitAxis::Weights][level];
    Some(TileTree::Split { axis, out, children })
}
