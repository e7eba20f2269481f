//! Tiling of scheduled nodes into machine-sized leaves.

pub mod deconv;
pub mod fusion;
mod lower;
pub mod split;
pub mod tree;
pub mod weights;

pub use lower::{lower_node, param_bytes, DdrPlace, LoweredNode, NodeCtx, Operand, Role, SliceInfo};

use serde::{Deserialize, Serialize};

use crate::hw::{Instruction, OpType};

/// Instructions of one tile, grouped by the stage that issues them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileStages {
    pub load: Vec<Instruction>,
    pub conv: Vec<Instruction>,
    pub misc: Vec<Instruction>,
    pub save: Vec<Instruction>,
}

impl TileStages {
    /// Stage classes in pipeline order.
    pub const CLASSES: [OpType; 4] = [OpType::Load, OpType::Conv, OpType::Misc, OpType::Save];

    pub fn stage(&self, t: OpType) -> &[Instruction] {
        match t {
            OpType::Load => &self.load,
            OpType::Conv => &self.conv,
            OpType::Misc => &self.misc,
            OpType::Save => &self.save,
        }
    }

    pub fn len(&self) -> usize {
        self.load.len() + self.conv.len() + self.misc.len() + self.save.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
