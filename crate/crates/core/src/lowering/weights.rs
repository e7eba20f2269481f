//! Splitting convolution parameters into PM-sized slabs along output channels.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::LowerError;
use crate::graph::WeightSpec;
use crate::hw::MachineConfig;

/// Output-channel slice of a node's parameters. In DDR and PM a slab is laid
/// out as each kernel's weights `(co, kh, kw, ci)` for the slab's channels,
/// then one int32 bias per channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSlab {
    pub co: Range<usize>,
    /// Byte offset of each kernel's weights within the slab.
    pub kernel_offsets: Vec<usize>,
    pub bias_offset: usize,
    pub bytes: usize,
    /// Byte offset of the slab within the node's parameter block.
    pub block_offset: usize,
}

/// Slabs for `co` output channels where kernel `i` holds `per_co[i]` weight
/// bytes per output channel. One slab when everything fits PM; otherwise
/// slabs of at most half of PM so the next slab can load while the current
/// one is in use.
pub fn slab_plan(co: usize, per_co: &[usize], cfg: &MachineConfig) -> Result<Vec<WeightSlab>, LowerError> {
    let unit: usize = per_co.iter().sum::<usize>() + 4;
    let align = cfg.pm_align() as usize;
    let rounded = |b: usize| b.div_ceil(align) * align;
    let pm = cfg.pm_bytes as usize;
    let max_co = if rounded(co * unit) <= pm {
        co
    } else {
        let half = pm / 2;
        let mut n = half / unit;
        while n > 0 && rounded(n * unit) > half {
            n -= 1;
        }
        if n == 0 {
            return Err(LowerError::Infeasible(format!(
                "one output channel needs {unit} parameter bytes, more than half of PM ({half})"
            )));
        }
        n
    };
    let count = co.div_ceil(max_co);
    let chunk = co.div_ceil(count);
    let mut slabs = Vec::with_capacity(count);
    let mut block_offset = 0;
    for a in (0..co).step_by(chunk) {
        let range = a..(a + chunk).min(co);
        let n = range.len();
        let mut kernel_offsets = Vec::with_capacity(per_co.len());
        let mut off = 0;
        for &k in per_co {
            kernel_offsets.push(off);
            off += k * n;
        }
        let bytes = off + 4 * n;
        slabs.push(WeightSlab { co: range, kernel_offsets, bias_offset: off, bytes, block_offset });
        block_offset += bytes;
    }
    Ok(slabs)
}

/// Slabs for a plain convolution.
pub fn weight_tiling(p: &WeightSpec, cfg: &MachineConfig) -> Result<Vec<WeightSlab>, LowerError> {
    slab_plan(p.co, &[p.per_output_channel()], cfg)
}

/// Serialize a parameter block. `kernels[i]` holds kernel `i`'s weights for
/// all output channels in `(co, ...)` order; `bias` is already aligned to the
/// accumulator exponent.
pub fn pack_params(slabs: &[WeightSlab], kernels: &[Vec<i8>], bias: &[i32]) -> Vec<u8> {
    let co_total = bias.len();
    let mut out = Vec::with_capacity(slabs.iter().map(|s| s.bytes).sum());
    for s in slabs {
        for k in kernels {
            let per = k.len() / co_total;
            out.extend(k[s.co.start * per..s.co.end * per].iter().map(|&v| v as u8));
        }
        for b in &bias[s.co.clone()] {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}
