//! Width and height splitting with receptive-field input ranges.
//!
//! All ranges are 0-indexed and half-open.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::LowerError;
use crate::hw::MachineConfig;

/// One-dimensional sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl Window {
    pub const IDENTITY: Window = Window { k: 1, s: 1, p: 0 };

    pub fn new(k: usize, s: usize, p: usize) -> Self {
        Window { k, s, p }
    }

    /// Input positions read by outputs `out`, clamped to `[0, extent)`.
    pub fn input_range(&self, out: &Range<usize>, extent: usize) -> Range<usize> {
        if out.is_empty() {
            return 0..0;
        }
        let lo = (out.start * self.s).saturating_sub(self.p).min(extent);
        let hi = ((out.end - 1) * self.s + self.k).saturating_sub(self.p).min(extent);
        lo..hi.max(lo)
    }

    /// Padding rows/cols the first output of `out` sees before the input starts.
    pub fn leading_pad(&self, out: &Range<usize>) -> usize {
        self.p.saturating_sub(out.start * self.s)
    }

    /// Rows of input a band of `h` outputs needs, ignoring padding.
    pub fn footprint(&self, h: usize) -> usize {
        (h.max(1) - 1) * self.s + self.k
    }
}

/// Geometry of a single windowed operation (conv or pool).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub rows: Window,
    pub cols: Window,
}

impl OpGeometry {
    pub fn layer(&self) -> Layer {
        Layer { win: self.cols, in_w: self.in_w, in_c: self.in_c, out_c: self.out_c }
    }
}

/// One stage of a chain of windowed operations along the width axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub win: Window,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strip {
    /// Output columns of the last layer.
    pub out: Range<usize>,
    /// Input columns of the first layer.
    pub input: Range<usize>,
}

/// Column ranges at every layer boundary for final outputs `out`:
/// element 0 is the chain input, the last element is `out` itself.
pub fn chain_ranges(out: &Range<usize>, layers: &[Layer]) -> Vec<Range<usize>> {
    let mut ranges = vec![out.clone()];
    for l in layers.iter().rev() {
        let next = l.win.input_range(ranges.last().unwrap(), l.in_w);
        ranges.push(next);
    }
    ranges.reverse();
    ranges
}

/// Fewest equal-width strips whose every row vector (input, intermediate and
/// output) satisfies `w * c <= gamma`.
pub fn w_split_chain(out_w: usize, layers: &[Layer], gamma: usize) -> Result<Vec<Strip>, LowerError> {
    assert!(!layers.is_empty());
    let fits = |out: &Range<usize>| {
        let r = chain_ranges(out, layers);
        r.iter()
            .enumerate()
            .all(|(i, cols)| cols.len() * if i < layers.len() { layers[i].in_c } else { layers[i - 1].out_c } <= gamma)
    };
    for n in 1..=out_w {
        let chunk = out_w.div_ceil(n);
        let strips: Vec<Range<usize>> = (0..out_w).step_by(chunk).map(|a| a..(a + chunk).min(out_w)).collect();
        if strips.iter().all(fits) {
            return Ok(strips
                .into_iter()
                .map(|out| Strip { input: chain_ranges(&out, layers)[0].clone(), out })
                .collect());
        }
        if chunk == 1 {
            break;
        }
    }
    Err(LowerError::Infeasible(format!(
        "a single output column exceeds gamma = {gamma} ({} input channels, {} output channels)",
        layers[0].in_c,
        layers.last().unwrap().out_c
    )))
}

/// Width split of a single windowed operation.
pub fn w_split(g: &OpGeometry, cfg: &MachineConfig) -> Result<Vec<Strip>, LowerError> {
    w_split_chain(g.out_w, &[g.layer()], cfg.gamma as usize)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    pub out: Range<usize>,
    pub input: Range<usize>,
}

/// Bytes one FM-resident row of `bytes` occupies (whole lines).
pub fn line_rounded(bytes: usize, cfg: &MachineConfig) -> usize {
    bytes.div_ceil(cfg.fm_line_bytes() as usize) * cfg.fm_line_bytes() as usize
}

/// Output row bands of height at most `preferred_h`, reduced until the input
/// footprint of one band fits a single FM memory. `g` describes one strip.
pub fn h_split(g: &OpGeometry, cfg: &MachineConfig, preferred_h: usize) -> Result<Vec<Band>, LowerError> {
    let row = line_rounded(g.in_w * g.in_c, cfg);
    let cap = cfg.fm_capacity() as usize;
    let mut h = preferred_h.clamp(1, g.out_h.max(1));
    while g.rows.footprint(h) * row > cap {
        if h == 1 {
            return Err(LowerError::Infeasible(format!(
                "input footprint of {} rows x {row} bytes exceeds FM capacity {cap}",
                g.rows.footprint(1)
            )));
        }
        h -= 1;
    }
    Ok((0..g.out_h)
        .step_by(h)
        .map(|a| {
            let out = a..(a + h).min(g.out_h);
            Band { input: g.rows.input_range(&out, g.in_h), out }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(in_w: usize, in_c: usize, out_w: usize, out_c: usize, win: Window) -> OpGeometry {
        OpGeometry { in_h: in_w, in_w, in_c, out_h: out_w, out_w, out_c, rows: win, cols: win }
    }

    /// Brute force: every input column any output column in `out` touches.
    fn oracle(out: &Range<usize>, w: Window, extent: usize) -> Range<usize> {
        let cols: Vec<usize> = out
            .clone()
            .flat_map(|o| (0..w.k).filter_map(move |t| (o * w.s + t).checked_sub(w.p)))
            .filter(|&c| c < extent)
            .collect();
        match (cols.iter().min(), cols.iter().max()) {
            (Some(&lo), Some(&hi)) => lo..hi + 1,
            _ => 0..0,
        }
    }

    #[test]
    fn input_range_matches_receptive_field() {
        for k in 1..6 {
            for s in 1..4 {
                for p in 0..k {
                    let w = Window::new(k, s, p);
                    let extent = 17;
                    let out_w = (extent + 2 * p - k) / s + 1;
                    for a in 0..out_w {
                        for b in a + 1..=out_w {
                            assert_eq!(w.input_range(&(a..b), extent), oracle(&(a..b), w, extent), "{w:?} {a}..{b}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn no_split_when_row_fits() {
        let cfg = MachineConfig::default();
        let strips = w_split(&geom(16, 8, 16, 8, Window::new(3, 1, 1)), &cfg).unwrap();
        assert_eq!(strips, vec![Strip { out: 0..16, input: 0..16 }]);
    }

    #[test]
    fn split_inputs_overlap_when_kernel_exceeds_stride() {
        // 10 input columns, k=3, s=1, p=0 give 8 outputs; halves [0,4) and [4,8)
        // read 1-indexed columns [1,6] and [5,10].
        let cfg = MachineConfig { gamma: 48, ..MachineConfig::default() };
        let strips = w_split(&geom(10, 8, 8, 8, Window::new(3, 1, 0)), &cfg).unwrap();
        assert_eq!(strips.len(), 2);
        assert_eq!(strips[0], Strip { out: 0..4, input: 0..6 });
        assert_eq!(strips[1], Strip { out: 4..8, input: 4..10 });
    }

    #[test]
    fn pointwise_split_inputs_are_disjoint() {
        let cfg = MachineConfig { gamma: 32, ..MachineConfig::default() };
        let strips = w_split(&geom(16, 8, 16, 8, Window::IDENTITY), &cfg).unwrap();
        assert!(strips.len() > 1);
        for pair in strips.windows(2) {
            assert!(pair[0].input.end <= pair[1].input.start);
        }
    }

    #[test]
    fn single_column_over_gamma_is_infeasible() {
        let cfg = MachineConfig { gamma: 16, ..MachineConfig::default() };
        assert!(matches!(w_split(&geom(8, 32, 8, 8, Window::IDENTITY), &cfg), Err(LowerError::Infeasible(_))));
    }

    #[test]
    fn first_layer_widths_split_only_where_expected() {
        let cfg = MachineConfig::default();
        // 224x224x3 image, 7x7/2 to 112x112x64: rows fit gamma.
        let resnet = OpGeometry {
            in_h: 224,
            in_w: 224,
            in_c: 3,
            out_h: 112,
            out_w: 112,
            out_c: 64,
            rows: Window::new(7, 2, 3),
            cols: Window::new(7, 2, 3),
        };
        assert_eq!(w_split(&resnet, &cfg).unwrap().len(), 1);
        // 224x224x3 image, 3x3/1 to 224x224x64: an output row is 14336 bytes.
        let vgg =
            OpGeometry { out_h: 224, out_w: 224, rows: Window::new(3, 1, 1), cols: Window::new(3, 1, 1), ..resnet };
        assert!(w_split(&vgg, &cfg).unwrap().len() >= 2);
    }

    #[test]
    fn twelve_input_rows_per_steady_tile() {
        let cfg = MachineConfig::default();
        let g = OpGeometry {
            in_h: 36,
            in_w: 16,
            in_c: 8,
            out_h: 32,
            out_w: 12,
            out_c: 16,
            rows: Window::new(5, 1, 0),
            cols: Window::new(5, 1, 0),
        };
        let bands = h_split(&g, &cfg, 8).unwrap();
        assert_eq!(bands.len(), 4);
        assert!(bands.iter().all(|b| b.input.len() == 12 && b.out.len() == 8));
    }

    #[test]
    fn exact_fit_and_short_last_band() {
        let cfg = MachineConfig::default();
        let mut g = geom(8, 8, 8, 8, Window::new(1, 1, 0));
        assert_eq!(h_split(&g, &cfg, 8).unwrap().len(), 1);
        g = OpGeometry { in_h: 22, out_h: 20, rows: Window::new(3, 1, 0), ..g };
        let bands = h_split(&g, &cfg, 8).unwrap();
        let heights: Vec<usize> = bands.iter().map(|b| b.out.len()).collect();
        assert_eq!(heights, vec![8, 8, 4]);
        for pair in bands.windows(2) {
            assert_eq!(pair[0].input.end - pair[1].input.start, 3 - 1);
        }
        for b in &bands {
            assert_eq!(b.input, oracle(&b.out, g.rows, g.in_h));
        }
    }

    #[test]
    fn height_shrinks_until_footprint_fits() {
        let cfg = MachineConfig { fm_bank_rows: 6, ..MachineConfig::default() };
        let g = OpGeometry {
            in_h: 40,
            in_w: 64,
            in_c: 8,
            out_h: 38,
            out_w: 62,
            out_c: 8,
            rows: Window::new(3, 1, 0),
            cols: Window::new(3, 1, 0),
        };
        // 6 lines of 512 bytes: footprint (h-1)+3 <= 6 gives h = 4.
        let bands = h_split(&g, &cfg, 8).unwrap();
        assert_eq!(bands[0].out.len(), 4);
        let tiny = MachineConfig { fm_bank_rows: 2, ..MachineConfig::default() };
        assert!(matches!(h_split(&g, &tiny, 8), Err(LowerError::Infeasible(_))));
    }
}
