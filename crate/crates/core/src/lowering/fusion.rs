//! Rate matching between a convolution and the pool or eltwise consuming it.

use serde::{Deserialize, Serialize};

use super::split::{line_rounded, OpGeometry, Window};
use crate::hw::MachineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Consumer {
    /// Max pool with this row window.
    Pool(Window),
    Eltwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionPlan {
    /// Conv rows produced per steady tile.
    pub h_c: usize,
    /// Intermediate rows each consumer instruction advances by.
    pub h_p: usize,
    /// Consumer instructions per conv tile; `k * h_p == h_c`.
    pub k: usize,
    /// Output rows per consumer instruction.
    pub out_rows: usize,
    /// Intermediate rows one consumer instruction reads.
    pub t_h: usize,
    pub enabled: bool,
}

impl FusionPlan {
    pub fn disabled() -> Self {
        FusionPlan { h_c: 0, h_p: 0, k: 0, out_rows: 0, t_h: 0, enabled: false }
    }

    /// Intermediate rows a tile keeps from the previous tile.
    pub fn carry(&self) -> usize {
        self.t_h.saturating_sub(self.h_p)
    }
}

/// Intermediate rows needed to produce `out_rows` pooled rows.
pub fn pool_footprint_rows(out_rows: usize, pool: Window) -> usize {
    pool.footprint(out_rows)
}

/// Largest `k` such that `k` consumer instructions consume exactly one conv
/// tile of at most `cfg.h_c` rows and the double-buffered footprints of the
/// conv input and intermediate fit one FM memory each. `conv` describes the
/// full (unsplit) convolution; row widths are capped at `gamma` since a
/// width split would bring them there.
pub fn plan_fusion(conv: &OpGeometry, consumer: Consumer, cfg: &MachineConfig) -> FusionPlan {
    let (h_p, out_rows, t_h) = match consumer {
        Consumer::Pool(w) => {
            if w.k == 0 || w.s == 0 {
                return FusionPlan::disabled();
            }
            let po = (cfg.h_p as usize / w.s).max(1);
            (po * w.s, po, pool_footprint_rows(po, w))
        }
        Consumer::Eltwise => (cfg.h_e as usize, cfg.h_e as usize, cfg.h_e as usize),
    };
    let gamma = cfg.gamma as usize;
    let cap = cfg.fm_capacity() as usize;
    let mid_row = line_rounded((conv.out_w * conv.out_c).min(gamma), cfg);
    let in_row = line_rounded((conv.in_w * conv.in_c).min(gamma), cfg);
    let carry = t_h.saturating_sub(h_p);
    for k in (1..=cfg.h_c as usize / h_p).rev() {
        let h_c = k * h_p;
        let mid_rows = h_c + carry;
        let fits = 2 * mid_rows * mid_row <= cap && 2 * conv.rows.footprint(mid_rows) * in_row <= cap;
        if fits {
            return FusionPlan { h_c, h_p, k, out_rows, t_h, enabled: true };
        }
    }
    FusionPlan::disabled()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(k: usize, s: usize) -> OpGeometry {
        OpGeometry {
            in_h: 64,
            in_w: 16,
            in_c: 8,
            out_h: (64 - k) / s + 1,
            out_w: (16 - k) / s + 1,
            out_c: 16,
            rows: Window::new(k, s, 0),
            cols: Window::new(k, s, 0),
        }
    }

    #[test]
    fn two_by_two_pool_gives_four_consumers_per_tile() {
        let plan = plan_fusion(&conv(5, 1), Consumer::Pool(Window::new(2, 2, 0)), &MachineConfig::default());
        assert!(plan.enabled);
        assert_eq!((plan.k, plan.h_c, plan.h_p, plan.out_rows), (4, 8, 2, 1));
    }

    #[test]
    fn eltwise_gives_four_consumers_per_tile() {
        let plan = plan_fusion(&conv(3, 1), Consumer::Eltwise, &MachineConfig::default());
        assert!(plan.enabled);
        assert_eq!((plan.k, plan.h_c, plan.h_p), (4, 8, 2));
    }

    #[test]
    fn overlapping_pool_footprint_and_carry() {
        let pool = Window::new(3, 2, 0);
        // Two pooled rows read five intermediate rows; successive pairs
        // advance by four and share one.
        assert_eq!(pool_footprint_rows(2, pool), 5);
        assert_eq!(pool_footprint_rows(2, pool) - 2 * pool.s, 1);
        let plan = plan_fusion(&conv(3, 1), Consumer::Pool(pool), &MachineConfig::default());
        assert_eq!(plan.carry(), 1);
    }

    #[test]
    fn disabled_when_nothing_fits() {
        let cfg = MachineConfig { fm_bank_rows: 4, ..MachineConfig::default() };
        let big = OpGeometry { in_w: 64, in_c: 64, out_w: 64, out_c: 64, ..conv(3, 1) };
        assert!(!plan_fusion(&big, Consumer::Pool(Window::new(2, 2, 0)), &cfg).enabled);
    }
}
