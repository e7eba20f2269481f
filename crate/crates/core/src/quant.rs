//! Fixed-point arithmetic shared by the reference executor and the machine.
//!
//! Every int8 tensor carries a power-of-two scale `2^e` (its `step`). Products
//! accumulate in 32 bits at the sum of the operand exponents, and results are
//! brought back to int8 by multiplying with `2^(e_acc - e_out)`, rounding half
//! away from zero and saturating to `[-128, 127]`. The rounding rule lives in
//! [`scale_round`] and nowhere else.

use serde::{Deserialize, Serialize};

use crate::error::GraphError;

/// Range and resolution of a quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantInfo {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl QuantInfo {
    /// Symmetric int8 quantization with step `2^exp`.
    pub fn int8(exp: i32) -> Self {
        let step = 2f64.powi(exp);
        QuantInfo { lo: -128.0 * step, hi: 128.0 * step, step }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self, int8: bool) -> Result<(), GraphError> {
        if !(self.lo < self.hi) {
            return Err(GraphError::Quant(format!("range ({}, {}) is empty", self.lo, self.hi)));
        }
        if !(self.step > 0.0) {
            return Err(GraphError::Quant(format!("step {} is not positive", self.step)));
        }
        if int8 && (self.hi - self.lo) / self.step > 256.0 + 1e-9 {
            return Err(GraphError::Quant(format!(
                "range ({}, {}) with step {} needs more than 8 bits",
                self.lo, self.hi, self.step
            )));
        }
        self.exponent().map(|_| ())
    }

    /// `e` such that `step == 2^e`.
    pub fn exponent(&self) -> Result<i32, GraphError> {
        let e = self.step.log2();
        if e.fract() != 0.0 || !e.is_finite() {
            return Err(GraphError::Quant(format!("step {} is not a power of two", self.step)));
        }
        Ok(e as i32)
    }
}

/// Multiply `v` by `2^shift`, rounding half away from zero when `shift < 0`.
pub fn scale_round(v: i64, shift: i32) -> i64 {
    if v == 0 {
        0
    } else if shift >= 0 {
        v.checked_shl(shift as u32).filter(|r| r >> shift == v).unwrap_or(if v < 0 { i64::MIN } else { i64::MAX })
    } else {
        let s = (-shift).min(62) as u32;
        let half = 1i64 << (s - 1);
        let mag = (v.unsigned_abs() as i64).saturating_add(half) >> s;
        if v < 0 {
            -mag
        } else {
            mag
        }
    }
}

pub fn saturate_i8(v: i64) -> i8 {
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

pub fn saturate_i32(v: i64) -> i32 {
    v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

/// Requantize an accumulator at exponent `e_in` to an int8 at exponent `e_out`.
pub fn requantize(acc: i64, e_in: i32, e_out: i32) -> i8 {
    saturate_i8(scale_round(acc, e_in - e_out))
}

/// Bias stored as int8 at exponent `e_bias`, aligned to the accumulator exponent.
pub fn align_bias(bias: i8, e_bias: i32, e_acc: i32) -> i32 {
    saturate_i32(scale_round(bias as i64, e_bias - e_acc))
}

/// Shift applied when requantizing: output = in * 2^shift.
pub fn shift_between(e_in: i32, e_out: i32) -> i32 {
    e_in - e_out
}

/// Parameters of an int8 addition: operands are aligned to the finer
/// exponent by left shifts `la`/`lb`, and the sum is requantized by `shift`.
pub fn add_shifts(ea: i32, eb: i32, eo: i32) -> (u32, u32, i32) {
    let m = ea.min(eb);
    ((ea - m) as u32, (eb - m) as u32, m - eo)
}

/// Apply an addition prepared by [`add_shifts`].
pub fn add_apply(a: i8, b: i8, la: u32, lb: u32, shift: i32, relu: bool) -> i8 {
    let acc = scale_round(a as i64, la as i32).saturating_add(scale_round(b as i64, lb as i32));
    let v = saturate_i8(scale_round(acc, shift));
    if relu {
        v.max(0)
    } else {
        v
    }
}
