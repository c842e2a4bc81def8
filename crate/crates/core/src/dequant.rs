//! Dequantization of expert weights back to FP16.
//!
//! Two paths produce `W_dq[e, m, n] = float(W+[e, m, n] - offset) * S[e, n]`:
//!
//! * [`dequantize_naive`] converts each stored integer with a native
//!   integer-to-float conversion.
//! * [`dequantize_fast`] never does an integer-to-float conversion. Pairs of
//!   stored values are OR-ed into the mantissa of FP16 1024.0, giving
//!   `[v0 + 1024, v1 + 1024]` in one 32-bit word, and a single paired FP16
//!   subtraction of `1024 + offset` yields the signed values.
//!
//! Both paths then multiply by the FP16 scale the same way, so their outputs
//! agree bit for bit.

use crate::half_float::{half2_lanes, half2_sub, half_mul, Half, MAGIC_1024};
use crate::quantizer::{Bits, QuantizedExpertWeights, INT4_STORAGE_ORDER};
use crate::tensor::ExpertWeights;

/// Output of either dequantize path, shape `(E, M, N)`.
pub type DequantOutput = ExpertWeights;

/// Environment variable that, when set to a non-empty value other than `0`,
/// makes [`MagicConstants::from_env`] return deliberately wrong constants.
pub const FAULT_INJECT_ENV: &str = "MOE_FAULT_INJECT";

/// The paired FP16 constants subtracted after composing `v + 1024`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MagicConstants {
    /// `[1152, 1152]`: removes 1024 and the int8 offset of 128.
    pub int8_bias: u32,
    /// `[1032, 1032]`: removes 1024 and the int4 offset of 8.
    pub int4_bias: u32,
}

impl MagicConstants {
    pub const EXACT: MagicConstants = MagicConstants { int8_bias: 0x6480_6480, int4_bias: 0x6408_6408 };

    /// Off by one in the int8 constant (1153 instead of 1152).
    pub const FAULTY: MagicConstants = MagicConstants { int8_bias: 0x6481_6481, int4_bias: 0x6408_6408 };

    pub fn from_env() -> MagicConstants {
        match std::env::var(FAULT_INJECT_ENV) {
            Ok(v) if !v.is_empty() && v != "0" => Self::FAULTY,
            _ => Self::EXACT,
        }
    }

    pub fn is_exact(&self) -> bool {
        *self == Self::EXACT
    }
}

impl Default for MagicConstants {
    fn default() -> Self {
        Self::EXACT
    }
}

const MAGIC_PAIR: u32 = (MAGIC_1024 as u32) << 16 | MAGIC_1024 as u32;

/// Reference conversion of one stored value: native int -> float, then an
/// FP16 multiply by the channel scale.
#[inline]
pub fn dequantize_value_naive(stored: u8, scale: Half, bits: Bits) -> Half {
    let signed = stored as i32 - bits.offset();
    // |signed| <= 255 is exact in f32 and in FP16.
    let f = Half::from_f32(signed as f32);
    half_mul(f, scale)
}

pub fn dequantize_naive(qw: &QuantizedExpertWeights) -> DequantOutput {
    let (experts, rows, cols) = qw.shape();
    let bits = qw.bits();
    let mut out = Vec::with_capacity(experts * rows * cols);
    for e in 0..experts {
        let logical = crate::quantizer::unpack(qw, e).expect("expert index in range");
        let scales = qw.expert_scales(e);
        for (i, &v) in logical.as_slice().iter().enumerate() {
            out.push(dequantize_value_naive(v, scales[i % cols], bits));
        }
    }
    ExpertWeights::from_vec(experts, rows, cols, out).expect("shape preserved")
}

/// Converts four `W+` bytes to signed FP16 values, two at a time.
#[inline]
pub fn i2f_magic_u8(bytes: [u8; 4]) -> [Half; 4] {
    i2f_magic_u8_with(bytes, &MagicConstants::EXACT)
}

#[inline]
pub fn i2f_magic_u8_with(bytes: [u8; 4], k: &MagicConstants) -> [Half; 4] {
    let word = u32::from_le_bytes(bytes);
    // Spread bytes (e0, e1) and (e2, e3) into the low byte of each 16-bit lane.
    let lo = (word & 0x0000_00ff) | (word & 0x0000_ff00) << 8;
    let hi = (word >> 16) & 0x0000_00ff | (word >> 8) & 0x00ff_0000;
    let [a, b] = half2_lanes(half2_sub(lo | MAGIC_PAIR, k.int8_bias));
    let [c, d] = half2_lanes(half2_sub(hi | MAGIC_PAIR, k.int8_bias));
    [a, b, c, d]
}

/// Converts one 32-bit word of eight interleave-ordered nibbles to eight
/// signed FP16 values in logical order.
///
/// With the storage order `[e0, e2, e4, e6, e1, e3, e5, e7]`, nibble `i` holds
/// `e(2i)` and nibble `i + 4` holds `e(2i+1)`, so `(word >> 4i) & 0x000f000f`
/// lands the pair in the two FP16 lanes with no further shuffling.
#[inline]
pub fn i2f_magic_u4(word: u32) -> [Half; 8] {
    i2f_magic_u4_with(word, &MagicConstants::EXACT)
}

#[inline]
pub fn i2f_magic_u4_with(word: u32, k: &MagicConstants) -> [Half; 8] {
    let mut out = [Half::ZERO; 8];
    for i in 0..4 {
        let pair = (word >> (4 * i)) & 0x000f_000f;
        let [even, odd] = half2_lanes(half2_sub(pair | MAGIC_PAIR, k.int4_bias));
        out[2 * i] = even;
        out[2 * i + 1] = odd;
    }
    out
}

/// Dequantizes one `(e, m)` weight row into `out` (length N) on the fast path.
pub fn dequantize_row_fast(qw: &QuantizedExpertWeights, e: usize, m: usize, k: &MagicConstants, out: &mut [Half]) {
    let cols = qw.cols();
    debug_assert_eq!(out.len(), cols);
    let scales = qw.expert_scales(e);
    let row_bytes = qw.bits().packed_len(cols);
    let start = e * qw.expert_packed_len() + m * row_bytes;
    let row = &qw.packed()[start..start + row_bytes];
    match qw.bits() {
        Bits::Int8 => {
            let mut chunks = row.chunks_exact(4);
            let mut n = 0;
            for chunk in &mut chunks {
                let vals = i2f_magic_u8_with([chunk[0], chunk[1], chunk[2], chunk[3]], k);
                for v in vals {
                    out[n] = half_mul(v, scales[n]);
                    n += 1;
                }
            }
            let tail = chunks.remainder();
            if !tail.is_empty() {
                // Pad with the midpoint; the padded lanes are discarded.
                let mut word = [128u8; 4];
                word[..tail.len()].copy_from_slice(tail);
                let vals = i2f_magic_u8_with(word, k);
                for v in &vals[..tail.len()] {
                    out[n] = half_mul(*v, scales[n]);
                    n += 1;
                }
            }
        }
        Bits::Int4 => {
            for (g, chunk) in row.chunks_exact(4).enumerate() {
                let vals = i2f_magic_u4_with(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]), k);
                for (j, v) in vals.into_iter().enumerate() {
                    let n = 8 * g + j;
                    out[n] = half_mul(v, scales[n]);
                }
            }
        }
    }
}

pub fn dequantize_fast(qw: &QuantizedExpertWeights) -> DequantOutput {
    dequantize_fast_with(qw, &MagicConstants::EXACT)
}

pub fn dequantize_fast_with(qw: &QuantizedExpertWeights, k: &MagicConstants) -> DequantOutput {
    let (experts, rows, cols) = qw.shape();
    let mut out = vec![Half::ZERO; experts * rows * cols];
    for (i, row) in out.chunks_exact_mut(cols).enumerate() {
        dequantize_row_fast(qw, i / rows, i % rows, k, row);
    }
    ExpertWeights::from_vec(experts, rows, cols, out).expect("shape preserved")
}

/// Where logical element `j` of an int4 group lives among the eight nibbles.
pub fn int4_storage_slot(j: usize) -> usize {
    INT4_STORAGE_ORDER.iter().position(|&i| i == j).expect("j < 8")
}
